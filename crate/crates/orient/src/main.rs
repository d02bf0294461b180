use clap::Parser;

fn main() {
    let cli = orient::cli::Cli::parse();
    std::process::exit(orient::cli::run(cli));
}
