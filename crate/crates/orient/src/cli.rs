//! Command-line front end: dataset synthesis, training, detection,
//! inference, evaluation, and gradient verification.
//!
//! Exit codes: 0 success, 1 generic failure, 2 ingestion failure,
//! 3 training divergence, 4 architecture mismatch, 5 gradient-check failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::config::Config;
use crate::data::{
    detect_keypoints, extract_patch, load_dataset, load_image, read_keypoints, save_dataset,
    synth_pairs, write_keypoints, Homography,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_methods, rank_methods, EvalReport, ALL_METHODS};
use crate::gradcheck::{run_gradcheck, Fault};
use crate::net::OrientationNet;
use crate::trainer::train;
use crate::util::rad_to_deg;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_INGEST: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_ARCH: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

#[derive(Parser, Debug)]
#[command(
    name = "orient",
    about = "Learn and evaluate canonical orientations for feature points",
    version
)]
pub struct Cli {
    /// Plain-text configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured RNG seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the effective configuration in canonical form.
    Config {
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize rotation training pairs from grayscale images.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Base images (PGM or 8-bit grayscale PNG).
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Train the orientation network on a pairs dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint path; a per-epoch loss CSV lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect keypoints and write the keypoint text format.
    Detect {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict orientations for keypoints of an image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        keypoints: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the matching benchmark over a manifest of image pairs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Lines of: imgA imgB homography_file sequence_name
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Check every backward pass against central finite differences.
    Gradcheck,
}

pub fn run(cli: Cli) -> i32 {
    let mut cfg = match &cli.config {
        Some(path) => match Config::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_INGEST;
            }
        },
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    let result = match &cli.command {
        Command::Config { out } => cmd_config(&cfg, out.as_deref()),
        Command::Synth { out, images } => cmd_synth(&cfg, images, out, cli.verbose),
        Command::Train { dataset, out } => cmd_train(&cfg, dataset, out, cli.verbose),
        Command::Detect { image, out } => cmd_detect(&cfg, image, out),
        Command::Predict {
            checkpoint,
            image,
            keypoints,
            out,
        } => cmd_predict(&cfg, cli.config.is_some(), checkpoint, image, keypoints, out),
        Command::Eval {
            checkpoint,
            manifest,
            out_dir,
        } => cmd_eval(&cfg, checkpoint, manifest, out_dir, cli.verbose),
        Command::Gradcheck => cmd_gradcheck(&cfg),
    };

    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Ingestion { .. }
        | Error::IngestionAt { .. }
        | Error::IngestionRecord { .. }
        | Error::Io(_) => EXIT_INGEST,
        Error::Training(_) => EXIT_DIVERGED,
        Error::ArchitectureMismatch(_) => EXIT_ARCH,
        _ => EXIT_ERROR,
    }
}

fn cmd_config(cfg: &Config, out: Option<&Path>) -> Result<i32> {
    let text = cfg.dump();
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(EXIT_OK)
}

fn cmd_synth(cfg: &Config, images: &[PathBuf], out: &Path, verbose: bool) -> Result<i32> {
    let mut bases = Vec::new();
    for path in images {
        let img = load_image(path)?;
        if verbose {
            eprintln!("loaded {} ({}x{})", path.display(), img.width(), img.height());
        }
        bases.push(Arc::new(img));
    }
    let pairs = synth_pairs(&bases, cfg.pairs, cfg.seed, &cfg.synth_params())?;
    save_dataset(out, &pairs)?;

    let rotations: Vec<f64> = pairs
        .iter()
        .filter_map(|p| p.gt_rotation.map(|g| rad_to_deg(-g)))
        .collect();
    if rotations.is_empty() {
        println!("wrote {} pairs to {}", pairs.len(), out.display());
    } else {
        let min = rotations.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = rotations.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = rotations.iter().sum::<f64>() / rotations.len() as f64;
        println!(
            "wrote {} pairs to {} (rotation deg: min {:.2}, mean {:.2}, max {:.2})",
            pairs.len(),
            out.display(),
            min,
            mean,
            max
        );
    }
    Ok(EXIT_OK)
}

/// The per-epoch loss log lands next to the checkpoint.
pub fn loss_log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

fn cmd_train(cfg: &Config, dataset: &Path, out: &Path, verbose: bool) -> Result<i32> {
    let all = load_dataset(dataset)?;
    if cfg.holdout >= all.len() && !all.is_empty() {
        return Err(Error::Config(format!(
            "holdout {} does not leave any training pairs out of {}",
            cfg.holdout,
            all.len()
        )));
    }
    let split = all.len() - cfg.holdout.min(all.len());
    let (train_pairs, holdout_pairs) = all.split_at(split);

    let spec = cfg.architecture()?;
    let mut net = OrientationNet::new(spec, cfg.seed)?;

    let log_path = loss_log_path(out);
    let mut log = BufWriter::new(File::create(&log_path)?);
    writeln!(log, "epoch,mean_loss,lr,holdout_err_deg")?;

    let started = Instant::now();
    let train_result = train(
        &mut net,
        train_pairs,
        holdout_pairs,
        &cfg.train_config(),
        |net, row| {
            writeln!(
                log,
                "{},{},{},{}",
                row.epoch, row.mean_loss, row.lr, row.holdout_err_deg
            )?;
            log.flush()?;
            net.save(out)?;
            if verbose {
                eprintln!(
                    "epoch {:>3}: loss {:.6} lr {:.6} holdout {:.2}°",
                    row.epoch, row.mean_loss, row.lr, row.holdout_err_deg
                );
            }
            Ok(())
        },
    );

    match train_result {
        Ok(report) => {
            net.save(out)?;
            eprintln!(
                "trained {} epochs in {:.1}s",
                report.epochs.len(),
                started.elapsed().as_secs_f64()
            );
            println!(
                "trained on {} pairs ({} held out); checkpoint {}; log {}",
                train_pairs.len(),
                holdout_pairs.len(),
                out.display(),
                log_path.display()
            );
            Ok(EXIT_OK)
        }
        Err(e @ Error::Training(_)) => {
            // the checkpoint of the last completed epoch stays on disk
            eprintln!("error: {e}");
            Ok(EXIT_DIVERGED)
        }
        Err(e) => Err(e),
    }
}

fn cmd_detect(cfg: &Config, image: &Path, out: &Path) -> Result<i32> {
    let img = load_image(image)?;
    let kps = detect_keypoints(&img, cfg.max_keypoints);
    write_keypoints(out, &kps)?;
    println!("{} keypoints -> {}", kps.len(), out.display());
    Ok(EXIT_OK)
}

fn cmd_predict(
    cfg: &Config,
    config_given: bool,
    checkpoint: &Path,
    image: &Path,
    keypoints: &Path,
    out: &Path,
) -> Result<i32> {
    let net = OrientationNet::load(checkpoint)?;
    if config_given {
        let expected = cfg.architecture()?;
        if *net.spec() != expected {
            return Err(Error::ArchitectureMismatch(format!(
                "checkpoint {:?} does not match the configured architecture {:?}",
                net.spec(),
                expected
            )));
        }
    }
    let img = load_image(image)?;
    let kps = read_keypoints(keypoints)?;

    let mut w = BufWriter::new(File::create(out)?);
    writeln!(w, "id,x,y,sigma,theta_degrees")?;
    let started = Instant::now();
    let mut written = 0usize;
    let mut skipped = 0usize;
    for (id, kp) in kps.iter().enumerate() {
        let patch = match extract_patch(&img, kp, 0.0, cfg.lambda) {
            Ok(p) => p,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let pred = net.predict_orientation(&patch)?;
        writeln!(
            w,
            "{},{},{},{},{}",
            id,
            kp.x,
            kp.y,
            kp.sigma,
            rad_to_deg(pred.theta)
        )?;
        written += 1;
    }
    w.flush()?;
    let elapsed = started.elapsed().as_secs_f64();
    if skipped > 0 {
        eprintln!("warning: {skipped} keypoints skipped (support leaves the image)");
    }
    let per_point = if written > 0 {
        elapsed * 1e3 / written as f64
    } else {
        0.0
    };
    println!(
        "{} orientations -> {} ({:.3} ms per feature point)",
        written,
        out.display(),
        per_point
    );
    Ok(EXIT_OK)
}

fn cmd_eval(
    cfg: &Config,
    checkpoint: &Path,
    manifest: &Path,
    out_dir: &Path,
    verbose: bool,
) -> Result<i32> {
    let net = OrientationNet::load(checkpoint)?;
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::Ingestion {
        path: manifest.display().to_string(),
        detail: e.to_string(),
    })?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let resolve = |p: &str| {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb
        } else {
            base.join(pb)
        }
    };

    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::IngestionRecord {
                path: manifest.display().to_string(),
                record: lineno,
                detail: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        entries.push((
            resolve(fields[0]),
            resolve(fields[1]),
            resolve(fields[2]),
            fields[3].to_string(),
        ));
    }
    if entries.is_empty() {
        return Err(Error::Ingestion {
            path: manifest.display().to_string(),
            detail: "manifest lists no image pairs".into(),
        });
    }

    std::fs::create_dir_all(out_dir)?;
    let mut report = EvalReport::default();
    for (img_a, img_b, h_path, sequence) in &entries {
        let h = match Homography::read_text(h_path) {
            Ok(h) => h,
            Err(e) => {
                eprintln!("warning: skipping {sequence}: {e}");
                continue;
            }
        };
        let a = Arc::new(load_image(img_a)?);
        let b = Arc::new(load_image(img_b)?);
        match evaluate_methods(&a, &b, &h, Some(&net), &ALL_METHODS, &cfg.eval_params()) {
            Ok(rows) => {
                if verbose {
                    for r in &rows {
                        eprintln!("{sequence} {}: AP {:.4}", r.method.name(), r.ap);
                    }
                }
                report.push(sequence.clone(), rows);
            }
            Err(Error::Usage(msg)) => {
                eprintln!("warning: skipping {sequence}: {msg}");
            }
            Err(e) => return Err(e),
        }
    }

    let per_seq = out_dir.join("sequences.csv");
    let mut w = BufWriter::new(File::create(&per_seq)?);
    writeln!(w, "sequence,method,ap,matches,positives")?;
    for (seq, rows) in &report.sequences {
        for r in rows {
            writeln!(
                w,
                "{},{},{:.6},{},{}",
                seq,
                r.method.name(),
                r.ap,
                r.matches,
                r.positives
            )?;
        }
    }
    w.flush()?;

    let summary = out_dir.join("summary.csv");
    let mut w = BufWriter::new(File::create(&summary)?);
    writeln!(w, "method,mean_ap,avg_rank")?;
    if !report.sequences.is_empty() {
        let ranks = rank_methods(&report)?;
        for (method, rank) in &ranks {
            writeln!(w, "{},{:.6},{:.3}", method.name(), report.mean_ap(*method), rank)?;
            println!(
                "{}: mean AP {:.4}, avg rank {:.2}",
                method.name(),
                report.mean_ap(*method),
                rank
            );
        }
    }
    w.flush()?;
    println!("reports: {} and {}", per_seq.display(), summary.display());
    Ok(EXIT_OK)
}

fn cmd_gradcheck(cfg: &Config) -> Result<i32> {
    // test hook: ORIENT_FAULT=fc_backward corrupts one backward pass so the
    // failure path stays exercised
    let fault = match std::env::var("ORIENT_FAULT").ok().as_deref() {
        Some("fc_backward") => Some(Fault::FcBackward),
        _ => None,
    };
    let report = run_gradcheck(cfg.seed, fault)?;
    print!("{}", report.render());
    if let Some(fail) = report.first_failure() {
        eprintln!(
            "gradient check failed: {} ({:.3e} ≥ {:.0e})",
            fail.component, fail.max_rel_err, fail.threshold
        );
        return Ok(EXIT_GRADCHECK);
    }
    Ok(EXIT_OK)
}
