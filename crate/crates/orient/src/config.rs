//! Plain-text configuration: `key = value` lines under `[section]` headers.
//! Unknown sections or keys are rejected; `dump()` emits the canonical form,
//! and dump → parse → dump is byte-identical.

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{Activation, ArchitectureSpec};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // [architecture]
    pub activation: String,
    pub s: usize,
    pub m: usize,
    pub fc1_units: usize,
    pub dropout: f64,
    // [training]
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub halve_every: usize,
    pub seed: u64,
    pub atan2_eps: f64,
    pub holdout: usize,
    // [data]
    pub lambda: f64,
    pub dist_thresh: f64,
    pub max_rotation: f64,
    pub pairs: usize,
    pub scale_jitter: f64,
    pub intensity_jitter: f64,
    pub max_keypoints: usize,
    // [paths]
    pub out_dir: String,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            activation: "ghh".into(),
            s: 4,
            m: 4,
            fc1_units: 100,
            dropout: 0.3,
            epochs: 100,
            batch: 10,
            lr: 1e-3,
            halve_every: 10,
            seed: 1,
            atan2_eps: 1e-8,
            holdout: 0,
            lambda: 7.5,
            dist_thresh: 2.5,
            max_rotation: 45.0,
            pairs: 500,
            scale_jitter: 0.05,
            intensity_jitter: 0.1,
            max_keypoints: 1000,
            out_dir: ".".into(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Ingestion {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Config::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                if !["architecture", "training", "data", "paths"].contains(&section.as_str()) {
                    return Err(Error::Config(format!(
                        "line {}: unknown section [{section}]",
                        lineno + 1
                    )));
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key = value, got {line:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            cfg.set(&section, key, value).map_err(|e| {
                Error::Config(format!("line {}: {e}", lineno + 1))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse::<T>().map_err(|_| {
                Error::Config(format!("bad value {value:?} for key {key}"))
            })
        }
        match (section, key) {
            ("architecture", "activation") => {
                if !["ghh", "relu", "tanh", "maxout", "prelu"].contains(&value) {
                    return Err(Error::Config(format!("unknown activation {value:?}")));
                }
                self.activation = value.to_string();
            }
            ("architecture", "s") => self.s = num(key, value)?,
            ("architecture", "m") => self.m = num(key, value)?,
            ("architecture", "fc1_units") => self.fc1_units = num(key, value)?,
            ("architecture", "dropout") => self.dropout = num(key, value)?,
            ("training", "epochs") => self.epochs = num(key, value)?,
            ("training", "batch") => self.batch = num(key, value)?,
            ("training", "lr") => self.lr = num(key, value)?,
            ("training", "halve_every") => self.halve_every = num(key, value)?,
            ("training", "seed") => self.seed = num(key, value)?,
            ("training", "atan2_eps") => self.atan2_eps = num(key, value)?,
            ("training", "holdout") => self.holdout = num(key, value)?,
            ("data", "lambda") => self.lambda = num(key, value)?,
            ("data", "dist_thresh") => self.dist_thresh = num(key, value)?,
            ("data", "max_rotation") => self.max_rotation = num(key, value)?,
            ("data", "pairs") => self.pairs = num(key, value)?,
            ("data", "scale_jitter") => self.scale_jitter = num(key, value)?,
            ("data", "intensity_jitter") => self.intensity_jitter = num(key, value)?,
            ("data", "max_keypoints") => self.max_keypoints = num(key, value)?,
            ("paths", "out_dir") => self.out_dir = value.to_string(),
            _ => {
                return Err(Error::Config(format!(
                    "unknown key {key:?} in section [{section}]"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture()?.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be ≥ 1".into()));
        }
        if self.lr <= 0.0 || self.atan2_eps <= 0.0 {
            return Err(Error::Config("lr and atan2_eps must be > 0".into()));
        }
        if self.lambda <= 0.0 || self.dist_thresh <= 0.0 {
            return Err(Error::Config("lambda and dist_thresh must be > 0".into()));
        }
        Ok(())
    }

    /// Canonical text form; fixed section and key order.
    pub fn dump(&self) -> String {
        format!(
            "[architecture]\n\
             activation = {}\n\
             s = {}\n\
             m = {}\n\
             fc1_units = {}\n\
             dropout = {}\n\
             \n\
             [training]\n\
             epochs = {}\n\
             batch = {}\n\
             lr = {}\n\
             halve_every = {}\n\
             seed = {}\n\
             atan2_eps = {}\n\
             holdout = {}\n\
             \n\
             [data]\n\
             lambda = {}\n\
             dist_thresh = {}\n\
             max_rotation = {}\n\
             pairs = {}\n\
             scale_jitter = {}\n\
             intensity_jitter = {}\n\
             max_keypoints = {}\n\
             \n\
             [paths]\n\
             out_dir = {}\n",
            self.activation,
            self.s,
            self.m,
            self.fc1_units,
            self.dropout,
            self.epochs,
            self.batch,
            self.lr,
            self.halve_every,
            self.seed,
            self.atan2_eps,
            self.holdout,
            self.lambda,
            self.dist_thresh,
            self.max_rotation,
            self.pairs,
            self.scale_jitter,
            self.intensity_jitter,
            self.max_keypoints,
            self.out_dir,
        )
    }

    pub fn activation_kind(&self) -> Activation {
        match self.activation.as_str() {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "maxout" => Activation::Maxout { m: self.m },
            "prelu" => Activation::Prelu,
            _ => Activation::Ghh { s: self.s, m: self.m },
        }
    }

    pub fn architecture(&self) -> Result<ArchitectureSpec> {
        let mut spec = ArchitectureSpec::standard(self.activation_kind());
        spec.fc1_units = self.fc1_units;
        spec.dropout_rate = self.dropout;
        Ok(spec)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            halve_every: self.halve_every,
            seed: self.seed,
            atan2_eps: self.atan2_eps,
        }
    }

    pub fn synth_params(&self) -> crate::data::SynthParams {
        crate::data::SynthParams {
            lambda: self.lambda,
            max_rotation_deg: self.max_rotation,
            scale_jitter: self.scale_jitter,
            intensity_jitter: self.intensity_jitter,
            max_keypoints: self.max_keypoints,
        }
    }

    pub fn eval_params(&self) -> crate::eval::EvalParams {
        crate::eval::EvalParams {
            max_keypoints: self.max_keypoints,
            lambda: self.lambda,
            dist_thresh: self.dist_thresh,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let text = cfg.dump();
        let parsed = Config::parse(&text).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.dump(), text);
    }

    #[test]
    fn unknown_keys_and_sections_rejected() {
        assert!(Config::parse("[architecture]\nwat = 3\n").is_err());
        assert!(Config::parse("[nonsense]\n").is_err());
        assert!(Config::parse("loose = 1\n").is_err());
        assert!(Config::parse("[training]\nepochs = banana\n").is_err());
    }

    #[test]
    fn overrides_apply_and_revalidate() {
        let cfg = Config::parse(
            "[architecture]\nactivation = maxout\nm = 4\nfc1_units = 400\n\n[training]\nepochs = 5\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.activation_kind(), Activation::Maxout { m: 4 });
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.seed, 9);
        // everything else at defaults
        assert_eq!(cfg.batch, 10);

        // floats round-trip through the canonical form
        let cfg2 = Config::parse("[training]\nlr = 0.0005\natan2_eps = 0.00000001\n").unwrap();
        let dumped = Config::parse(&cfg2.dump()).unwrap();
        assert_eq!(cfg2, dumped);
    }

    #[test]
    fn comments_and_blank_lines_are_fine() {
        let cfg = Config::parse("# top\n\n[data]\n# of pairs\npairs = 7\n").unwrap();
        assert_eq!(cfg.pairs, 7);
    }
}
