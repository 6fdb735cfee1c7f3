use std::path::{Path, PathBuf};

use crate::network::ModelConfig;
use crate::{Error, Result};

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Side of the square random crops.
    pub crop: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Global gradient norm bound.
    pub clip: f64,
    /// Learning-rate factor applied every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
    pub seed: u64,
    /// Train on range-truncated likelihoods.
    pub constraints: bool,
    pub flip: bool,
    /// Worker threads; 0 uses the global pool.
    pub threads: usize,
    /// Log every this many optimizer steps; 0 logs epochs only.
    pub log_every: usize,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            crop: 64,
            batch: 8,
            epochs: 10,
            lr: 1e-4,
            clip: 0.5,
            decay: 0.75,
            decay_every: 5,
            seed: 0,
            constraints: false,
            flip: true,
            threads: 0,
            log_every: 0,
            checkpoint: None,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    /// Named schedules: `desk` (the default), `imagenet64` and `openimages`.
    pub fn preset(name: &str) -> Result<Self> {
        let base = TrainConfig::default();
        match name {
            "desk" => Ok(base),
            "imagenet64" => Ok(TrainConfig {
                crop: 64,
                batch: 32,
                epochs: 10,
                decay_every: 1,
                ..base
            }),
            "openimages" => Ok(TrainConfig {
                crop: 128,
                batch: 32,
                epochs: 50,
                decay_every: 5,
                ..base
            }),
            _ => Err(Error::Config(format!("unknown preset {name:?}"))),
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. A `preset` line
    /// replaces everything set before it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "on" | "1" | "yes" => Ok(true),
                "false" | "off" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("bad value {v:?} for {key}"))),
            }
        }
        match key {
            "preset" => *self = Self::preset(value)?,
            "levels" => self.model.levels = num(key, value)?,
            "hidden" => self.model.hidden = num(key, value)?,
            "res_blocks" => self.model.res_blocks = num(key, value)?,
            "mixtures" => self.model.mixtures = num(key, value)?,
            "factorized" => self.model.factorized = flag(key, value)?,
            "crop" => self.crop = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "clip" => self.clip = num(key, value)?,
            "decay" => self.decay = num(key, value)?,
            "decay_every" => self.decay_every = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "constraints" => self.constraints = flag(key, value)?,
            "flip" => self.flip = flag(key, value)?,
            "threads" => self.threads = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.crop == 0 || self.batch == 0 {
            return Err(Error::Config("crop and batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.clip > 0.0) || !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config("clip must be positive and decay in (0, 1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_overrides_and_presets() {
        let cfg = TrainConfig::parse(
            "# run\npreset = openimages\nhidden = 16\nfactorized = off\nlr=2e-3  # faster\n",
        )
        .unwrap();
        assert_eq!(cfg.crop, 128);
        assert_eq!(cfg.decay_every, 5);
        assert_eq!(cfg.model.hidden, 16);
        assert!(!cfg.model.factorized);
        assert_eq!(cfg.lr, 2e-3);
        assert_eq!(TrainConfig::preset("imagenet64").unwrap().decay_every, 1);
    }

    #[test]
    fn parse_errors() {
        assert!(TrainConfig::parse("nonsense").is_err());
        assert!(TrainConfig::parse("speed = 3").is_err());
        assert!(TrainConfig::parse("batch = -1").is_err());
        assert!(TrainConfig::parse("lr = 0").is_err());
        assert!(TrainConfig::parse("preset = cifar").is_err());
    }
}
