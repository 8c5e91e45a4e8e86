use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

fn d_lr() -> f64 {
    1e-4
}
fn d_epochs() -> usize {
    30
}
fn d_batch() -> usize {
    8
}
fn d_momentum() -> f64 {
    0.99
}
fn d_folds() -> usize {
    5
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_true() -> bool {
    true
}

/// Optimization settings. Every field but `seed` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// Slides per optimizer step.
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_momentum")]
    pub ema_momentum: f64,
    #[serde(default = "d_folds")]
    pub folds: usize,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    /// Decoupled weight decay on weight matrices.
    #[serde(default)]
    pub weight_decay: f64,
    /// Weight the loss by inverse class frequency.
    #[serde(default = "d_true")]
    pub class_weighting: bool,
    /// Fit ensemble weights on out-of-fold predictions instead of using
    /// uniform weights.
    #[serde(default)]
    pub fit_ensemble_weights: bool,
    #[serde(default)]
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            learning_rate: d_lr(),
            epochs: d_epochs(),
            batch_size: d_batch(),
            ema_momentum: d_momentum(),
            folds: d_folds(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            weight_decay: 0.0,
            class_weighting: true,
            fit_ensemble_weights: false,
            model: ModelConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad(format!("ema_momentum must lie in [0, 1], got {}", self.ema_momentum));
        }
        if self.folds < 2 {
            return bad(format!("folds must be >= 2, got {}", self.folds));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("Adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        self.model.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(TrainConfig::from_toml("epochs = 3"), Err(Error::Config(_))));
        let c = TrainConfig::from_toml("seed = 7\nepochs = 3\n[model]\nwidth = 16").unwrap();
        assert_eq!((c.seed, c.epochs, c.batch_size, c.model.width, c.model.attn_hidden), (7, 3, 8, 16, 256));
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(TrainConfig::from_toml("seed = 1\nlearning_rte = 0.1").is_err());
        assert!(TrainConfig::from_toml("seed = 1\nema_momentum = 1.5").is_err());
        assert!(TrainConfig::from_toml("seed = 1\nfolds = 1").is_err());
    }
}
