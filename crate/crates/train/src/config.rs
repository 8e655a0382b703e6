//! Loss weights, optimizer settings and the TOML session file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

/// Weights of the rate-distortion objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Negative MS-SSIM.
    pub lambda_d1: f64,
    /// MSE.
    pub lambda_d2: f64,
    /// Perceptual feature distance; only used with a plugged extractor.
    pub lambda_d3: f64,
    /// Rate in bits per pixel.
    pub lambda_r: f64,
    /// Importance constraint `|mean(tau) - zeta|`.
    pub lambda_m: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_d1: 1.0, lambda_d2: 10.0, lambda_d3: 0.0, lambda_r: 0.1, lambda_m: 1.0 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights { lambda_d1: 0.0, lambda_d2: 0.0, lambda_d3: 0.0, lambda_r: 0.0, lambda_m: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_d1, self.lambda_d2, self.lambda_d3, self.lambda_r, self.lambda_m];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(TrainError::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }

    /// Rate weight multiplied by `f`.
    pub fn with_rate_scaled(mut self, f: f64) -> Self {
        self.lambda_r *= f;
        self
    }

    /// Both pixel distortion weights multiplied by `f`.
    pub fn with_distortion_scaled(mut self, f: f64) -> Self {
        self.lambda_d1 *= f;
        self.lambda_d2 *= f;
        self
    }

    /// Distortion terms only (rate and importance weights zeroed).
    pub fn distortion_only(mut self) -> Self {
        self.lambda_r = 0.0;
        self.lambda_m = 0.0;
        self
    }
}

/// Meta fine-tuning hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    /// Inner latent-overfitting steps `n`.
    pub inner_iters: usize,
    /// Inner step size `alpha`.
    pub inner_lr: f64,
    /// Outer Adam learning rate `beta`. Zero is accepted and leaves the
    /// networks untouched.
    pub outer_lr: f64,
    /// Differentiate through the inner gradients.
    pub second_order: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_iters: 4,
            inner_lr: 0.1,
            outer_lr: 1e-4,
            second_order: true,
            batch_size: 12,
            epochs: 5,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_iters == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("inner_iters and batch_size must be positive".into()));
        }
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) || !(self.outer_lr >= 0.0 && self.outer_lr.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rates must be finite with inner_lr > 0 and outer_lr >= 0, got {} and {}",
                self.inner_lr, self.outer_lr
            )));
        }
        Ok(())
    }
}

/// Stage-1 training settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub patch_size: usize,
    /// Step between patch origins when tiling the training images.
    pub patch_stride: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { patch_size: 32, patch_stride: 32, batch_size: 12, epochs: 50, lr: 2e-3, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_stride == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("patch_size, patch_stride and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Decoder-bias overfitting and clustering settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasConfig {
    pub iters: usize,
    pub lr: f64,
    /// Number of clusters; at most 255.
    pub clusters: usize,
    pub kmeans_seed: u64,
    pub kmeans_max_iter: usize,
}

impl Default for BiasConfig {
    fn default() -> Self {
        BiasConfig { iters: 50, lr: 1e-2, clusters: 255, kmeans_seed: 0, kmeans_max_iter: 100 }
    }
}

impl BiasConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.clusters > 255 {
            return Err(TrainError::Config(format!("clusters must be in 1..=255, got {}", self.clusters)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("bias lr must be finite and non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Human-editable session file; every section and key is optional.
///
/// ```toml
/// [weights]
/// lambda_r = 0.05
///
/// [train]
/// epochs = 20
///
/// [meta]
/// second_order = false
/// ```
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub meta: MetaConfig,
    pub bias: BiasConfig,
}

impl SessionConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SessionConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain structs serialize")
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.train.validate()?;
        self.meta.validate()?;
        self.bias.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = SessionConfig::from_toml("[weights]\nlambda_r = 0.5\n[meta]\nsecond_order = false\n").unwrap();
        assert_eq!(cfg.weights.lambda_r, 0.5);
        assert_eq!(cfg.weights.lambda_d2, 10.0);
        assert!(!cfg.meta.second_order);
        assert_eq!(SessionConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(SessionConfig::from_toml("[weights]\nlambda_r = -1.0\n").is_err());
        assert!(SessionConfig::from_toml("[nope]\n").is_err());
    }

    #[test]
    fn defaults() {
        let m = MetaConfig::default();
        assert_eq!((m.inner_iters, m.inner_lr, m.outer_lr, m.second_order, m.batch_size), (4, 0.1, 1e-4, true, 12));
        let w = LossWeights::default();
        assert_eq!((w.lambda_d1, w.lambda_d2, w.lambda_d3, w.lambda_m), (1.0, 10.0, 0.0, 1.0));
        let b = BiasConfig::default();
        assert_eq!((b.iters, b.lr, b.clusters), (50, 1e-2, 255));
    }
}
