use serde::{Deserialize, Serialize};

use crate::error::{CodecError, Result};

/// Hyperparameters of the autoencoder and importance network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Latent channels `c`.
    pub channels: usize,
    /// Quantization bits `b`, 1..=8.
    pub bits: u8,
    /// Spatial stride `s` of the encoder; a power of two.
    pub downsample: usize,
    /// Width of the hidden convolutions.
    pub hidden_channels: usize,
    /// Target average non-zero ratio of the channel mask.
    pub zeta: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig { channels: 8, bits: 8, downsample: 4, hidden_channels: 32, zeta: 0.5 }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels > 15 {
            return Err(CodecError::Config(format!("channels must be in 1..=15, got {}", self.channels)));
        }
        if !(1..=8).contains(&self.bits) {
            return Err(CodecError::Config(format!("bits must be in 1..=8, got {}", self.bits)));
        }
        if self.downsample < 2 || !self.downsample.is_power_of_two() {
            return Err(CodecError::Config(format!("downsample must be a power of two >= 2, got {}", self.downsample)));
        }
        if self.hidden_channels == 0 {
            return Err(CodecError::Config("hidden_channels must be positive".into()));
        }
        if !(self.zeta > 0.0 && self.zeta <= 1.0) {
            return Err(CodecError::Config(format!("zeta must be in (0, 1], got {}", self.zeta)));
        }
        Ok(())
    }

    /// Number of stride-2 stages in the encoder (and upsampling stages in the decoder).
    pub fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    /// Bits used to store one quantized importance value: `ceil(log2(c + 1))`.
    pub fn importance_bits(&self) -> u32 {
        usize::BITS - self.channels.leading_zeros()
    }
}

/// Multi-scale probability model hyperparameters. The number of groups per
/// scale is fixed at three (2x2 phases minus the anchor).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbModelConfig {
    /// Number of downsampled scales `M`.
    pub num_scales: usize,
    /// Logistic mixture components `K`.
    pub mixtures: usize,
    /// Width of the context tensor and of the parameter network.
    pub context_channels: usize,
}

impl Default for ProbModelConfig {
    fn default() -> Self {
        ProbModelConfig { num_scales: 3, mixtures: 5, context_channels: 16 }
    }
}

impl ProbModelConfig {
    pub const GROUPS_PER_SCALE: usize = 3;

    pub fn validate(&self) -> Result<()> {
        if self.num_scales == 0 || self.num_scales > 15 {
            return Err(CodecError::Config(format!("num_scales must be in 1..=15, got {}", self.num_scales)));
        }
        if self.mixtures == 0 {
            return Err(CodecError::Config("mixtures must be positive".into()));
        }
        if self.context_channels == 0 {
            return Err(CodecError::Config("context_channels must be positive".into()));
        }
        Ok(())
    }
}
