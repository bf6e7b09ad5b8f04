//! The generator (encoder, TS-Conformers, magnitude and phase decoders) and the
//! metric discriminator.

pub mod conformer;
pub mod discriminator;
pub mod fused;
pub mod generator;
pub mod layers;
pub mod ops;
pub mod params;
pub mod spectral;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use discriminator::Discriminator;
pub use generator::{lsigmoid, mask_decode, Generator, GeneratorOutput};
pub use params::{ParamBuilder, ParamStore};

/// Whether normalisation layers use batch statistics (and update running stats).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Activation producing the compressed magnitude mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskActivation {
    #[default]
    LSigmoid,
    PRelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel width of the encoder, decoders and conformers.
    pub base_channels: usize,
    pub dense_depth: usize,
    pub n_conformers: usize,
    pub compression_c: f64,
    pub lsigmoid_beta: f64,
    pub n_freq: usize,
    pub downsample_stride: usize,
    pub conformer_heads: usize,
    pub ff_mult: usize,
    pub conv_kernel: usize,
    pub mask_activation: MaskActivation,
    /// Reuse the noisy phase instead of the phase decoder output.
    pub disable_phase_decoder: bool,
    /// Set `compression_c` to 1.
    pub disable_mag_compression: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            dense_depth: 4,
            n_conformers: 4,
            compression_c: 0.3,
            lsigmoid_beta: 2.0,
            n_freq: 201,
            downsample_stride: 2,
            conformer_heads: 4,
            ff_mult: 4,
            conv_kernel: 31,
            mask_activation: MaskActivation::LSigmoid,
            disable_phase_decoder: false,
            disable_mag_compression: false,
        }
    }
}

impl ModelConfig {
    /// Compression exponent actually applied, after the ablation switch.
    pub fn effective_c(&self) -> f64 {
        if self.disable_mag_compression {
            1.0
        } else {
            self.compression_c
        }
    }

    /// Time-axis dilation of each dense layer.
    pub fn dilations(&self) -> Vec<usize> {
        (0..self.dense_depth).map(|i| 1 << i).collect()
    }

    /// Frequency bins after the encoder's strided block.
    pub fn reduced_freq(&self) -> usize {
        (self.n_freq - 1) / self.downsample_stride + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("model.{key}: {why}")));
        if !(self.compression_c > 0.0 && self.compression_c <= 1.0) {
            return bad("compression_c", "must lie in (0, 1]");
        }
        if !(self.lsigmoid_beta > 0.0 && self.lsigmoid_beta.is_finite()) {
            return bad("lsigmoid_beta", "must be positive");
        }
        if self.base_channels == 0 {
            return bad("base_channels", "must be at least 1");
        }
        if self.dense_depth == 0 || self.dense_depth > 8 {
            return bad("dense_depth", "must lie in 1..=8");
        }
        if self.n_conformers == 0 {
            return bad("n_conformers", "must be at least 1");
        }
        if self.n_freq < 3 {
            return bad("n_freq", "must be at least 3");
        }
        if self.downsample_stride == 0 || self.downsample_stride > 2 {
            return bad("downsample_stride", "must be 1 or 2");
        }
        if !(self.n_freq - 1).is_multiple_of(self.downsample_stride) {
            return bad("n_freq", "n_freq - 1 must be divisible by downsample_stride");
        }
        if self.conformer_heads == 0 || !self.base_channels.is_multiple_of(self.conformer_heads) {
            return bad("conformer_heads", "must divide base_channels");
        }
        if self.ff_mult == 0 {
            return bad("ff_mult", "must be at least 1");
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad("conv_kernel", "must be odd");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.dilations(), vec![1, 2, 4, 8]);
        assert_eq!(c.reduced_freq(), 101);
    }

    #[test]
    fn invalid_values_name_the_key() {
        let c = ModelConfig {
            compression_c: 1.5,
            ..Default::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("compression_c"), "{msg}");
        let c = ModelConfig {
            conformer_heads: 3,
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("conformer_heads"));
    }

    #[test]
    fn ablation_sets_c_to_one() {
        let c = ModelConfig {
            disable_mag_compression: true,
            ..Default::default()
        };
        assert_eq!(c.effective_c(), 1.0);
    }
}
