use alloc::format;
use core::fmt;
use core::str::FromStr;

use crate::error::{Result, TensorError};

/// Where the phone stream enters the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    /// Acoustic-only baseline; no phone encoder at all.
    #[default]
    None,
    /// Acoustic memory attends over the phone encoder output.
    Encoder,
    /// Each decoder block gets an extra attention over the phone encoder output.
    Decoder,
    Both,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::None,
        FusionMode::Encoder,
        FusionMode::Decoder,
        FusionMode::Both,
    ];

    pub fn uses_phones(self) -> bool {
        self != FusionMode::None
    }

    pub fn fuses_encoder(self) -> bool {
        matches!(self, FusionMode::Encoder | FusionMode::Both)
    }

    pub fn fuses_decoder(self) -> bool {
        matches!(self, FusionMode::Decoder | FusionMode::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::Encoder => "encoder",
            FusionMode::Decoder => "decoder",
            FusionMode::Both => "both",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionMode::None),
            "encoder" => Ok(FusionMode::Encoder),
            "decoder" => Ok(FusionMode::Decoder),
            "both" => Ok(FusionMode::Both),
            other => Err(TensorError::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

/// Network hyperparameters. [`Default`] gives the full-size setting:
/// 256-dim, 4 heads, 2048 feed-forward, 12 acoustic / 6 phone / 6 decoder
/// layers, 83-dim input features.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub acoustic_layers: usize,
    pub phone_layers: usize,
    pub decoder_layers: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub fusion_mode: FusionMode,
    pub acoustic_feature_dim: usize,
    pub phone_vocab: usize,
    pub target_vocab: usize,
    pub subsample_factor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            heads: 4,
            ffn_dim: 2048,
            acoustic_layers: 12,
            phone_layers: 6,
            decoder_layers: 6,
            conv_kernel: 15,
            dropout: 0.3,
            label_smoothing: 0.3,
            fusion_mode: FusionMode::Both,
            acoustic_feature_dim: 83,
            phone_vocab: 1000,
            target_vocab: 1000,
            subsample_factor: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: alloc::string::String| Err(TensorError::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return err(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.conv_kernel % 2 == 0 {
            return err(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if !self.subsample_factor.is_power_of_two() {
            return err(format!(
                "subsample_factor {} must be a power of two",
                self.subsample_factor
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return err(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            ));
        }
        if self.ffn_dim == 0 || self.acoustic_feature_dim == 0 {
            return err("ffn_dim and acoustic_feature_dim must be positive".into());
        }
        if self.target_vocab < 5 {
            return err(format!("target_vocab {} too small", self.target_vocab));
        }
        if self.fusion_mode.uses_phones() && self.phone_vocab < 5 {
            return err(format!("phone_vocab {} too small", self.phone_vocab));
        }
        Ok(())
    }

    /// Acoustic memory length for `frames` input frames.
    pub fn subsampled_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.subsample_factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!((c.d_model, c.heads, c.ffn_dim), (256, 4, 2048));
        assert_eq!((c.acoustic_layers, c.phone_layers, c.decoder_layers), (12, 6, 6));
        assert_eq!(c.acoustic_feature_dim, 83);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut c = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        c.heads = 4;
        c.conv_kernel = 4;
        assert!(c.validate().is_err());
        c.conv_kernel = 15;
        c.subsample_factor = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn fusion_mode_parses() {
        for m in FusionMode::ALL {
            assert_eq!(m.as_str().parse::<FusionMode>().unwrap(), m);
        }
        assert!("gate".parse::<FusionMode>().is_err());
    }
}
