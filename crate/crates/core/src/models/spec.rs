use serde::{Deserialize, Serialize};

use crate::data::{MEG_CHANNELS, WINDOW_SAMPLES};
use crate::error::{Error, Result};
use crate::inventory::N_PHONEMES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    ResnetCnn,
    StftCnn,
    CnnTransformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputNorm {
    None,
    Instance,
}

/// Optional extra normalization after the convolutional backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockNorm {
    None,
    Layer,
    Batch,
    Group,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Arch,
    pub hidden_dim: usize,
    pub input_norm: InputNorm,
    pub block_norm: BlockNorm,
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    pub transformer_ff_mult: usize,
    pub stft_n_fft: usize,
    pub stft_hop: usize,
    pub n_classes: usize,
    pub nonlinearity: Nonlinearity,
    pub in_channels: usize,
    pub n_times: usize,
    /// Convolutional blocks of the CNN backbones, stem included.
    pub n_blocks: usize,
    pub kernel_size: usize,
    pub kernel_size_2d: usize,
    pub group_norm_groups: usize,
    pub bn_momentum: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            arch: Arch::ResnetCnn,
            hidden_dim: 32,
            input_norm: InputNorm::None,
            block_norm: BlockNorm::None,
            transformer_layers: 4,
            transformer_heads: 8,
            transformer_ff_mult: 2,
            stft_n_fft: 25,
            stft_hop: 5,
            n_classes: N_PHONEMES,
            nonlinearity: Nonlinearity::Relu,
            in_channels: MEG_CHANNELS,
            n_times: WINDOW_SAMPLES,
            n_blocks: 5,
            kernel_size: 7,
            kernel_size_2d: 3,
            group_norm_groups: 8,
            bn_momentum: 0.1,
        }
    }
}

/// Front-end blocks of the hybrid model.
pub const TRANSFORMER_FRONT_BLOCKS: usize = 2;

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.hidden_dim == 0 || self.n_classes == 0 || self.in_channels == 0 || self.n_times == 0 {
            return bad("hidden_dim, n_classes, in_channels and n_times must be positive".into());
        }
        if self.group_norm_groups == 0 || self.hidden_dim % self.group_norm_groups != 0 {
            return bad(format!(
                "hidden_dim {} is not divisible into {} norm groups",
                self.hidden_dim, self.group_norm_groups
            ));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size_2d % 2 == 0 {
            return bad("kernel sizes must be odd so padding preserves length".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1]".into());
        }
        match self.arch {
            Arch::ResnetCnn => {
                if self.n_blocks == 0 {
                    return bad("n_blocks must be at least 1".into());
                }
            }
            Arch::StftCnn => {
                if self.n_blocks == 0 {
                    return bad("n_blocks must be at least 1".into());
                }
                if self.stft_hop == 0 || self.stft_n_fft == 0 || self.stft_n_fft > self.n_times {
                    return bad(format!(
                        "stft window {} / hop {} invalid for {} samples",
                        self.stft_n_fft, self.stft_hop, self.n_times
                    ));
                }
            }
            Arch::CnnTransformer => {
                if self.transformer_heads == 0 || self.hidden_dim % self.transformer_heads != 0 {
                    return bad(format!(
                        "hidden_dim {} is not divisible by {} heads",
                        self.hidden_dim, self.transformer_heads
                    ));
                }
                if self.transformer_ff_mult == 0 {
                    return bad("transformer_ff_mult must be positive".into());
                }
            }
        }
        Ok(())
    }

    pub fn conv_blocks(&self) -> usize {
        match self.arch {
            Arch::CnnTransformer => TRANSFORMER_FRONT_BLOCKS,
            _ => self.n_blocks,
        }
    }

    /// `(frames, bins)` of the per-channel spectrogram.
    pub fn stft_frames_bins(&self) -> (usize, usize) {
        (
            (self.n_times - self.stft_n_fft) / self.stft_hop + 1,
            self.stft_n_fft / 2 + 1,
        )
    }

    /// Closed-form number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let (d, c, k) = (self.hidden_dim, self.in_channels, self.n_classes);
        let taps = match self.arch {
            Arch::StftCnn => self.kernel_size_2d * self.kernel_size_2d,
            _ => self.kernel_size,
        };
        let blocks = self.conv_blocks();
        // conv weight + bias + group-norm affine
        let mut n = d * c * taps + 3 * d + (blocks - 1) * (d * d * taps + 3 * d);
        if self.block_norm != BlockNorm::None {
            n += 2 * d;
        }
        if self.arch == Arch::CnnTransformer {
            let f = self.transformer_ff_mult * d;
            let per_layer = 4 * (d * d + d) + 2 * d + (f * d + f) + (d * f + d) + 2 * d;
            n += self.transformer_layers * per_layer;
        }
        n + k * d + k
    }

    /// Tapped sublayers in execution order.
    pub fn tap_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.input_norm == InputNorm::Instance {
            names.push("input_norm".to_string());
        }
        if self.arch == Arch::StftCnn {
            names.push("stft".to_string());
        }
        names.push("stem".to_string());
        for i in 1..self.conv_blocks() {
            names.push(format!("block{i}"));
        }
        if self.block_norm != BlockNorm::None {
            names.push("extra_norm".to_string());
        }
        if self.arch == Arch::CnnTransformer {
            for i in 0..self.transformer_layers {
                names.push(format!("encoder.{i}.attn"));
                names.push(format!("encoder.{i}"));
            }
        }
        names
    }
}
