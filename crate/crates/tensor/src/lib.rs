//! Dense tensors with a reverse-mode gradient tape.
//!
//! The operator set covers what the MEG phoneme decoders need: 1-d/2-d
//! convolution, linear maps, group/layer/batch/instance normalization,
//! multi-head self-attention, magnitude STFT and softmax cross-entropy.
//! Named activation taps expose per-layer gradients for saliency analysis.

pub mod error;
pub mod gradcheck;
pub mod init;
pub mod ops;
mod real;
mod tape;
mod taps;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::attention::{multi_head_attention, transformer_encoder, AttentionParams, EncoderLayerParams, EncoderOutput};
pub use ops::conv::{conv1d, conv2d};
pub use ops::loss::softmax_cross_entropy;
pub use ops::matmul::linear;
pub use ops::norm::{
    batch_norm_eval, batch_norm_train, group_norm, instance_norm, layer_norm, norm_layer, BatchStats, NormKind,
    NormParams, NORM_EPS,
};
pub use ops::spectral::{fft_roundtrip, forward_spectrum, inverse_spectrum, stft, stft_shape};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use taps::{TapReading, TapRegistry};
pub use tensor::Tensor;
