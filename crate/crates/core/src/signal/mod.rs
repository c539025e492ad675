//! Waveform <-> complex spectrogram front end.

mod stft;
pub mod transform;
pub mod wav;

pub use stft::{istft, stft, IstftOp, Spectrogram, StftConfig, StftOp};
pub use transform::SpecTransform;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("invalid STFT configuration: {0}")]
    Config(String),
    #[error("signal of {len} samples is shorter than the {min}-sample window")]
    TooShort { len: usize, min: usize },
    #[error("signal contains non-finite samples")]
    NonFinite,
    #[error("invalid spectrogram transform: {0}")]
    Transform(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
