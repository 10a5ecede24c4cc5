//! Multi-task speech/text translation with scheduled sampling, cross-modal
//! consistency regularization and gap-weighted token losses, plus the
//! modality-gap diagnostics used to study them.
//!
//! Everything runs on a small reverse-mode autodiff tape in 64-bit floats
//! over a synthetic speech/transcription/translation task.

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod decoding;
pub mod error;
pub mod experiment;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use data::{Example, Triplet, Vocabulary};
pub use error::{Error, Result};
pub use model::{DecoderTrace, ModelConfig, SpeechFeatures, TokenSeq, TranslationModel};
pub use tensor::Tensor;
