//! Parameter-efficient adaptation of a frozen sequence-to-spectrogram model,
//! regularized by optimal-transport distances between latent features.

pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod format;
pub mod nn;
pub mod optim;
pub mod ot;
pub mod pel;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
