//! Variational source-channel coding for image transmission over AWGN.
//!
//! The crate holds the numerics: tensors and a small layer engine with manual
//! backward passes, the channel model, the loss family, data loading, the
//! training loop and the evaluator. The command-line harness lives in a
//! separate crate.

pub mod channel;
pub mod coding;
pub mod datapipe;
pub mod error;
pub mod evaluator;
pub mod fingerprint;
pub mod network;
pub mod serde_ext;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
