//! Cross-dataset collaborative training for dense prediction.
//!
//! A single segmentation network is trained on several datasets at once.
//! Convolutions are shared across datasets while every dataset owns its
//! batch-norm parameters and running statistics ([`dab`]), plus its own
//! classifier head ([`segnet`]). Training alternates over datasets, summing
//! their losses before a single backward pass ([`train`]).

pub mod dab;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod experiment;
pub mod rng;
pub mod segnet;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
