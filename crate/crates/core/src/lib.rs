//! Flow-matching generation with reward-model guidance: a small, fully
//! deterministic pipeline covering velocity-field training, a preference
//! reward model that scores noisy states, group-relative policy alignment
//! (trajectory-level and step-wise), reward-guided sampling, and the
//! experiment harness that ties them together behind a CLI.

pub mod align;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod harness;
pub mod infer;
pub mod nn;
pub mod params;
pub mod reward;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
