//! Autoregressive video-action world model for a synthetic driving world.
//!
//! Video and action chunks share one small diffusion transformer trained with
//! a joint rectified-flow objective. Each chunk is conditioned on its own
//! symbolic guidance, and long rollouts run under a bounded, modality-aware
//! KV memory scored by relevance and redundancy.

pub mod error;
pub mod flow;
pub mod guidance;
pub mod harness;
pub mod mask;
pub mod model;
pub mod rng;
pub mod rollout;
pub mod sim;
pub mod tensor;
pub mod tokenize;

pub use error::{Result, WamError};
pub use rng::{RngState, RngStream};
pub use tensor::{Graph, Tensor, Var};
