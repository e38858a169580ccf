//! Progressive spatial RNN intra prediction.
//!
//! The crate bundles a small dense-tensor substrate, the GRU-based PS-RNN
//! predictor with hand-written backward passes, the SATD training loss, an
//! HEVC-style directional baseline, a synthetic data pipeline, and an
//! RDO-lite harness that compares both predictors block by block.

pub mod data;
pub mod error;
pub mod eval;
pub mod intra;
mod kernels;
pub mod layers;
pub mod model;
pub mod rng;
pub mod satd;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
