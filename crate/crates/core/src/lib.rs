//! Masked multimodal encoder with Mamba bottleneck blocks, built on a small reverse-mode tensor library.

pub mod audit;
pub mod error;
pub mod harness;
pub mod losses;
pub mod masking;
pub mod model;
pub mod nn;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Precision, Real, Rng, Tensor, Var};
