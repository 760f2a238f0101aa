//! Adversarially robust out-of-distribution detection with Lyapunov-stable
//! neural ODE embeddings.

pub mod adgraph;
pub mod checkpoint;
pub mod config;
pub mod datahub;
pub mod error;
pub mod linalg;
pub mod lyapcheck;
pub mod oodforge;
pub mod pipeline;
pub mod pretrain;
pub mod redteam;
pub mod seed;
pub mod stabnet;
pub mod tensor;

pub use error::{ArosError, ErrorCategory, Result};
pub use tensor::Tensor;
