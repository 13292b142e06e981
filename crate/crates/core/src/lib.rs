//! Data-free merging of fine-tuned checkpoints by adaptive projective
//! gradient descent, with task-arithmetic baselines and a synthetic
//! least-squares harness for measuring per-task loss gaps.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod merge;
pub mod objective;
pub mod subspace;
pub mod synth;
pub mod taskvec;

pub use error::{MergeError, Result};
