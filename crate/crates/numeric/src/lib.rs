//! Dense tensors, a reverse-mode autodiff tape and seeded random streams.
//!
//! Everything here runs single-threaded; identical seeds and identical op
//! sequences give bit-identical results.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod param;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_params};
pub use graph::{Graph, LeafGrads, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::{RngState, StreamRng};
pub use scalar::{gemm, DType, Scalar};
pub use tensor::Tensor;
