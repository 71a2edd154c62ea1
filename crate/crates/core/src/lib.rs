//! Dual-path filter network (DPFN) for speaker-conditioned speech separation.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod param;
pub mod pipeline;
pub mod separation;
pub mod signal;
pub mod speaker;
pub mod tensor;
pub mod training;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use param::{ParamId, ParamStore};
pub use tensor::Tensor;
