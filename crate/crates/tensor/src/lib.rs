//! Dense double-precision tensors and a tape-based reverse-mode
//! differentiation engine.
//!
//! Values live in a [`Graph`]; every operation appends a node and returns a
//! [`Var`] handle. Calling [`Graph::backward`] on a scalar node walks the tape
//! in reverse insertion order, which is a valid topological order because a
//! node can only reference nodes created before it.
//!
//! Model parameters are kept outside the graph in a [`ParamSet`] and bound
//! into a fresh graph for every step with [`Graph::bind`].

mod error;
pub mod gradcheck;
mod graph;
pub mod optim;
mod params;
mod tensor;

pub use error::TensorError;
pub use graph::{Graph, Var};
pub use optim::{clip_grad_norm, cosine_schedule, AdamState, AdamW};
pub use params::{Param, ParamId, ParamSet};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, TensorError>;
