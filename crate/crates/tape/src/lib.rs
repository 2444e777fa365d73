//! Reverse-mode automatic differentiation over dense `f64` tensors, specialised
//! for the small convolutional encoder-decoders used by the diffusion prior.
//!
//! Operations are recorded on a [`Graph`] as they execute; [`Graph::backward`]
//! walks the tape in reverse and returns gradients for every leaf that asked
//! for one. Everything runs single-threaded and is bitwise deterministic.

mod adam;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use adam::Adam;
pub use graph::{Bound, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
}
