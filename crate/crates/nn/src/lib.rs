//! A small define-by-run autodiff engine for convolutional networks.
//!
//! Everything runs single-threaded in `f64`, so results are bitwise
//! reproducible and finite-difference gradient checks are meaningful.

mod gemm;
pub mod graph;
pub mod io;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{clamp_prob, sigmoid, softmax_rows, Gradients, Graph, Var, PROB_CLAMP};
pub use optim::{Adam, AdamConfig};
pub use params::{Bind, Conv2d, GaussianInit, Linear, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("malformed tensor data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
