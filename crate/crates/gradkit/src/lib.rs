//! Minimal dense tensors with a recorded forward pass and reverse-mode
//! gradient accumulation.
//!
//! A [`Graph`] records every operation applied to its nodes. Learnable
//! arrays live in a [`ParamStore`] outside the graph and are referenced by
//! [`ParamId`], so a single store can back many short-lived graphs (one per
//! training example, possibly on different threads). Calling
//! [`Graph::backward`] on a scalar node yields [`Gradients`] for every
//! parameter and every gradient-requiring leaf.
//!
//! Everything is generic over [`Scalar`], which is implemented for `f32`
//! (training) and `f64` (gradient checking).

mod backward;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod params;
mod scalar;
mod tensor;

pub use backward::{Gradients, ParamGrad};
pub use error::{GradError, Result};
pub use graph::{Graph, MaxPooled, SoftmaxAxis, Var};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
