//! Differentiable array core.
//!
//! Layout is NCHW, row-major. A [`Graph`] records one forward pass as a tape;
//! [`Graph::backward`] walks it in reverse and returns gradients for every
//! node that requires one. Parameters live in a [`ParamStore`] and enter a
//! graph as leaves tagged with their [`ParamId`], so the same store can back
//! many graphs (one per thread during batched inference).

mod adam;
mod graph;
pub mod kernels;
mod precision;
mod tensor;

pub use adam::{collect_param_grads, collect_scope_grads, AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Var};
pub use precision::{cast_precision, round_to_f16};
pub use tensor::{DType, ParamId, ParamStore, Tensor};
