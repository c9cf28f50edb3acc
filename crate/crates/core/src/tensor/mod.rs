//! Minimal dense-tensor autodiff engine.
//!
//! A [`Graph`] records primitive applications in execution order (already a
//! topological order); [`Graph::backward`] replays the tape once in reverse,
//! accumulating exact gradients. Training code builds a fresh graph per step
//! with parameters bound as leaves via [`BoundParams`].

pub mod array;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod optim;

pub use array::{ArrayD, Element, Real};
pub use graph::{Graph, Tensor, TensorError, TensorResult};
pub use ops::NORM_EPS;
pub use optim::{Adam, BoundParams, Param, ParamSet};
