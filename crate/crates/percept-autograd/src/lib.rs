//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Built for models small enough to train on a single CPU core while staying
//! numerically transparent: all math is 64-bit, reductions use fixed
//! summation order, and attention masks use exact `-inf` so masked positions
//! contribute exactly zero.
//!
//! The pieces:
//! - [`Tensor`]: row-major matrix, the only value type;
//! - [`Graph`]: eagerly evaluated tape with [`Graph::backward`];
//! - [`ParamStore`] / [`ParamId`]: named, ordered parameter registry;
//! - [`AdamW`]: decoupled-weight-decay optimizer with global-norm clipping;
//! - [`fdcheck`]: finite-difference helpers for gradient verification.

pub mod fdcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Graph, NodeId};
pub use optim::AdamW;
pub use params::{ParamError, ParamId, ParamStore};
pub use tensor::Tensor;
