//! Reverse-mode differentiation over [`Tensor`](crate::tensor::Tensor) values.
//!
//! A [`Graph`] records every operation of one forward pass; calling
//! [`Graph::backward`] on a scalar node returns [`Gradients`] for every leaf.
//! Model-specific fused operations (part assignment, region pooling, the
//! occurrence loss) implement [`Function`] in their own modules.

mod conv;
mod gradcheck;
mod graph;
pub(crate) mod linalg;
mod ops;

pub use conv::{conv2d, Padding};
pub use gradcheck::{grad_check, GradReport};
pub use graph::{Function, Gradients, Graph, Var};
pub use ops::{softmax_axis, BatchStats, NormMode};
pub(crate) use ops::sigmoid;
