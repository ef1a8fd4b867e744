//! Differentiable operations recorded on a [`Graph`](crate::graph::Graph).

mod attention;
mod basic;
mod conv;
mod norm;
mod spatial;

pub use conv::{conv2d_out_size, im2col};
pub use spatial::ResizeAxis;
