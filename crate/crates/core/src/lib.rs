//! Core of a multi-scale deformable detection transformer for blood-cell
//! microscopy: a small reverse-mode autodiff engine, the residual backbone,
//! the high-level screening feature pyramid, multi-scale deformable attention,
//! the encoder/decoder, bipartite-matched set losses and COCO-style evaluation.
//!
//! The crate is `no_std` + `alloc`. The `std` feature (on by default) only
//! enables runtime CPU feature detection in the matrix kernels.

#![no_std]
#![warn(rust_2018_idioms)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod backbone;
pub mod boxes;
pub mod config;
pub mod data;
pub mod deform_attn;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod hs_fpn;
pub mod linalg;
pub mod loss;
pub mod matching;
pub mod model;
pub mod math;
pub mod neck;
pub mod nn;
pub mod optim;
pub mod ops;
pub mod params;
pub mod position;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;
