//! Semantic-conditioned batch normalization and Siamese contrastive training
//! for stacked text-to-image GANs, built on a small reverse-mode autodiff tape.
//!
//! The crate is `no_std` + `alloc`; file formats, the command line and image
//! encoding live in the companion `sdgan` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod gan;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod norm;
mod kernels;
pub mod tensor;
pub mod synth;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use gradcheck::{evaluate, grad_check, grad_check_with, CheckStatus, GradCheck, GradCheckReport, Probe};
pub use graph::{Binary, Graph, OpKind, Unary, Var, LEAKY_SLOPE};
pub use kernels::ConvGeometry;
pub use tensor::Tensor;
