//! Adaptive graph convolution vision backbone: a reverse-mode autodiff tape over
//! NCHW tensors, the AGC and attention mixers, the full model, and graph
//! analysis of the aggregation scaffold.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod agc;
pub mod attention;
pub mod data;
pub mod dd;
pub mod error;
pub mod fd;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod model;
pub mod nn;
pub mod spectral;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
