//! Finite-element convolution operators, a Jacobi inference network built
//! from them, and inverse estimation of material phases and constants.

pub mod element_kernels;
pub mod error;
pub mod fea_conv;
pub mod fea_net;
pub mod field_image;
pub mod learning;
pub mod reference_solver;

pub use error::{Error, Result};
