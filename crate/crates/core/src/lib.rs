//! Neuron coverage-guided domain generalization.
//!
//! A small training toolkit: a tape autodiff engine that supports
//! differentiating through gradients, a digits ConvNet, the bootstrapped
//! neuron-coverage loss, the gradient-similarity regularizer, and the
//! training loop that combines them.

pub mod autodiff;
pub mod config;
pub mod coverage;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod run;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
