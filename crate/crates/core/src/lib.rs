//! Sequential, residual and multipath graph convolutional networks built on
//! a small reverse-mode differentiation tape, with the data loaders and
//! benchmark harness used to compare them on node classification.

pub mod autodiff;
pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
