//! ConvNet workbench core: a from-scratch convolutional network engine, the
//! rules for building models out of conv, pool and dense layers, data loading,
//! training with early stopping, cross-validated AUC evaluation, and
//! activation-map export.

pub mod activations;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod engine;
pub mod evaluation;
pub mod modelspec;
pub mod rng;
pub mod tensor;
pub mod training;

pub use tensor::{Tensor, TensorError};
