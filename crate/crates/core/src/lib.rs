//! Dual-pooling attention classifier for synthetic mammography-like
//! images, with the autodiff engine, training loop, evaluation metrics and
//! interpretability tools it needs.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod interpret;
pub mod layers;
pub mod losses;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
