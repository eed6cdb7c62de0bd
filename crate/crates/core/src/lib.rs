//! Perturbation-based attribution masks learned with concrete dropout.

pub mod autodiff;
pub mod classifier;
pub mod cli;
pub mod dropout;
pub mod error;
pub mod evaluation;
pub mod fido;
pub mod infill;
pub mod kernels;
pub mod objectives;
pub mod optim;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
