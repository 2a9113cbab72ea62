//! Diffeomorphic trainable activation functions built on one-dimensional
//! CPA-based (CPAB) transformations.

pub mod activation;
pub mod cpab;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod nn;
pub mod prior;
pub mod tessellation;

pub use error::{Error, Result};
