//! Forward-only training of orthogonal networks.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod linalg;
pub mod rules;
pub mod scalar;

pub use error::{CheckpointError, DataError, Error, Result};
pub use scalar::{Precision, Real};
