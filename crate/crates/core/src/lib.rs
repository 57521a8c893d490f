//! Deep Gaussian processes trained with nested variational compression.

pub mod deep;
pub mod error;
pub mod gradients;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod optimizer;
pub mod parallel;
pub mod psi;
pub mod report;
pub mod sparse;
pub mod testing;

pub use error::{DeepGpError, Result};
