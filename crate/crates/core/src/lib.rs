pub mod baselines;
pub mod ekf;
pub mod error;
pub mod experiments;
pub mod gaussian;
mod linalg;
pub mod models;
pub mod nested;

pub use error::{FilterError, Result};
