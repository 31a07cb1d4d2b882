//! Numerical lab for deep unconstrained feature models.

pub mod construct;
pub mod error;
pub mod hessian;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod reduced;
pub mod report;
pub mod store;
pub mod trainer;

pub use error::{DufmError, Result};
pub use linalg::Matrix;
