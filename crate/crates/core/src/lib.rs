//! Sparse identification of delay integro-differential and renewal equations
//! from time series, with quadrature-weighted libraries and swarm search over
//! delay windows and non-multiplicative kernel parameters.

pub mod dataset;
pub mod error;
pub mod identify;
pub mod library;
pub mod optimize;
pub mod presets;
pub mod quadrature;
pub mod regression;
pub mod simulate;

pub use error::{Error, Result};
