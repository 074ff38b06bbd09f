pub mod assembly;
pub mod coeff;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod kernel;
pub mod linsolve;
pub mod problems;
pub mod quadrature;

pub use error::{Error, Result};
