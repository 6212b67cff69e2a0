//! Survey estimation of mean curves under unequal-probability designs, with
//! Horvitz-Thompson covariance surfaces and simultaneous confidence bands.

pub mod bands;
pub mod designs;
pub mod error;
pub mod estimators;
pub mod montecarlo;
pub mod population;
pub mod rng;
pub mod util;

pub use error::{Error, ErrorCategory, Result};
