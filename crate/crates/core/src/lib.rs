//! Linear wavelet density estimation laboratory.
//!
//! Builds Daubechies scaling tables, the projection estimator and its exact
//! mean, the integrated squared error with its degenerate U-statistic
//! decomposition, discretised covariance operators with their spectra, and a
//! seeded Monte Carlo harness that checks the resulting limit theory.

pub mod density;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod ise;
pub mod kernel;
pub mod quadrature;
pub mod rng;
pub mod stats;
pub mod tails;
pub mod variance;
pub mod wavelet;

pub use error::{Error, Result};
