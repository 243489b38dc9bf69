//! Implied-volatility surface calibration with signature-based stochastic
//! volatility models and the second-order Heston expansion.

pub mod asv;
pub mod calibration;
pub mod error;
pub mod experiment;
pub mod features;
pub mod model;
pub mod optim;
pub mod pricing;
pub mod selftest;
pub mod signature;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
