//! Negative-control-outcome debiased estimation of the average treatment
//! effect on the treated from matched observational data.

pub mod balance;
pub mod cli;
pub mod dataset;
pub mod dgp;
pub mod error;
pub mod estimators;
mod float;
pub mod inference;
pub mod matcher;

pub use error::{Error, Result};
