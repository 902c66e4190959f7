//! Straight variational flow matching on low-dimensional synthetic data.
//!
//! The crate trains flow-matching velocity fields (plain, variational, and
//! variational with a straightness penalty, plus one reflow round), samples
//! them with fixed-step ODE solvers, and measures how straight the learned
//! transport is against closed-form Gaussian-mixture oracles.

pub mod cli;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod oracle;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
