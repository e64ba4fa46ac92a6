//! Adversarial robustness toolkit for point-cloud classifiers.

pub mod attack;
pub mod autodiff;
pub mod bench;
pub mod cloud;
pub mod defense;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod seed;

pub use error::{Error, Result};
