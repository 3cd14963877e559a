//! Fair classification through disentangled image representations,
//! attribute re-fusion and subgroup-specific decision thresholds.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod refusion;
pub mod thresholds;
pub mod training;

pub use error::{Error, Result};
