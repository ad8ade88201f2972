//! Emerging-barrier model-based diffusion (EB-MBD) and baselines.

pub mod analysis;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod problem;
pub mod projection;
pub mod schedule;

pub use error::{Error, Result};
