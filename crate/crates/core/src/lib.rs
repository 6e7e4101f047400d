//! Neighborhood contrastive change captioning.

pub mod config;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scene;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
