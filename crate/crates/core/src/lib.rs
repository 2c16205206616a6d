//! Self-supervised any-point tracking by global matching and contrastive
//! random walks.

pub mod augment;
pub mod backbone;
pub mod clip;
pub mod config;
pub mod data;
pub mod error;
pub mod grid;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod params;
pub mod resample;
pub mod tracker;
pub mod trackio;
pub mod train;

pub use error::{Error, Result};
