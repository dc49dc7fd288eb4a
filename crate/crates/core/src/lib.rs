//! Distance-aware self-attention for multiple instance learning.

pub mod attention;
pub mod autodiff;
pub mod dataset;
pub mod model;
pub mod error;
pub mod metrics;
pub mod train;

pub use error::{Error, Result};
