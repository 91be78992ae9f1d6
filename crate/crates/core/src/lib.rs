pub mod data;
pub mod error;
pub mod face;
pub mod inference;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod quantizer;
pub mod ret;
pub mod train;

pub use error::{Error, Result};
