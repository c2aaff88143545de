//! Self-supervised change detection in satellite image time series.

pub mod backbone;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod pseudolabel;
pub mod raster;
pub mod synth;
pub mod temporal;
pub mod training;

pub use error::{Error, Result};
