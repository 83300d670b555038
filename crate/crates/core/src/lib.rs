//! Hand-held object segmentation and tracking at desk scale.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod losses;
pub mod mask;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rle;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
