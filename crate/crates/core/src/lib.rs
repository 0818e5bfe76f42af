pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geom;
pub mod merge;
pub mod predict;
pub mod raster;
pub mod stitch;
pub mod tiling;
pub mod vector;

pub use error::{Error, Result};
pub use geo;
