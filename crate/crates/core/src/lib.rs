//! Point-wise feature-aware Gaussian splatting for few-shot novel view
//! synthesis, with a synthetic-scene workbench.

pub mod decode;
pub mod diffcore;
pub mod error;
pub mod featpipe;
pub mod interact;
pub mod optim;
pub mod raster;
pub mod scene;
pub mod workbench;

pub use error::{Error, Result};
