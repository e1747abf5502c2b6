//! Crop/weed semantic segmentation from field imagery, with cross-domain
//! prediction on aerial orthomosaic tiles and spot-spraying analytics.

pub mod checkpoint;
pub mod crf;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod mapping;
pub mod network;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
