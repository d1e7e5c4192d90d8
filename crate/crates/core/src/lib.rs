//! Controlled synthetic augmentation for object-detection datasets.
//!
//! Real images are turned into feature images (edge maps, masks), captions are
//! rewritten into vocabulary variants, a conditioned generator renders new
//! images that inherit the source labels, and the resulting pool is scored,
//! subsampled and mixed back into a small real training set.

pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod extract;
pub mod generate;
pub mod geometry;
pub mod manifest;
pub mod prompt;
pub mod quality;
pub mod raster;
pub mod sample;
pub mod scene;

pub use error::{Error, Result};
pub use geometry::BBox;
pub use manifest::{Annotation, DatasetManifest, ImageRecord, Lineage, Provenance, QualityRecord};
