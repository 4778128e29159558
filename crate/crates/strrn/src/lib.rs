//! Spatial-temporal relational landmark tracking.
//!
//! The library tracks a fixed set of keypoints through grayscale frame
//! sequences. Per frame it builds a relational feature from local appearance
//! patches and pairwise log-distance geometry within facial component groups,
//! feeds it to a small shared-parameter network that tracks forward and
//! backward, and scores reliability with a cycle-consistency check. A
//! detector/tracker cross-checking loop then distills reliable annotations
//! from unlabeled sequences and retrains both models.
//!
//! Modules:
//! - [`nn`]: tape-based differentiable layers, SGD, gradient checking
//! - [`shape`]: landmark shapes, component partitions, patches, descriptors
//! - [`spatial`]: the appearance + geometry relational feature
//! - [`tracker`]: bidirectional tracking and the cycle-consistency loss
//! - [`distill`]: the annotation-generation gate and the training loops
//! - [`dataio`]: synthetic sequences, PTS/PGM/manifest/checkpoint formats
//! - [`eval`]: inter-pupil-normalized RMSE, CED curves, AUC

pub mod dataio;
pub mod distill;
mod error;
pub mod eval;
pub mod image;
pub mod nn;
pub mod shape;
pub mod spatial;
pub mod tracker;

pub use error::{Error, Result};
pub use image::GrayImage;
pub use shape::{ComponentPartition, LandmarkShape};
