//! Region-level labeling budgets for semi-supervised crowd counting.
//!
//! Scenes are split into full-height vertical strips. A labeling budget buys a
//! few strips per scene, chosen at random, by predicted mass, or by clustering
//! the strips' multi-level density vectors with a Gaussian mixture and
//! annotating one representative per cluster. A small convolutional counter
//! is trained on the annotated strips; during training, crowd affinity
//! propagation mixes unlabeled-region features into labeled ones so the
//! supervision reaches the unlabeled regions too.

pub mod cap;
pub mod counternet;
pub mod densitymap;
pub mod error;
pub mod gmm;
pub mod grid;
pub mod harness;
pub mod regionselect;
pub mod synthcrowd;

pub use error::{Error, Result};
