//! Grid-splicing batch augmentation for multi-label image classification.
//!
//! Downsampled regular images are tiled into grid images whose labels are the
//! union of their members' labels, and the mixed set is appended to the
//! regular batch. The crate also carries the linear-head losses (including
//! sub-image consistency), multi-label metrics, a synthetic co-occurrence
//! benchmark and NPY/PNG/JSON persistence.

pub mod augment;
pub mod cli;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use augment::{
    mix_images, mix_labels, plan_batch, referenced_cardinality, splicemix, AugConfig, BatchPlan,
    DropoutScope, GridSpec, MixedOverflow, MixedPlan, MultiHotLabel, SplicedBatch,
};
pub use error::{Error, Result};
pub use rng::SeededStream;
pub use tensor::{bilinear_downsample, grid_compose, grid_split, GridGeometry, ImageTensor};
