//! Population based augmentation.
//!
//! A population of small classifiers is trained in parallel while the
//! probability/magnitude levels of a 30-slot augmentation policy are evolved
//! with truncation selection. The lineage of the best trial yields a
//! per-epoch augmentation schedule which can then be replayed, ablated and
//! compared against random-schedule baselines.

pub mod augment;
pub mod data;
pub mod harness;
pub mod image;
pub mod pbt;
pub mod policy;
pub mod rng;
pub mod trainer;

pub use augment::{apply_op, cutout_patch, magnitude_to_param, MagLevel, OpArg, OpKind};
pub use data::{DatasetKind, DatasetSplits, Example, SyntheticSpec};
pub use harness::ReplayMode;
pub use image::{Image, ImageError};
pub use pbt::{run_search, SearchConfig, SearchResult, Trainable, TrainableFactory, Trial};
pub use policy::{OpParam, PolicyParams, ProbLevel, Schedule, StationarySampler};
pub use trainer::{ToyClassifier, TrainerConfig};
