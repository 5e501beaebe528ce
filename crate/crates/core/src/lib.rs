//! Low-rank adapters for convolutional segmentation networks.
//!
//! The crate covers the whole fine-tuning loop: six adapter methods for
//! convolution kernels, a two-level multi-view Unet and a standard Unet,
//! the contrast-weighted Dice-style loss, freeze and adapter fine-tuning,
//! cross-validated rank sweeps, and a small on-disk format for volumes and
//! checkpoints.

pub mod adapters;
pub mod backbones;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod ops;
pub mod report;
pub mod training;

pub use adapters::{AdapterConfig, AdapterMethod, AdapterState, ConvWeight, Factors};
pub use backbones::{Architecture, FreezeStrategy, Network, NetworkSpec, ProbabilityMap};
pub use checkpoint::{Checkpoint, CheckpointKind};
pub use data::{AugmentKind, SegVolume, SynthSpec};
pub use error::{Error, Result};
pub use losses::{ContrastViewSet, LossClasses, VoxelGeometry};
pub use report::{EvalReport, PatientScore};
pub use training::{CellMode, FoldSplit, SweepConfig, TrainConfig};
