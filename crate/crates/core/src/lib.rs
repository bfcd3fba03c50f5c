//! Dual-encoder volumetric segmentation: a 3D U-Net whose skip features are summed
//! with multi-scale features from an independent transformer encoder.
//!
//! Volumetric tensors use the axis order `[batch, channel, W, H, D]`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nifti;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod preprocess;
pub mod registry;
pub mod trainer;
pub mod transformer;
pub mod unet;
pub mod volume;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMeta};
pub use config::{CatsConfig, TransformerConfig, UNetConfig};
pub use error::{CatsError, Result};
pub use model::{ablate_transformer, build_model, parameter_count, CatsNet, SegmentationModel, UNet};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{ModelState, ParameterSet, Phase, StatsSet};
pub use volume::{Grid3, IntensityUnits, LabelVolume, Volume};
