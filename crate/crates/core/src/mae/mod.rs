//! Spectral transformer masked autoencoder.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod tokens;
pub mod train;

pub use checkpoint::{MaeCheckpoint, Stage};
pub use config::ModelConfig;
pub use model::{Arm, BatchPlan, SpectralMae};
pub use tokens::{
    apply_band_mask, mask_count, patchify, positional_encoding, reassemble, sample_band_mask, scale_wavelength,
    spatial_encoding, spectral_encoding, PatchLayout, Patches, TokenCoord, TokenGrid,
};
pub use train::{composite_masked, finetune, groups_to_bands, predict_masked, pretrain, reconstruct, CubePair, TrainLog, TrainOutcome};
