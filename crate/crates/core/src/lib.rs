//! Hyperspectral reconstruction from multispectral imagery with a spectral
//! masked autoencoder, and downstream greenhouse-gas regression.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! below fix the scalar to `f32`, the precision used for training and
//! checkpoints; the `*64` variants are handy for gradient checks.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod ghg;
pub mod mae;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod preprocess;
pub mod scalar;
pub mod srf_projection;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Cube = data::HyperCube<f32>;
pub type Cube64 = data::HyperCube<f64>;
pub type Model = mae::SpectralMae<f32>;
pub type Model64 = mae::SpectralMae<f64>;
pub type Checkpoint = mae::MaeCheckpoint<f32>;
pub type Signature = preprocess::SpectralSignature<f32>;
