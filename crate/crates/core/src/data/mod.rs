//! Spectral cubes, sensor response tables, labels and dataset splits.

pub mod cube;
pub mod labels;
pub mod split;
pub mod srf;

pub use cube::{load_cube, save_cube, validate_bands, BandSpec, HyperCube, LAMBDA_MAX_NM, LAMBDA_MIN_NM};
pub use labels::{load_labels, GasKind, GasLabelSet};
pub use split::{make_splits, straddling_tiles, Split, SplitAssignment, SplitMode, SplitRatios};
pub use srf::{SrfBand, SrfTable};
