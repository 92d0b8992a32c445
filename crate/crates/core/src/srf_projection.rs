//! Spectral degradation of hyperspectral cubes through a sensor's SRF.

use ndarray::Array2;

use crate::data::cube::{BandSpec, HyperCube};
use crate::data::srf::SrfTable;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Maximum wavelength disagreement tolerated when matching band lists.
pub const BAND_MATCH_TOL_NM: f64 = 0.01;

/// Column-stochastic `B_source x B_target` mixing matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    weights: Array2<f64>,
    source_bands: Vec<BandSpec>,
    target_bands: Vec<BandSpec>,
}

impl WeightMatrix {
    /// Wraps explicit weights after checking non-negativity and unit column sums.
    pub fn from_weights(weights: Array2<f64>, source_bands: Vec<BandSpec>, target_bands: Vec<BandSpec>) -> Result<Self> {
        let (s, t) = weights.dim();
        if s != source_bands.len() || t != target_bands.len() {
            return Err(Error::shape(format!("weights are {s}x{t} for {}x{} bands", source_bands.len(), target_bands.len())));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::validation("weights must be non-negative"));
        }
        for (b, col) in weights.columns().into_iter().enumerate() {
            let sum: f64 = col.sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::validation(format!("column {b} sums to {sum}, not 1")));
            }
        }
        Ok(WeightMatrix { weights, source_bands, target_bands })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn source_bands(&self) -> &[BandSpec] {
        &self.source_bands
    }

    pub fn target_bands(&self) -> &[BandSpec] {
        &self.target_bands
    }
}

/// Sums each target band's SRF samples over every source band interval
/// `[center - fwhm/2, center + fwhm/2]`, then normalizes columns to sum 1.
///
/// A sample sitting exactly on the lower edge of a source interval that is
/// also covered by a lower-wavelength source band counts only for the lower
/// band.
pub fn build_weight_matrix(srf: &SrfTable, source_bands: &[BandSpec]) -> Result<WeightMatrix> {
    let intervals: Vec<(f64, f64)> = source_bands.iter().map(BandSpec::interval).collect();
    let mut weights = Array2::<f64>::zeros((source_bands.len(), srf.len()));
    let mut orphans = Vec::new();
    for (b, band) in srf.bands().iter().enumerate() {
        let samples = &band.samples;
        for (i, &(lo, hi)) in intervals.iter().enumerate() {
            let start = samples.partition_point(|s| s.0 < lo);
            let end = samples.partition_point(|s| s.0 <= hi);
            let mut sum = 0.0;
            for &(wl, r) in &samples[start..end] {
                if wl == lo && intervals[..i].iter().any(|&(l, h)| l <= wl && wl <= h) {
                    continue;
                }
                sum += r;
            }
            weights[[i, b]] = sum;
        }
        let total: f64 = weights.column(b).sum();
        if total > 0.0 {
            weights.column_mut(b).mapv_inplace(|w| w / total);
        } else {
            orphans.push(band.name.clone());
        }
    }
    if !orphans.is_empty() {
        return Err(Error::validation(format!(
            "target bands without source overlap (exclude them from the SRF table): {}",
            orphans.join(", ")
        )));
    }
    WeightMatrix::from_weights(weights, source_bands.to_vec(), srf.target_bands())
}

pub(crate) fn bands_match(a: &[BandSpec], b: &[BandSpec]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x.center_nm - y.center_nm).abs() <= BAND_MATCH_TOL_NM)
}

/// Applies `Y[h, w, :] = X[h, w, :] . W` to every pixel.
pub fn project_cube<T: Scalar>(cube: &HyperCube<T>, w: &WeightMatrix) -> Result<HyperCube<T>> {
    if !bands_match(cube.bands(), w.source_bands()) {
        return Err(Error::shape(format!(
            "cube bands ({}) do not match weight-matrix source bands ({})",
            cube.num_bands(),
            w.source_bands().len()
        )));
    }
    let (nb, nh, nw) = cube.data().dim();
    let flat = cube.data().view().into_shape_with_order((nb, nh * nw)).expect("contiguous cube");
    let wt: Array2<T> = w.weights().t().mapv(T::of);
    let projected = wt.dot(&flat);
    let data = projected.into_shape_with_order((w.target_bands().len(), nh, nw)).expect("shape");
    HyperCube::new(data, w.target_bands().to_vec(), cube.patch_id(), cube.tile_id())
}
