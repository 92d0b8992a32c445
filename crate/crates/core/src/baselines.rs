//! Non-learned reconstructions of masked bands.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::cube::HyperCube;
use crate::error::{Error, Result};
use crate::preprocess::BandStats;
use crate::scalar::Scalar;

fn mask_set(mask: &[usize], nb: usize) -> Result<BTreeSet<usize>> {
    let set: BTreeSet<usize> = mask.iter().copied().collect();
    if let Some(&b) = set.iter().find(|&&b| b >= nb) {
        return Err(Error::shape(format!("masked band {b} out of range for {nb} bands")));
    }
    Ok(set)
}

/// Fills every pixel of each masked band with an independent draw from
/// `N(mu_b, sigma_b^2)`.
pub fn gaussian_sampling_baseline<T: Scalar, R: Rng + ?Sized>(
    cube: &HyperCube<T>,
    mask: &[usize],
    stats: &BandStats,
    rng: &mut R,
) -> Result<HyperCube<T>> {
    if stats.num_bands() != cube.num_bands() {
        return Err(Error::shape("band statistics do not cover the cube"));
    }
    let masked = mask_set(mask, cube.num_bands())?;
    let mut data = cube.data().clone();
    for &b in &masked {
        let normal = Normal::new(stats.mean(b), stats.std(b)).map_err(|e| Error::validation(e.to_string()))?;
        data.index_axis_mut(ndarray::Axis(0), b).mapv_inplace(|_| T::of(normal.sample(rng)));
    }
    cube.with_data(data)
}

/// Per pixel, interpolates each masked band linearly in wavelength between
/// the nearest unmasked bands; outside the unmasked range the nearest
/// unmasked value is repeated.
pub fn linear_interpolation_baseline<T: Scalar>(cube: &HyperCube<T>, mask: &[usize]) -> Result<HyperCube<T>> {
    let nb = cube.num_bands();
    let masked = mask_set(mask, nb)?;
    let known: Vec<usize> = (0..nb).filter(|b| !masked.contains(b)).collect();
    if known.is_empty() {
        return Err(Error::validation("all bands are masked; nothing to interpolate from"));
    }
    let wl: Vec<f64> = cube.bands().iter().map(|b| b.center_nm).collect();
    let mut data = cube.data().clone();
    for &b in &masked {
        let above = known.partition_point(|&k| k < b);
        let (w_lo, w_hi, lo, hi) = match (above.checked_sub(1).map(|i| known[i]), known.get(above).copied()) {
            (Some(lo), Some(hi)) => {
                let t = (wl[b] - wl[lo]) / (wl[hi] - wl[lo]);
                (1.0 - t, t, lo, hi)
            }
            (Some(lo), None) => (1.0, 0.0, lo, lo),
            (None, Some(hi)) => (0.0, 1.0, hi, hi),
            (None, None) => unreachable!("known is non-empty"),
        };
        let (w_lo, w_hi) = (T::of(w_lo), T::of(w_hi));
        let (src, mut dst) = {
            let src = cube.data();
            (src, data.index_axis_mut(ndarray::Axis(0), b))
        };
        ndarray::Zip::from(&mut dst)
            .and(src.index_axis(ndarray::Axis(0), lo))
            .and(src.index_axis(ndarray::Axis(0), hi))
            .for_each(|d, &a, &c| *d = w_lo * a + w_hi * c);
    }
    cube.with_data(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::cube::BandSpec;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cube(centers: &[f64], values: &[f64]) -> HyperCube<f64> {
        let bands = centers.iter().map(|&c| BandSpec::new(c, 5.0).unwrap()).collect();
        HyperCube::new(Array3::from_shape_vec((centers.len(), 1, 1), values.to_vec()).unwrap(), bands, "p", "t").unwrap()
    }

    #[test]
    fn midpoint_and_quarter_point() {
        let c = cube(&[500.0, 550.0, 600.0, 700.0], &[10.0, 0.0, 0.0, 20.0]);
        let out = linear_interpolation_baseline(&c, &[1, 2]).unwrap();
        assert_eq!(out.data()[[2, 0, 0]], 15.0);
        assert_eq!(out.data()[[1, 0, 0]], 12.5);
    }

    #[test]
    fn edges_clamp_to_nearest() {
        let c = cube(&[450.0, 500.0, 700.0, 800.0], &[0.0, 10.0, 20.0, 0.0]);
        let out = linear_interpolation_baseline(&c, &[0, 3]).unwrap();
        assert_eq!(out.data()[[0, 0, 0]], 10.0);
        assert_eq!(out.data()[[3, 0, 0]], 20.0);
    }

    #[test]
    fn all_masked_is_error() {
        let c = cube(&[500.0, 600.0], &[1.0, 2.0]);
        assert!(linear_interpolation_baseline(&c, &[0, 1]).is_err());
    }

    #[test]
    fn degenerate_gaussian_fills_mean() {
        let c = cube(&[500.0, 600.0], &[1.0, 2.0]);
        let stats = BandStats::from_moments(c.bands().to_vec(), &[5.0, 7.0], &[0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = gaussian_sampling_baseline(&c, &[1], &stats, &mut rng).unwrap();
        assert_eq!(out.data()[[1, 0, 0]], 7.0);
        assert_eq!(out.data()[[0, 0, 0]], 1.0);
    }
}
