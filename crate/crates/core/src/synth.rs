//! Synthetic hyperspectral scenes, sensor response tables and gas labels
//! with known ground truth.
//!
//! Seeding rule: a dataset with master seed `s` draws its endmember library
//! from ChaCha8 stream 0 of `s` and scene `i` from stream `i + 1`, so any
//! scene can be regenerated on its own.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{validate_bands, BandSpec, GasKind, GasLabelSet, HyperCube, SrfBand, SrfTable};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `2 * sqrt(2 ln 2)`: ratio between a Gaussian's FWHM and its sigma.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbsorptionLine {
    pub center_nm: f64,
    /// Full width at half maximum of the line.
    pub width_nm: f64,
    /// Upper bound of the per-scene depth, a fraction in `[0, 1)`.
    pub max_depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub lambda_min_nm: f64,
    pub lambda_max_nm: f64,
    /// Band FWHM as a multiple of the band spacing.
    pub fwhm_factor: f64,
    pub endmembers: usize,
    /// Spline knots per endmember spectrum.
    pub knots: usize,
    pub blobs: usize,
    /// Blob standard deviation in pixels.
    pub blob_scale: f64,
    pub lines: Vec<AbsorptionLine>,
    /// Additive noise, in reflectance units before scaling.
    pub noise_std: f64,
    /// Multiplier from [0, 1] reflectance to stored values.
    pub scale: f64,
    /// Per-scene brightness factor drawn from `1 ± illumination`.
    pub illumination: f64,
    pub scenes_per_tile: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            bands: 64,
            height: 16,
            width: 16,
            lambda_min_nm: 420.0,
            lambda_max_nm: 2450.0,
            fwhm_factor: 1.0,
            endmembers: 5,
            knots: 10,
            blobs: 3,
            blob_scale: 4.0,
            lines: vec![AbsorptionLine { center_nm: 2200.0, width_nm: 30.0, max_depth: 0.5 }],
            noise_std: 0.002,
            scale: 10_000.0,
            illumination: 0.3,
            scenes_per_tile: 4,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("scene dimensions must be positive"));
        }
        if self.endmembers == 0 || self.knots < 2 || self.scenes_per_tile == 0 {
            return Err(Error::config("need at least one endmember, two knots and one scene per tile"));
        }
        if !(self.blob_scale > 0.0 && self.fwhm_factor > 0.0 && self.scale > 0.0) || self.noise_std < 0.0 {
            return Err(Error::config("blob_scale, fwhm_factor and scale must be positive, noise_std non-negative"));
        }
        if !(0.0..1.0).contains(&self.illumination) {
            return Err(Error::config("illumination must be in [0, 1)"));
        }
        for l in &self.lines {
            if !(crate::data::LAMBDA_MIN_NM..=crate::data::LAMBDA_MAX_NM).contains(&l.center_nm) {
                return Err(Error::config(format!("absorption line at {} nm outside the sensed range", l.center_nm)));
            }
            if !(0.0..1.0).contains(&l.max_depth) || !(l.width_nm > 0.0) {
                return Err(Error::config("line depth must be in [0, 1) and width positive"));
            }
        }
        validate_bands(&self.band_specs())
    }

    /// Evenly spaced bands from `lambda_min_nm` to `lambda_max_nm`.
    pub fn band_specs(&self) -> Vec<BandSpec> {
        if self.bands == 1 {
            let c = 0.5 * (self.lambda_min_nm + self.lambda_max_nm);
            return vec![BandSpec { center_nm: c, fwhm_nm: (self.lambda_max_nm - self.lambda_min_nm).max(1.0) }];
        }
        let step = (self.lambda_max_nm - self.lambda_min_nm) / (self.bands - 1) as f64;
        (0..self.bands)
            .map(|i| BandSpec { center_nm: self.lambda_min_nm + step * i as f64, fwhm_nm: step * self.fwhm_factor })
            .collect()
    }
}

/// Smooth reflectance spectrum through uniformly spaced knots over 400..2500 nm.
#[derive(Debug, Clone, PartialEq)]
pub struct Endmember {
    pub knots: Vec<f64>,
}

impl Endmember {
    pub fn random<R: Rng + ?Sized>(knots: usize, rng: &mut R) -> Self {
        Endmember { knots: (0..knots).map(|_| rng.random_range(0.05..0.9)).collect() }
    }

    /// Catmull-Rom interpolation, clamped to `[0, 1]`.
    pub fn reflectance(&self, lambda_nm: f64) -> f64 {
        let k = &self.knots;
        let n = k.len();
        let t = ((lambda_nm - crate::data::LAMBDA_MIN_NM) / (crate::data::LAMBDA_MAX_NM - crate::data::LAMBDA_MIN_NM))
            .clamp(0.0, 1.0)
            * (n - 1) as f64;
        let i = (t.floor() as usize).min(n - 2);
        let u = t - i as f64;
        let at = |j: isize| k[j.clamp(0, n as isize - 1) as usize];
        let (p0, p1, p2, p3) = (at(i as isize - 1), at(i as isize), at(i as isize + 1), at(i as isize + 2));
        let v = 0.5
            * (2.0 * p1
                + (-p0 + p2) * u
                + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u * u
                + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * u * u * u);
        v.clamp(0.0, 1.0)
    }
}

/// A generated cube together with the line depths that shaped it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene<T> {
    pub cube: HyperCube<T>,
    /// One depth per configured absorption line.
    pub depths: Vec<f64>,
}

/// Unit-peak Gaussian response of a band centered at `center` with width `fwhm`.
pub fn gaussian_response(center: f64, fwhm: f64, lambda_nm: f64) -> f64 {
    let sigma = fwhm / FWHM_PER_SIGMA;
    (-(lambda_nm - center).powi(2) / (2.0 * sigma * sigma)).exp()
}

/// Transmittance of `lines` at `depths`, averaged over the band's Gaussian response.
fn band_transmittance(band: &BandSpec, lines: &[AbsorptionLine], depths: &[f64]) -> f64 {
    let sigma = band.fwhm_nm / FWHM_PER_SIGMA;
    let lo = (band.center_nm - 3.0 * sigma).floor() as i64;
    let hi = (band.center_nm + 3.0 * sigma).ceil() as i64;
    let (mut num, mut den) = (0.0, 0.0);
    for l in lo..=hi {
        let l = l as f64;
        let g = gaussian_response(band.center_nm, band.fwhm_nm, l);
        let mut t = 1.0;
        for (line, &d) in lines.iter().zip(depths) {
            t *= 1.0 - d * gaussian_response(line.center_nm, line.width_nm, l);
        }
        num += g * t;
        den += g;
    }
    num / den
}

fn library(cfg: &SceneConfig) -> Vec<Endmember> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.endmembers).map(|_| Endmember::random(cfg.knots, &mut rng)).collect()
}

/// One scene. The endmember library depends only on `cfg.seed`; abundances,
/// line depths and noise come from `rng`.
pub fn gen_scene<T: Scalar, R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Result<SyntheticScene<T>> {
    cfg.validate()?;
    scene_from_library(cfg, &library(cfg), rng, "scene", "tile")
}

fn scene_from_library<T: Scalar, R: Rng + ?Sized>(
    cfg: &SceneConfig,
    lib: &[Endmember],
    rng: &mut R,
    patch_id: &str,
    tile_id: &str,
) -> Result<SyntheticScene<T>> {
    let bands = cfg.band_specs();
    let (h, w) = (cfg.height, cfg.width);
    let mut abundance = Array3::<f64>::from_elem((lib.len(), h, w), 1e-3);
    for mut a in abundance.outer_iter_mut() {
        for _ in 0..cfg.blobs {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let amp = rng.random_range(0.2..1.0);
            let s2 = 2.0 * cfg.blob_scale * cfg.blob_scale;
            for ((y, x), v) in a.indexed_iter_mut() {
                *v += amp * (-((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / s2).exp();
            }
        }
    }
    let total: Array2<f64> = abundance.sum_axis(ndarray::Axis(0));
    for mut a in abundance.outer_iter_mut() {
        a /= &total;
    }
    let brightness = 1.0 + cfg.illumination * (2.0 * rng.random::<f64>() - 1.0);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::config(e.to_string()))?;
    let noise_field = Array3::from_shape_fn((h, w, bands.len()), |_| if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 });
    // drawn last so that lines of depth zero leave every other draw unchanged
    let depths: Vec<f64> = cfg.lines.iter().map(|l| rng.random::<f64>() * l.max_depth).collect();
    let spectra = Array2::from_shape_fn((lib.len(), bands.len()), |(k, b)| lib[k].reflectance(bands[b].center_nm));
    let trans: Vec<f64> = bands.iter().map(|b| band_transmittance(b, &cfg.lines, &depths)).collect();
    let mut data = Array3::<T>::zeros((bands.len(), h, w));
    for y in 0..h {
        for x in 0..w {
            for b in 0..bands.len() {
                let mut r = 0.0;
                for k in 0..lib.len() {
                    r += abundance[[k, y, x]] * spectra[[k, b]];
                }
                data[[b, y, x]] = T::of((brightness * r * trans[b] + noise_field[[y, x, b]]) * cfg.scale);
            }
        }
    }
    Ok(SyntheticScene { cube: HyperCube::new(data, bands, patch_id, tile_id)?, depths })
}

/// `n` scenes named `s00000..` grouped `scenes_per_tile` to a tile.
pub fn gen_dataset<T: Scalar>(cfg: &SceneConfig, n: usize) -> Result<Vec<SyntheticScene<T>>> {
    cfg.validate()?;
    let lib = library(cfg);
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            let patch = format!("s{i:05}");
            let tile = format!("t{:04}", i / cfg.scenes_per_tile);
            scene_from_library(cfg, &lib, &mut rng, &patch, &tile)
        })
        .collect()
}

/// Gaussian response curves sampled every nanometre out to three sigma.
pub fn gen_sensor(defs: &[(&str, f64, f64)]) -> Result<SrfTable> {
    let bands = defs
        .iter()
        .map(|&(name, center, fwhm)| {
            let spec = BandSpec::new(center, fwhm)?;
            let sigma = fwhm / FWHM_PER_SIGMA;
            let lo = (center - 3.0 * sigma).ceil() as i64;
            let hi = (center + 3.0 * sigma).floor() as i64;
            let samples = (lo..=hi).map(|l| (l as f64, gaussian_response(center, fwhm, l as f64))).collect();
            Ok(SrfBand { name: name.to_string(), spec, samples })
        })
        .collect::<Result<_>>()?;
    SrfTable::new(bands)
}

/// Twelve broad bands laid out like a Sentinel-2 multispectral instrument
/// without its cirrus band.
pub fn broadband_sensor() -> Vec<(&'static str, f64, f64)> {
    vec![
        ("B01", 443.0, 20.0),
        ("B02", 490.0, 65.0),
        ("B03", 560.0, 35.0),
        ("B04", 665.0, 30.0),
        ("B05", 705.0, 15.0),
        ("B06", 740.0, 15.0),
        ("B07", 783.0, 20.0),
        ("B08", 842.0, 115.0),
        ("B8A", 865.0, 20.0),
        ("B09", 945.0, 20.0),
        ("B11", 1610.0, 90.0),
        ("B12", 2190.0, 180.0),
    ]
}

/// Label = `intercept + slope * depth` of one line, plus Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelModel {
    pub gas: GasKind,
    pub line: usize,
    pub intercept: f64,
    pub slope: f64,
    pub noise_std: f64,
}

impl Default for LabelModel {
    fn default() -> Self {
        LabelModel { gas: GasKind::Ch4, line: 0, intercept: 1800.0, slope: 400.0, noise_std: 0.0 }
    }
}

pub fn gen_labels<T: Scalar, R: Rng + ?Sized>(scenes: &[SyntheticScene<T>], model: &LabelModel, rng: &mut R) -> Result<GasLabelSet> {
    let noise = Normal::new(0.0, model.noise_std).map_err(|e| Error::config(e.to_string()))?;
    let mut set = GasLabelSet::new(model.gas);
    for s in scenes {
        let depth = *s.depths.get(model.line).ok_or_else(|| Error::config(format!("scene has no line {}", model.line)))?;
        let n = if model.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
        set.insert(s.cube.patch_id(), model.intercept + model.slope * depth + n)?;
    }
    Ok(set)
}

/// Ground-truth line depths as `patch_id,tile_id,depth_0,..`.
pub fn save_truth<T: Scalar>(scenes: &[SyntheticScene<T>], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let lines = scenes.first().map_or(0, |s| s.depths.len());
    write!(f, "patch_id,tile_id")?;
    for i in 0..lines {
        write!(f, ",depth_{i}")?;
    }
    writeln!(f)?;
    for s in scenes {
        write!(f, "{},{}", s.cube.patch_id(), s.cube.tile_id())?;
        for d in &s.depths {
            write!(f, ",{d}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::srf_projection::{build_weight_matrix, project_cube};

    fn cfg() -> SceneConfig {
        SceneConfig { bands: 32, height: 8, width: 8, ..Default::default() }
    }

    #[test]
    fn single_endmember_without_noise_is_spatially_constant() {
        let c = SceneConfig { endmembers: 1, noise_std: 0.0, lines: vec![], ..cfg() };
        let s: SyntheticScene<f64> = gen_scene(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let d = s.cube.data();
        for b in 0..c.bands {
            let v = d[[b, 0, 0]];
            assert!(d.index_axis(ndarray::Axis(0), b).iter().all(|&x| (x - v).abs() <= 1e-9 * v.abs().max(1.0)));
        }
    }

    #[test]
    fn zero_depth_matches_no_line() {
        let mut with = cfg();
        with.lines[0].max_depth = 0.0;
        let without = SceneConfig { lines: vec![], ..cfg() };
        let a: SyntheticScene<f64> = gen_scene(&with, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b: SyntheticScene<f64> = gen_scene(&without, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.depths, vec![0.0]);
        assert_eq!(a.cube, b.cube);
    }

    #[test]
    fn sensor_curves() {
        let t = gen_sensor(&[("a", 700.0, 30.0)]).unwrap();
        let band = &t.bands()[0];
        let peak = band.samples.iter().map(|s| s.1).fold(0.0, f64::max);
        assert_eq!(peak, band.samples.iter().find(|s| s.0 == 700.0).unwrap().1);
        assert!(band.samples.iter().all(|s| s.1 >= 0.0));
        assert!((gaussian_response(700.0, 30.0, 715.0) - 0.5).abs() < 1e-6);
        assert!((gaussian_response(700.0, 30.0, 685.0) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn labels_follow_depth() {
        let scenes: Vec<SyntheticScene<f32>> = gen_dataset(&cfg(), 6).unwrap();
        let labels = gen_labels(&scenes, &LabelModel::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for s in &scenes {
            assert_eq!(labels.get(s.cube.patch_id()).unwrap(), 1800.0 + 400.0 * s.depths[0]);
        }
        let flat = SyntheticScene { cube: scenes[0].cube.clone(), depths: vec![0.0] };
        let l = gen_labels(&[flat], &LabelModel::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(l.get("s00000"), Some(1800.0));
    }

    #[test]
    fn dataset_is_deterministic_and_scenes_regenerate_alone() {
        let a: Vec<SyntheticScene<f32>> = gen_dataset(&cfg(), 5).unwrap();
        let b: Vec<SyntheticScene<f32>> = gen_dataset(&cfg(), 5).unwrap();
        assert_eq!(a, b);
        let only: Vec<SyntheticScene<f32>> = gen_dataset(&cfg(), 3).unwrap();
        assert_eq!(only[2], a[2]);
        assert_eq!(a[4].cube.tile_id(), "t0001");
    }

    #[test]
    fn broad_bands_attenuate_line_variance() {
        let c = SceneConfig { noise_std: 0.0, ..cfg() };
        let scenes: Vec<SyntheticScene<f64>> = gen_dataset(&c, 40).unwrap();
        let line = c.lines[0].center_nm;
        let srf = gen_sensor(&broadband_sensor()).unwrap();
        let w = build_weight_matrix(&srf, &c.band_specs()).unwrap();
        let hs_band = c.band_specs().iter().enumerate().min_by(|a, b| {
            (a.1.center_nm - line).abs().partial_cmp(&(b.1.center_nm - line).abs()).unwrap()
        }).unwrap().0;
        let ms_band = broadband_sensor().iter().position(|b| b.0 == "B12").unwrap();
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        let depths: Vec<f64> = scenes.iter().map(|s| s.depths[0]).collect();
        // ratio of transmitted line signal at fixed continuum
        let ratio = |band: &BandSpec| {
            let t: Vec<f64> = depths.iter().map(|&d| band_transmittance(band, &c.lines, &[d])).collect();
            var(&t) / var(&depths)
        };
        let hs = ratio(&c.band_specs()[hs_band]);
        let ms = ratio(&srf.target_bands()[ms_band]);
        assert!(ms < hs, "broad {ms} vs narrow {hs}");
        let projected = project_cube(&scenes[0].cube, &w).unwrap();
        assert_eq!(projected.num_bands(), 12);
    }
}
