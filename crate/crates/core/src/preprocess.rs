//! Band statistics, normalization and spatial averaging.
//!
//! Statistics are accumulated in `f64` regardless of the cube scalar type.
//! Standard deviations are population (divide by `n`).

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Axis, Zip};

use crate::data::cube::{BandSpec, HyperCube};
use crate::data::srf::csv_err;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower clamp applied to standard deviations at use time.
pub const STD_EPSILON: f64 = 1e-8;

/// Single-pass running mean/variance.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Welford {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl Welford {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Parallel-variance combination of two disjoint accumulators.
    pub fn merge(&self, other: &Welford) -> Welford {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let n = self.count + other.count;
        let (na, nb) = (self.count as f64, other.count as f64);
        let delta = other.mean - self.mean;
        Welford {
            count: n,
            mean: self.mean + delta * nb / n as f64,
            m2: self.m2 + other.m2 + delta * delta * na * nb / n as f64,
        }
    }

    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }

    fn frozen(mean: f64, std: f64) -> Welford {
        Welford { count: 1, mean, m2: std * std }
    }
}

/// Per-band running statistics over every pixel seen so far.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BandStats {
    bands: Vec<BandSpec>,
    acc: Vec<Welford>,
}

impl BandStats {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Frozen statistics from explicit means and standard deviations.
    pub fn from_moments(bands: Vec<BandSpec>, means: &[f64], stds: &[f64]) -> Result<Self> {
        if bands.len() != means.len() || bands.len() != stds.len() {
            return Err(Error::shape("band/mean/std lengths differ"));
        }
        if stds.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::validation("standard deviations must be >= 0"));
        }
        let acc = means.iter().zip(stds).map(|(&m, &s)| Welford::frozen(m, s)).collect();
        Ok(BandStats { bands, acc })
    }

    pub fn num_bands(&self) -> usize {
        self.acc.len()
    }

    pub fn bands(&self) -> &[BandSpec] {
        &self.bands
    }

    pub fn is_empty(&self) -> bool {
        self.acc.is_empty()
    }

    pub fn mean(&self, band: usize) -> f64 {
        self.acc[band].mean
    }

    pub fn std(&self, band: usize) -> f64 {
        self.acc[band].std()
    }

    pub fn count(&self) -> u64 {
        self.acc.first().map_or(0, |a| a.count)
    }

    pub fn means(&self) -> Vec<f64> {
        self.acc.iter().map(|a| a.mean).collect()
    }

    pub fn stds(&self) -> Vec<f64> {
        self.acc.iter().map(|a| a.std()).collect()
    }

    fn check_bands(&self, n: usize) -> Result<()> {
        if self.acc.len() != n {
            return Err(Error::shape(format!(
                "band count mismatch: stats cover {} bands, cube has {n}",
                self.acc.len()
            )));
        }
        Ok(())
    }

    fn check_usable(&self) -> Result<()> {
        if self.count() == 0 {
            return Err(Error::validation("band statistics are empty"));
        }
        Ok(())
    }

    /// Combines statistics gathered over disjoint data.
    pub fn merge(&self, other: &BandStats) -> Result<BandStats> {
        if self.is_empty() {
            return Ok(other.clone());
        }
        if other.is_empty() {
            return Ok(self.clone());
        }
        self.check_bands(other.num_bands())?;
        Ok(BandStats {
            bands: self.bands.clone(),
            acc: self.acc.iter().zip(&other.acc).map(|(a, b)| a.merge(b)).collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, global: Option<&GlobalStats>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
        w.write_record(["band_index", "center_nm", "mean", "std"]).map_err(csv_err)?;
        for (i, (band, acc)) in self.bands.iter().zip(&self.acc).enumerate() {
            w.write_record([i.to_string(), band.center_nm.to_string(), acc.mean.to_string(), acc.std().to_string()])
                .map_err(csv_err)?;
        }
        if let Some(g) = global {
            w.write_record(["GLOBAL".to_string(), String::new(), g.mean.to_string(), g.std.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads band statistics. Band FWHM is not persisted and comes back as 1 nm.
    pub fn load(path: impl AsRef<Path>) -> Result<(BandStats, Option<GlobalStats>)> {
        let path = path.as_ref();
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
        if r.headers().map_err(csv_err)?.iter().collect::<Vec<_>>() != ["band_index", "center_nm", "mean", "std"] {
            return Err(Error::format(path, "expected columns band_index,center_nm,mean,std"));
        }
        let mut bands = Vec::new();
        let mut means = Vec::new();
        let mut stds = Vec::new();
        let mut global = None;
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(csv_err)?;
            let num = |k: usize| -> Result<f64> {
                rec[k].parse().map_err(|_| Error::Parse { line, msg: format!("bad number {:?}", &rec[k]) })
            };
            if &rec[0] == "GLOBAL" {
                global = Some(GlobalStats::new(num(2)?, num(3)?)?);
                continue;
            }
            let idx: usize = rec[0].parse().map_err(|_| Error::Parse { line, msg: format!("bad band index {:?}", &rec[0]) })?;
            if idx != bands.len() {
                return Err(Error::Parse { line, msg: format!("band index {idx} out of order") });
            }
            bands.push(BandSpec { center_nm: num(1)?, fwhm_nm: 1.0 });
            means.push(num(2)?);
            stds.push(num(3)?);
        }
        Ok((BandStats::from_moments(bands, &means, &stds)?, global))
    }
}

/// Streams every pixel of `cube` into `stats`, band by band.
pub fn accumulate_stats<T: Scalar>(mut stats: BandStats, cube: &HyperCube<T>) -> Result<BandStats> {
    if stats.is_empty() {
        stats = BandStats { bands: cube.bands().to_vec(), acc: vec![Welford::default(); cube.num_bands()] };
    }
    stats.check_bands(cube.num_bands())?;
    for (acc, band) in stats.acc.iter_mut().zip(cube.data().axis_iter(Axis(0))) {
        for &v in band.iter() {
            acc.push(v.as_f64());
        }
    }
    Ok(stats)
}

fn affine_per_band<T: Scalar>(
    cube: &HyperCube<T>,
    stats: &BandStats,
    f: impl Fn(T, T, T) -> T,
) -> Result<HyperCube<T>> {
    stats.check_bands(cube.num_bands())?;
    stats.check_usable()?;
    let mut data = cube.data().clone();
    for (b, mut band) in data.axis_iter_mut(Axis(0)).enumerate() {
        let mu = T::of(stats.mean(b));
        let sigma = T::of(stats.std(b).max(STD_EPSILON));
        band.mapv_inplace(|v| f(v, mu, sigma));
    }
    cube.with_data(data)
}

/// `(x - mu_b) / max(sigma_b, eps)` for every band.
pub fn normalize_bandwise<T: Scalar>(cube: &HyperCube<T>, stats: &BandStats) -> Result<HyperCube<T>> {
    affine_per_band(cube, stats, |v, mu, sigma| (v - mu) / sigma)
}

pub fn denormalize_bandwise<T: Scalar>(cube: &HyperCube<T>, stats: &BandStats) -> Result<HyperCube<T>> {
    affine_per_band(cube, stats, |v, mu, sigma| v * sigma + mu)
}

/// A per-band spectrum, typically the spatial mean of a cube.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSignature<T> {
    pub values: Array1<T>,
    pub bands: Vec<BandSpec>,
}

impl<T: Scalar> SpectralSignature<T> {
    pub fn new(values: Array1<T>, bands: Vec<BandSpec>) -> Result<Self> {
        if values.len() != bands.len() {
            return Err(Error::shape(format!("{} values for {} bands", values.len(), bands.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("signature contains non-finite values"));
        }
        Ok(SpectralSignature { values, bands })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Mean over all `H * W` pixels of each band.
pub fn spatial_average<T: Scalar>(cube: &HyperCube<T>) -> SpectralSignature<T> {
    let n = (cube.height() * cube.width()) as f64;
    let values = cube
        .data()
        .axis_iter(Axis(0))
        .map(|band| T::of(band.iter().map(|v| v.as_f64()).sum::<f64>() / n))
        .collect();
    SpectralSignature { values, bands: cube.bands().to_vec() }
}

/// One scalar mean and standard deviation shared by all bands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalStats {
    pub mean: f64,
    pub std: f64,
}

impl GlobalStats {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
            return Err(Error::validation(format!("global std must be > 0, got {std}")));
        }
        Ok(GlobalStats { mean, std })
    }

    /// Pools every value of every signature.
    pub fn from_signatures<'a, T: Scalar>(sigs: impl IntoIterator<Item = &'a SpectralSignature<T>>) -> Result<Self> {
        let mut acc = Welford::default();
        for s in sigs {
            for v in s.values.iter() {
                acc.push(v.as_f64());
            }
        }
        if acc.count == 0 {
            return Err(Error::validation("no signature values to pool"));
        }
        GlobalStats::new(acc.mean, acc.std().max(STD_EPSILON))
    }
}

pub fn normalize_global<T: Scalar>(sig: &SpectralSignature<T>, g: &GlobalStats) -> Result<SpectralSignature<T>> {
    if !(g.std > 0.0) {
        return Err(Error::validation(format!("global std must be > 0, got {}", g.std)));
    }
    let (mu, sigma) = (T::of(g.mean), T::of(g.std));
    Ok(SpectralSignature { values: sig.values.mapv(|v| (v - mu) / sigma), bands: sig.bands.clone() })
}

/// Writes signatures as `patch_id,v1..vB`.
pub fn save_signatures<T: Scalar>(path: impl AsRef<Path>, rows: &[(String, SpectralSignature<T>)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    let width = rows.first().map_or(0, |(_, s)| s.len());
    write!(f, "patch_id")?;
    for i in 1..=width {
        write!(f, ",v{i}")?;
    }
    writeln!(f)?;
    for (id, sig) in rows {
        if sig.len() != width {
            return Err(Error::shape("signatures have differing lengths"));
        }
        write!(f, "{id}")?;
        for v in sig.values.iter() {
            write!(f, ",{}", v.as_f64())?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

/// Reads `patch_id,v1..vB` rows. Band metadata is not stored in the file;
/// `bands` is attached to every signature and must match its width.
pub fn load_signatures<T: Scalar>(path: impl AsRef<Path>, bands: &[BandSpec]) -> Result<Vec<(String, SpectralSignature<T>)>> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
    let width = r.headers().map_err(csv_err)?.len().saturating_sub(1);
    if width != bands.len() {
        return Err(Error::format(path, format!("{width} value columns but {} bands", bands.len())));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(csv_err)?;
        let values: Result<Vec<T>> = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map(T::of).map_err(|_| Error::Parse { line, msg: format!("bad value {s:?}") }))
            .collect();
        out.push((rec[0].to_string(), SpectralSignature::new(Array1::from(values?), bands.to_vec())?));
    }
    Ok(out)
}

/// Element-wise combination used by linearity checks.
pub fn zip_cubes<T: Scalar>(a: &HyperCube<T>, b: &HyperCube<T>, f: impl Fn(T, T) -> T) -> Result<HyperCube<T>> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::shape("cube dimensions differ"));
    }
    let mut out = a.data().clone();
    Zip::from(&mut out).and(b.data()).for_each(|x, &y| *x = f(*x, y));
    a.with_data(out)
}
