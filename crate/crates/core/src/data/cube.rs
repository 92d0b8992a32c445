//! Spectral cubes, band metadata and the `HSC1` binary container.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower bound of the supported spectral range, in nanometres.
pub const LAMBDA_MIN_NM: f64 = 400.0;
/// Upper bound of the supported spectral range, in nanometres.
pub const LAMBDA_MAX_NM: f64 = 2500.0;

/// Center wavelength and full width at half maximum of one band, in nm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandSpec {
    pub center_nm: f64,
    pub fwhm_nm: f64,
}

impl BandSpec {
    pub fn new(center_nm: f64, fwhm_nm: f64) -> Result<Self> {
        let band = BandSpec { center_nm, fwhm_nm };
        band.validate()?;
        Ok(band)
    }

    pub fn validate(&self) -> Result<()> {
        if !(LAMBDA_MIN_NM..=LAMBDA_MAX_NM).contains(&self.center_nm) {
            return Err(Error::validation(format!(
                "band center {} nm outside [{LAMBDA_MIN_NM}, {LAMBDA_MAX_NM}]",
                self.center_nm
            )));
        }
        if !(self.fwhm_nm > 0.0 && self.fwhm_nm.is_finite()) {
            return Err(Error::validation(format!("band fwhm {} nm must be > 0", self.fwhm_nm)));
        }
        Ok(())
    }

    /// Closed interval `[center - fwhm/2, center + fwhm/2]`.
    pub fn interval(&self) -> (f64, f64) {
        (self.center_nm - 0.5 * self.fwhm_nm, self.center_nm + 0.5 * self.fwhm_nm)
    }
}

/// Checks that `bands` is non-empty, valid, and strictly increasing in wavelength.
pub fn validate_bands(bands: &[BandSpec]) -> Result<()> {
    if bands.is_empty() {
        return Err(Error::validation("band list is empty"));
    }
    for band in bands {
        band.validate()?;
    }
    for (i, pair) in bands.windows(2).enumerate() {
        if pair[1].center_nm <= pair[0].center_nm {
            return Err(Error::validation(format!(
                "band wavelengths not strictly increasing at band {}: {} nm after {} nm",
                i + 1,
                pair[1].center_nm,
                pair[0].center_nm
            )));
        }
    }
    Ok(())
}

/// A `B x H x W` reflectance cube with per-band wavelength metadata.
///
/// Construction validates every invariant, so a `HyperCube` in hand is
/// always non-degenerate, finite and wavelength-sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube<T> {
    data: Array3<T>,
    bands: Vec<BandSpec>,
    patch_id: String,
    tile_id: String,
}

impl<T: Scalar> HyperCube<T> {
    pub fn new(
        data: Array3<T>,
        bands: Vec<BandSpec>,
        patch_id: impl Into<String>,
        tile_id: impl Into<String>,
    ) -> Result<Self> {
        let (b, h, w) = data.dim();
        if b == 0 || h == 0 || w == 0 {
            return Err(Error::validation(format!("degenerate cube dimensions {b}x{h}x{w}")));
        }
        if bands.len() != b {
            return Err(Error::validation(format!(
                "band count mismatch: data has {b} bands, metadata lists {}",
                bands.len()
            )));
        }
        validate_bands(&bands)?;
        if let Some(((bi, hi, wi), v)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite value {v} at index (band {bi}, row {hi}, col {wi})"
            )));
        }
        let patch_id = patch_id.into();
        let tile_id = tile_id.into();
        for id in [&patch_id, &tile_id] {
            if id.is_empty() || id.chars().any(char::is_whitespace) {
                return Err(Error::validation(format!("identifier {id:?} must be non-empty without whitespace")));
            }
        }
        Ok(HyperCube { data, bands, patch_id, tile_id })
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn bands(&self) -> &[BandSpec] {
        &self.bands
    }

    pub fn patch_id(&self) -> &str {
        &self.patch_id
    }

    pub fn tile_id(&self) -> &str {
        &self.tile_id
    }

    pub fn num_bands(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn band(&self, b: usize) -> ArrayView2<'_, T> {
        self.data.index_axis(Axis(0), b)
    }

    /// Spectrum of pixel `(row, col)`.
    pub fn pixel(&self, row: usize, col: usize) -> Array1<T> {
        self.data.slice(ndarray::s![.., row, col]).to_owned()
    }

    pub fn into_data(self) -> Array3<T> {
        self.data
    }

    /// Same metadata, new payload. Validates the payload again.
    pub fn with_data(&self, data: Array3<T>) -> Result<Self> {
        HyperCube::new(data, self.bands.clone(), self.patch_id.clone(), self.tile_id.clone())
    }

    pub fn with_ids(mut self, patch_id: impl Into<String>, tile_id: impl Into<String>) -> Self {
        self.patch_id = patch_id.into();
        self.tile_id = tile_id.into();
        self
    }

    /// Converts the payload to another scalar type.
    pub fn cast<U: Scalar>(&self) -> HyperCube<U> {
        HyperCube {
            data: self.data.mapv(|v| U::of(v.as_f64())),
            bands: self.bands.clone(),
            patch_id: self.patch_id.clone(),
            tile_id: self.tile_id.clone(),
        }
    }
}

/// Writes `cube` in the `HSC1` format. Payload values are stored as
/// little-endian `f32`, so the round trip is bit-exact for `f32` cubes.
pub fn save_cube<T: Scalar>(cube: &HyperCube<T>, path: impl AsRef<Path>) -> Result<()> {
    // Re-check invariants in case the cube was produced by unchecked code.
    validate_bands(cube.bands())?;
    let (b, h, w) = cube.data.dim();
    let mut out = BufWriter::new(fs::File::create(path.as_ref())?);
    writeln!(out, "HSC1 {b} {h} {w}")?;
    for band in cube.bands() {
        writeln!(out, "{} {}", band.center_nm, band.fwhm_nm)?;
    }
    writeln!(out, "patch={} tile={}", cube.patch_id, cube.tile_id)?;
    let mut buf = Vec::with_capacity(b * h * w * 4);
    for v in cube.data.iter() {
        buf.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn load_cube<T: Scalar>(path: impl AsRef<Path>) -> Result<HyperCube<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut cursor = 0usize;
    let mut next_line = |what: &str| -> Result<String> {
        let rest = &bytes[cursor..];
        let end = rest
            .iter()
            .position(|&c| c == b'\n')
            .ok_or_else(|| Error::format(path, format!("truncated header while reading {what}")))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::format(path, format!("non-UTF-8 {what}")))?
            .to_string();
        cursor += end + 1;
        Ok(line)
    };

    let header = next_line("header")?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "HSC1" {
        return Err(Error::format(path, format!("malformed header {header:?}")));
    }
    let dim = |s: &str| -> Result<usize> {
        s.parse::<usize>().map_err(|_| Error::format(path, format!("bad dimension {s:?} in header")))
    };
    let (nb, nh, nw) = (dim(fields[1])?, dim(fields[2])?, dim(fields[3])?);
    if nb == 0 || nh == 0 || nw == 0 {
        return Err(Error::format(path, format!("degenerate cube dimensions {nb}x{nh}x{nw}")));
    }

    let mut bands = Vec::with_capacity(nb);
    let ids_line = loop {
        let line = next_line("band list")?;
        if line.starts_with("patch=") {
            break line;
        }
        let mut parts = line.split_whitespace();
        let (Some(c), Some(f), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::format(path, format!("malformed band line {line:?}")));
        };
        let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::format(path, format!("bad number {s:?}")));
        bands.push(BandSpec { center_nm: parse(c)?, fwhm_nm: parse(f)? });
        if bands.len() > nb {
            return Err(Error::format(path, format!("band count mismatch: header declares {nb}, found more")));
        }
    };
    if bands.len() != nb {
        return Err(Error::format(
            path,
            format!("band count mismatch: header declares {nb}, found {}", bands.len()),
        ));
    }

    let mut patch_id = None;
    let mut tile_id = None;
    for tok in ids_line.split_whitespace() {
        if let Some(v) = tok.strip_prefix("patch=") {
            patch_id = Some(v.to_string());
        } else if let Some(v) = tok.strip_prefix("tile=") {
            tile_id = Some(v.to_string());
        }
    }
    let (Some(patch_id), Some(tile_id)) = (patch_id, tile_id) else {
        return Err(Error::format(path, format!("malformed id line {ids_line:?}")));
    };

    let payload = &bytes[cursor..];
    let expected = nb * nh * nw * 4;
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("dimension mismatch: payload has {} bytes, expected {expected}", payload.len()),
        ));
    }
    let values: Vec<T> = payload
        .chunks_exact(4)
        .map(|c| T::of_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let data = Array3::from_shape_vec((nb, nh, nw), values).expect("length checked above");
    HyperCube::new(data, bands, patch_id, tile_id).map_err(|e| match e {
        Error::Validation(msg) => Error::format(path, msg),
        other => other,
    })
}
