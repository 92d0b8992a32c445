//! Tokenization of cubes into `b x p x p` patches, the spatial-spectral
//! positional encoding, and band-wise masking.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3, ArrayView1, ArrayView2};
use rand::Rng;

use crate::data::cube::{BandSpec, HyperCube, LAMBDA_MAX_NM, LAMBDA_MIN_NM};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Grid position of a token: patch column `x`, patch row `y`, spectral group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenCoord {
    pub x: usize,
    pub y: usize,
    pub group: usize,
}

/// Shape bookkeeping shared by [`patchify`] and [`reassemble`].
#[derive(Debug, Clone, PartialEq)]
pub struct PatchLayout {
    pub band_group: usize,
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub bands: Vec<BandSpec>,
    pub patch_id: String,
    pub tile_id: String,
}

impl PatchLayout {
    pub fn groups(&self) -> usize {
        self.bands.len() / self.band_group
    }

    pub fn positions(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn token_len(&self) -> usize {
        self.band_group * self.patch * self.patch
    }

    pub fn num_tokens(&self) -> usize {
        self.groups() * self.positions()
    }

    /// Mean center wavelength of each group's bands.
    pub fn group_wavelengths(&self) -> Vec<f64> {
        group_wavelengths(&self.bands, self.band_group)
    }

    /// Row of a token in [`Patches::values`]: position-major, then group.
    pub fn index(&self, c: TokenCoord) -> usize {
        (c.y * self.grid_w + c.x) * self.groups() + c.group
    }
}

pub fn group_wavelengths(bands: &[BandSpec], band_group: usize) -> Vec<f64> {
    bands.chunks(band_group).map(|g| g.iter().map(|b| b.center_nm).sum::<f64>() / g.len() as f64).collect()
}

/// Flattened patches, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches<T> {
    pub layout: PatchLayout,
    pub coords: Vec<TokenCoord>,
    pub values: Array2<T>,
}

/// Splits a cube into `(B/b)(H/p)(W/p)` patches flattened band-major, then row, then column.
pub fn patchify<T: Scalar>(cube: &HyperCube<T>, band_group: usize, patch: usize) -> Result<Patches<T>> {
    let (nb, nh, nw) = cube.data().dim();
    if band_group == 0 || patch == 0 || nb % band_group != 0 || nh % patch != 0 || nw % patch != 0 {
        return Err(Error::config(format!(
            "cannot tile a {nb}x{nh}x{nw} cube into {band_group}x{patch}x{patch} patches"
        )));
    }
    let layout = PatchLayout {
        band_group,
        patch,
        grid_h: nh / patch,
        grid_w: nw / patch,
        bands: cube.bands().to_vec(),
        patch_id: cube.patch_id().to_string(),
        tile_id: cube.tile_id().to_string(),
    };
    let groups = layout.groups();
    let mut values = Array2::zeros((layout.num_tokens(), layout.token_len()));
    let mut coords = Vec::with_capacity(layout.num_tokens());
    let data = cube.data();
    for y in 0..layout.grid_h {
        for x in 0..layout.grid_w {
            for group in 0..groups {
                let c = TokenCoord { x, y, group };
                let row = layout.index(c);
                let mut k = 0;
                for bi in 0..band_group {
                    for r in 0..patch {
                        for col in 0..patch {
                            values[[row, k]] = data[[group * band_group + bi, y * patch + r, x * patch + col]];
                            k += 1;
                        }
                    }
                }
                coords.push(c);
            }
        }
    }
    Ok(Patches { layout, coords, values })
}

/// Places per-token values back into a cube by coordinate. Every token of
/// the layout must appear exactly once; row order is irrelevant.
pub fn reassemble<T: Scalar>(layout: &PatchLayout, coords: &[TokenCoord], values: ArrayView2<T>) -> Result<HyperCube<T>> {
    if coords.len() != values.nrows() || values.ncols() != layout.token_len() {
        return Err(Error::shape(format!(
            "{} coordinates for {}x{} predictions (token length {})",
            coords.len(),
            values.nrows(),
            values.ncols(),
            layout.token_len()
        )));
    }
    let (b, p, groups) = (layout.band_group, layout.patch, layout.groups());
    let mut seen = vec![false; layout.num_tokens()];
    let mut data = Array3::zeros((layout.bands.len(), layout.grid_h * p, layout.grid_w * p));
    for (row, &c) in coords.iter().enumerate() {
        if c.x >= layout.grid_w || c.y >= layout.grid_h || c.group >= groups {
            return Err(Error::shape(format!("token coordinate {c:?} outside the layout")));
        }
        let idx = layout.index(c);
        if std::mem::replace(&mut seen[idx], true) {
            return Err(Error::shape(format!("duplicate token coordinate {c:?}")));
        }
        let mut k = 0;
        for bi in 0..b {
            for r in 0..p {
                for col in 0..p {
                    data[[c.group * b + bi, c.y * p + r, c.x * p + col]] = values[[row, k]];
                    k += 1;
                }
            }
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        let pos = missing / groups;
        let c = TokenCoord { x: pos % layout.grid_w, y: pos / layout.grid_w, group: missing % groups };
        return Err(Error::shape(format!("missing token coordinate {c:?}")));
    }
    HyperCube::new(data, layout.bands.clone(), layout.patch_id.clone(), layout.tile_id.clone())
}

/// Maps a wavelength in `[400, 2500]` nm to `[0, n_spatial]`.
pub fn scale_wavelength(lambda_nm: f64, n_spatial: usize) -> Result<f64> {
    if !(LAMBDA_MIN_NM..=LAMBDA_MAX_NM).contains(&lambda_nm) {
        return Err(Error::validation(format!("wavelength {lambda_nm} nm outside [400, 2500]")));
    }
    Ok((lambda_nm - LAMBDA_MIN_NM) / (LAMBDA_MAX_NM - LAMBDA_MIN_NM) * n_spatial as f64)
}

/// Interleaved sin/cos encoding of a scalar position over `dim` channels.
pub fn sinusoid(position: f64, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = (position / freq).sin();
        out[2 * i + 1] = (position / freq).cos();
    }
    out
}

/// 2-D spatial encoding: the first half of the channels encodes `x`, the
/// second half `y`, each with a `d/2`-channel sinusoid.
pub fn spatial_encoding(x: usize, y: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = sinusoid(x as f64, half);
    out.extend(sinusoid(y as f64, half));
    out
}

pub fn spectral_encoding(lambda_scaled: f64, dim: usize) -> Vec<f64> {
    sinusoid(lambda_scaled, dim)
}

/// `E_spatial(x, y) + E_spectral(lambda_scaled)`.
pub fn positional_encoding(x: usize, y: usize, lambda_nm: f64, dim: usize, n_spatial: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(4) {
        return Err(Error::config(format!("encoding dimension {dim} must be divisible by 4")));
    }
    let spectral = spectral_encoding(scale_wavelength(lambda_nm, n_spatial)?, dim);
    Ok(spatial_encoding(x, y, dim).into_iter().zip(spectral).map(|(a, b)| a + b).collect())
}

/// Number of masked groups: `floor(p_mask * groups)`, keeping one group visible.
pub fn mask_count(groups: usize, p_mask: f64) -> usize {
    ((p_mask * groups as f64).floor() as usize).min(groups.saturating_sub(1))
}

/// Draws `floor(p_mask * groups)` distinct group indices uniformly, sorted.
pub fn sample_band_mask<R: Rng + ?Sized>(groups: usize, p_mask: f64, rng: &mut R) -> Vec<usize> {
    let k = mask_count(groups, p_mask);
    let mut picked = rand::seq::index::sample(rng, groups, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Embedded tokens with their positional encodings kept separately.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<T> {
    pub embeddings: Array2<T>,
    pub positions: Array2<T>,
    pub coords: Vec<TokenCoord>,
    /// Per spectral group: whether the group is hidden behind the mask token.
    pub masked: Vec<bool>,
}

impl<T: Scalar> TokenGrid<T> {
    /// `Z = E + E_pos` for every token.
    pub fn tokens(&self) -> Array2<T> {
        &self.embeddings + &self.positions
    }

    pub fn masked_groups(&self) -> Vec<usize> {
        self.masked.iter().enumerate().filter(|(_, &m)| m).map(|(g, _)| g).collect()
    }

    /// Indices of tokens whose group is visible.
    pub fn visible_rows(&self) -> Vec<usize> {
        self.coords.iter().enumerate().filter(|(_, c)| !self.masked[c.group]).map(|(i, _)| i).collect()
    }
}

/// Replaces the embedding of every token in a masked group with
/// `mask_token`; positional encodings are kept. The same groups are masked
/// at every spatial position.
pub fn apply_band_mask<T: Scalar, R: Rng + ?Sized>(
    grid: &TokenGrid<T>,
    mask_token: ArrayView1<T>,
    p_mask: f64,
    rng: &mut R,
) -> Result<TokenGrid<T>> {
    if !(0.0..1.0).contains(&p_mask) {
        return Err(Error::config(format!("mask fraction {p_mask} outside [0, 1)")));
    }
    let groups = grid.masked.len();
    let chosen: BTreeSet<usize> = sample_band_mask(groups, p_mask, rng).into_iter().collect();
    Ok(mask_groups(grid, mask_token, &chosen))
}

pub(crate) fn mask_groups<T: Scalar>(grid: &TokenGrid<T>, mask_token: ArrayView1<T>, chosen: &BTreeSet<usize>) -> TokenGrid<T> {
    let mut out = grid.clone();
    for (row, c) in grid.coords.iter().enumerate() {
        if chosen.contains(&c.group) {
            out.embeddings.row_mut(row).assign(&mask_token);
        }
    }
    for g in chosen {
        out.masked[*g] = true;
    }
    out
}
