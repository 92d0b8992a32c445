//! Reconstruction and regression metrics.
//!
//! Everything is accumulated in `f64`. Cube metrics expect `(B, H, W)`
//! arrays; `mae_metric`/`mse_metric` accept any dimensionality.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView, ArrayView2, ArrayView3, Axis, Dimension};

use crate::data::srf::csv_err;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// SSIM stabilizers, used verbatim (not scaled by the data range).
pub const SSIM_C1: f64 = 0.01;
pub const SSIM_C2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("metric inputs have shapes {a:?} and {b:?}")));
    }
    if a.iter().product::<usize>() == 0 {
        return Err(Error::shape("metric inputs are empty"));
    }
    Ok(())
}

pub fn mae_metric<T: Scalar, D: Dimension>(x: ArrayView<T, D>, y: ArrayView<T, D>) -> Result<f64> {
    check_shape(x.shape(), y.shape())?;
    let sum: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum();
    Ok(sum / x.len() as f64)
}

pub fn mse_metric<T: Scalar, D: Dimension>(x: ArrayView<T, D>, y: ArrayView<T, D>) -> Result<f64> {
    check_shape(x.shape(), y.shape())?;
    let sum: f64 = x
        .iter()
        .zip(y.iter())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(sum / x.len() as f64)
}

/// `10 log10(max(X)^2 / MSE)` with `max` over the ground truth `x`.
/// Returns `+inf` when the inputs are identical.
pub fn psnr_metric<T: Scalar, D: Dimension>(x: ArrayView<T, D>, y: ArrayView<T, D>) -> Result<f64> {
    let mse = mse_metric(x.view(), y)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = x.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Effective window: `min(H, W, 11)`, rounded down to an odd size.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let k = h.min(w).min(SSIM_WINDOW);
    if k.is_multiple_of(2) {
        k - 1
    } else {
        k
    }
}

/// Valid-mode separable Gaussian filtering.
fn filter(img: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let k = kernel.len();
    let (h, w) = img.dim();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            rows[[i, j]] = (0..k).map(|t| kernel[t] * img[[i, j + t]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            out[[i, j]] = (0..k).map(|t| kernel[t] * rows[[i + t, j]]).sum();
        }
    }
    out
}

/// SSIM of one band, averaged over all valid window positions.
pub fn ssim_band<T: Scalar>(x: ArrayView2<T>, y: ArrayView2<T>) -> Result<f64> {
    check_shape(x.shape(), y.shape())?;
    let (h, w) = x.dim();
    let kernel = gaussian_kernel(ssim_window(h, w), SSIM_SIGMA);
    let xf = x.mapv(|v| v.as_f64());
    let yf = y.mapv(|v| v.as_f64());
    let mu_x = filter(&xf, &kernel);
    let mu_y = filter(&yf, &kernel);
    let xx = filter(&(&xf * &xf), &kernel);
    let yy = filter(&(&yf * &yf), &kernel);
    let xy = filter(&(&xf * &yf), &kernel);
    let mut total = 0.0;
    for ((((&mx, &my), &sxx), &syy), &sxy) in mu_x.iter().zip(&mu_y).zip(&xx).zip(&yy).zip(&xy) {
        let vx = sxx - mx * mx;
        let vy = syy - my * my;
        let cov = sxy - mx * my;
        total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(total / mu_x.len() as f64)
}

/// Mean per-band SSIM of two `(B, H, W)` cubes.
pub fn ssim_metric<T: Scalar>(x: ArrayView3<T>, y: ArrayView3<T>) -> Result<f64> {
    check_shape(x.shape(), y.shape())?;
    let mut total = 0.0;
    for (bx, by) in x.axis_iter(Axis(0)).zip(y.axis_iter(Axis(0))) {
        total += ssim_band(bx, by)?;
    }
    Ok(total / x.dim().0 as f64)
}

/// Mean spectral angle in degrees and the number of pixels skipped for a zero spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralAngle {
    pub mean_deg: f64,
    pub skipped: usize,
}

pub fn sam_metric<T: Scalar>(x: ArrayView3<T>, y: ArrayView3<T>) -> Result<SpectralAngle> {
    check_shape(x.shape(), y.shape())?;
    let (nb, nh, nw) = x.dim();
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for i in 0..nh {
        for j in 0..nw {
            let (mut nx, mut ny) = (0.0, 0.0);
            for b in 0..nb {
                let (a, c) = (x[[b, i, j]].as_f64(), y[[b, i, j]].as_f64());
                nx += a * a;
                ny += c * c;
            }
            if nx == 0.0 || ny == 0.0 {
                skipped += 1;
                continue;
            }
            // 2·atan2(|u-v|, |u+v|) on unit vectors; acos loses precision near 0.
            let (nx, ny) = (nx.sqrt(), ny.sqrt());
            let (mut diff, mut sum) = (0.0, 0.0);
            for b in 0..nb {
                let u = x[[b, i, j]].as_f64() / nx;
                let v = y[[b, i, j]].as_f64() / ny;
                diff += (u - v) * (u - v);
                sum += (u + v) * (u + v);
            }
            total += (2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees();
            used += 1;
        }
    }
    let mean_deg = if used == 0 { f64::NAN } else { total / used as f64 };
    Ok(SpectralAngle { mean_deg, skipped })
}

pub fn rmse_metric(y: &[f64], yhat: &[f64]) -> Result<f64> {
    let y = ArrayView::from(y);
    Ok(mse_metric(y, ArrayView::from(yhat))?.sqrt())
}

/// Coefficient of determination; `None` when the labels have zero variance.
pub fn r2_metric(y: &[f64], yhat: &[f64]) -> Result<Option<f64>> {
    check_shape(&[y.len()], &[yhat.len()])?;
    if y.len() < 2 {
        return Ok(None);
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    let ss_tot: f64 = y.iter().map(|a| (a - mean) * (a - mean)).sum();
    if ss_tot == 0.0 {
        return Ok(None);
    }
    Ok(Some(1.0 - ss_res / ss_tot))
}

/// Metrics of one reconstructed image.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconRow {
    pub patch_id: String,
    pub mae: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub sam_deg: f64,
}

impl ReconRow {
    pub fn compute<T: Scalar>(patch_id: &str, truth: ArrayView3<T>, recon: ArrayView3<T>) -> Result<Self> {
        Ok(ReconRow {
            patch_id: patch_id.to_string(),
            mae: mae_metric(truth.view(), recon.view())?,
            psnr_db: psnr_metric(truth.view(), recon.view())?,
            ssim: ssim_metric(truth.view(), recon.view())?,
            sam_deg: sam_metric(truth, recon)?.mean_deg,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReconReport {
    pub rows: Vec<ReconRow>,
}

impl ReconReport {
    pub fn push(&mut self, row: ReconRow) {
        self.rows.push(row);
    }

    /// Mean of each metric over the per-image rows.
    pub fn aggregate(&self) -> ReconRow {
        let n = self.rows.len() as f64;
        let mean = |f: fn(&ReconRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        ReconRow {
            patch_id: "AGGREGATE".into(),
            mae: mean(|r| r.mae),
            psnr_db: mean(|r| r.psnr_db),
            ssim: mean(|r| r.ssim),
            sam_deg: mean(|r| r.sam_deg),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        writeln!(f, "patch_id,mae,psnr_db,ssim,sam_deg")?;
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate())) {
            writeln!(f, "{},{},{},{},{}", r.patch_id, r.mae, r.psnr_db, r.ssim, r.sam_deg)?;
        }
        f.flush()?;
        Ok(())
    }

    /// Reads per-image rows; an `AGGREGATE` row, if present, is dropped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
        let headers = r.headers().map_err(csv_err)?.clone();
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::format(path, format!("missing column {name}")))
        };
        let idx = [col("patch_id")?, col("mae")?, col("psnr_db")?, col("ssim")?, col("sam_deg")?];
        let mut report = ReconReport::default();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let num = |k: usize| -> Result<f64> {
                rec[idx[k]].parse().map_err(|_| Error::Parse { line: i + 2, msg: format!("bad number {:?}", &rec[idx[k]]) })
            };
            if &rec[idx[0]] == "AGGREGATE" {
                continue;
            }
            report.push(ReconRow { patch_id: rec[idx[0]].to_string(), mae: num(1)?, psnr_db: num(2)?, ssim: num(3)?, sam_deg: num(4)? });
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionReport {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    /// `NaN` when label variance is zero.
    pub r2: f64,
}

impl RegressionReport {
    pub fn compute(y: &[f64], yhat: &[f64]) -> Result<Self> {
        let mse = mse_metric(ArrayView::from(y), ArrayView::from(yhat))?;
        Ok(RegressionReport {
            mae: mae_metric(ArrayView::from(y), ArrayView::from(yhat))?,
            mse,
            rmse: mse.sqrt(),
            r2: r2_metric(y, yhat)?.unwrap_or(f64::NAN),
        })
    }

    pub fn save(rows: &[(String, RegressionReport)], path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        writeln!(f, "input,mae,mse,rmse,r2")?;
        for (name, r) in rows {
            writeln!(f, "{name},{},{},{},{}", r.mae, r.mse, r.rmse, r.r2)?;
        }
        f.flush()?;
        Ok(())
    }
}
