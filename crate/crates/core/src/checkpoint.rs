//! Versioned parameter container shared by the autoencoder and the regressor.
//!
//! Layout: the line `SBCK 1`, a UTF-8 header of `[section]` lines and
//! `key=value` pairs terminated by `END_HEADER`, then a little-endian `u32`
//! tensor count followed by tensors, each written as
//! `u32 name_len, name, u32 ndim, u32 dims[ndim], f32 values[prod(dims)]`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::data::cube::BandSpec;
use crate::error::{Error, Result};
use crate::nn::Param;
use crate::preprocess::BandStats;
use crate::scalar::Scalar;

const MAGIC: &str = "SBCK 1";

pub type Section = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub sections: BTreeMap<String, Section>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Container {
    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections.get(name).ok_or_else(|| Error::validation(format!("checkpoint lacks section [{name}]")))
    }

    pub fn push_param<T: Scalar>(&mut self, name: &str, p: &Param<T>) {
        let dims = p.value.shape().to_vec();
        self.tensors.push((name.to_string(), dims, p.value.iter().map(|v| v.to_f32_lossy()).collect()));
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "{MAGIC}")?;
        for (name, sec) in &self.sections {
            writeln!(out, "[{name}]")?;
            for (k, v) in sec {
                if k.contains(['=', '\n']) || v.contains('\n') {
                    return Err(Error::validation(format!("header entry {k:?} cannot be encoded")));
                }
                writeln!(out, "{k}={v}")?;
            }
        }
        writeln!(out, "END_HEADER")?;
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, dims, values) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for &d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        let bad = |m: &str| Error::format(path, m.to_string());
        let end_marker = b"\nEND_HEADER\n";
        let header_end = bytes
            .windows(end_marker.len())
            .position(|w| w == end_marker)
            .ok_or_else(|| bad("missing END_HEADER"))?;
        let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad("header is not UTF-8"))?;
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("not a checkpoint (bad magic or version)"));
        }
        let mut c = Container::default();
        let mut current: Option<String> = None;
        for line in lines {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                c.sections.entry(name.to_string()).or_default();
                current = Some(name.to_string());
            } else if let Some((k, v)) = line.split_once('=') {
                let sec = current.as_ref().ok_or_else(|| bad("key outside section"))?;
                c.sections.get_mut(sec).expect("created above").insert(k.to_string(), v.to_string());
            } else if !line.is_empty() {
                return Err(bad("malformed header line"));
            }
        }
        let mut pos = header_end + end_marker.len();
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated tensor data"))?;
            pos += n;
            Ok(s)
        };
        let u32_at = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize;
        let count = u32_at(take(4)?);
        for _ in 0..count {
            let name_len = u32_at(take(4)?);
            let name = String::from_utf8(take(name_len)?.to_vec()).map_err(|_| bad("tensor name not UTF-8"))?;
            let ndim = u32_at(take(4)?);
            let dims: Vec<usize> = (0..ndim).map(|_| take(4).map(u32_at)).collect::<Result<_>>()?;
            let n: usize = dims.iter().product();
            let raw = take(4 * n)?;
            let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            c.tensors.push((name, dims, values));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensors"));
        }
        Ok(c)
    }

    /// Copies stored tensors into `params`, matching by name and shape.
    pub fn fill_params<T: Scalar>(&self, params: Vec<(String, &mut Param<T>)>) -> Result<()> {
        let stored: BTreeMap<&str, (&Vec<usize>, &Vec<f32>)> =
            self.tensors.iter().map(|(n, d, v)| (n.as_str(), (d, v))).collect();
        if stored.len() != params.len() {
            return Err(Error::validation(format!(
                "checkpoint has {} tensors, model expects {}",
                stored.len(),
                params.len()
            )));
        }
        for (name, p) in params {
            let (dims, values) = stored.get(name.as_str()).ok_or_else(|| Error::validation(format!("missing tensor {name}")))?;
            if dims.as_slice() != p.value.shape() {
                return Err(Error::validation(format!("tensor {name} has shape {dims:?}, expected {:?}", p.value.shape())));
            }
            p.value = Array2::from_shape_vec(p.value.raw_dim(), values.iter().map(|&v| T::of_f32(v)).collect())
                .expect("shape checked");
            p.zero_grad();
        }
        Ok(())
    }
}

fn join_f64(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn split_f64(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|x| x.parse().map_err(|_| Error::validation(format!("bad number {x:?} in checkpoint")))).collect()
}

/// Band list plus frozen statistics as a header section.
pub fn stats_section(stats: &BandStats) -> Section {
    let mut s = Section::new();
    s.insert("centers".into(), join_f64(stats.bands().iter().map(|b| b.center_nm)));
    s.insert("fwhms".into(), join_f64(stats.bands().iter().map(|b| b.fwhm_nm)));
    s.insert("means".into(), join_f64(stats.means()));
    s.insert("stds".into(), join_f64(stats.stds()));
    s
}

pub fn stats_from_section(sec: &Section) -> Result<BandStats> {
    let get = |k: &str| sec.get(k).ok_or_else(|| Error::validation(format!("stats section lacks {k}"))).and_then(|v| split_f64(v));
    let centers = get("centers")?;
    let fwhms = get("fwhms")?;
    if centers.len() != fwhms.len() {
        return Err(Error::validation("band centers and widths differ in length"));
    }
    let bands = centers.into_iter().zip(fwhms).map(|(c, f)| BandSpec { center_nm: c, fwhm_nm: f }).collect();
    BandStats::from_moments(bands, &get("means")?, &get("stds")?)
}
