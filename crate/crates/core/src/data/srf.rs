//! Tabulated spectral response functions of a target (multispectral) sensor.

use std::path::Path;

use crate::data::cube::{validate_bands, BandSpec};
use crate::error::{Error, Result};

/// One target band: its nominal spec plus tabulated `(wavelength_nm, response)` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SrfBand {
    pub name: String,
    pub spec: BandSpec,
    pub samples: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrfTable {
    bands: Vec<SrfBand>,
}

impl SrfTable {
    pub fn new(bands: Vec<SrfBand>) -> Result<Self> {
        let specs: Vec<BandSpec> = bands.iter().map(|b| b.spec).collect();
        validate_bands(&specs)?;
        for band in &bands {
            if band.samples.is_empty() {
                return Err(Error::validation(format!("SRF band {} has no samples", band.name)));
            }
            for &(wl, r) in &band.samples {
                if !(r >= 0.0 && r.is_finite() && wl.is_finite()) {
                    return Err(Error::validation(format!(
                        "SRF band {}: invalid sample ({wl} nm, {r})",
                        band.name
                    )));
                }
            }
            if band.samples.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(Error::validation(format!(
                    "SRF band {}: sample wavelengths not strictly increasing",
                    band.name
                )));
            }
        }
        Ok(SrfTable { bands })
    }

    pub fn bands(&self) -> &[SrfBand] {
        &self.bands
    }

    pub fn target_bands(&self) -> Vec<BandSpec> {
        self.bands.iter().map(|b| b.spec).collect()
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }

    /// Drops the named bands, e.g. a band with no source coverage.
    pub fn without(&self, names: &[&str]) -> Result<Self> {
        SrfTable::new(self.bands.iter().filter(|b| !names.contains(&b.name.as_str())).cloned().collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
        let headers = reader.headers().map_err(csv_err)?.clone();
        let want = ["band_name", "center_nm", "fwhm_nm", "sample_nm", "response"];
        if headers.iter().collect::<Vec<_>>() != want {
            return Err(Error::format(path, format!("expected columns {}", want.join(","))));
        }
        let mut bands: Vec<SrfBand> = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(csv_err)?;
            let num = |k: usize| -> Result<f64> {
                rec[k].parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    msg: format!("column {} is not a number: {:?}", want[k], &rec[k]),
                })
            };
            let name = rec[0].to_string();
            let spec = BandSpec { center_nm: num(1)?, fwhm_nm: num(2)? };
            let sample = (num(3)?, num(4)?);
            match bands.last_mut() {
                Some(last) if last.name == name => last.samples.push(sample),
                _ => {
                    if bands.iter().any(|b| b.name == name) {
                        return Err(Error::Parse { line, msg: format!("rows of band {name} are not contiguous") });
                    }
                    bands.push(SrfBand { name, spec, samples: vec![sample] });
                }
            }
        }
        SrfTable::new(bands).map_err(|e| match e {
            Error::Validation(msg) => Error::format(path, msg),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
        writer
            .write_record(["band_name", "center_nm", "fwhm_nm", "sample_nm", "response"])
            .map_err(csv_err)?;
        for band in &self.bands {
            for &(wl, r) in &band.samples {
                writer
                    .write_record([
                        band.name.clone(),
                        band.spec.center_nm.to_string(),
                        band.spec.fwhm_nm.to_string(),
                        wl.to_string(),
                        r.to_string(),
                    ])
                    .map_err(csv_err)?;
            }
        }
        writer.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse { line, msg: format!("{kind:?}") },
    }
}
