//! Gas concentration labels keyed by patch id.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::srf::csv_err;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GasKind {
    No2,
    Ch4,
    Co2,
}

impl GasKind {
    /// Native unit of the product the labels come from.
    pub fn units(self) -> &'static str {
        match self {
            GasKind::No2 => "mol/m2",
            GasKind::Ch4 => "ppb",
            GasKind::Co2 => "ppm",
        }
    }

    fn accepts_unit(self, unit: &str) -> bool {
        let u = unit.trim().to_ascii_lowercase();
        match self {
            GasKind::No2 => matches!(u.as_str(), "mol/m2" | "mol/m^2" | "mol m-2" | "mol·m⁻²" | "mol·m-2"),
            GasKind::Ch4 => u == "ppb",
            GasKind::Co2 => u == "ppm",
        }
    }
}

impl fmt::Display for GasKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GasKind::No2 => "NO2",
            GasKind::Ch4 => "CH4",
            GasKind::Co2 => "CO2",
        })
    }
}

impl FromStr for GasKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "NO2" => Ok(GasKind::No2),
            "CH4" => Ok(GasKind::Ch4),
            "CO2" => Ok(GasKind::Co2),
            _ => Err(Error::validation(format!("unknown gas {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GasLabelSet {
    pub gas: GasKind,
    values: BTreeMap<String, f64>,
    /// Rows dropped because the concentration was blank.
    pub skipped: usize,
}

impl GasLabelSet {
    pub fn new(gas: GasKind) -> Self {
        GasLabelSet { gas, values: BTreeMap::new(), skipped: 0 }
    }

    pub fn insert(&mut self, patch_id: impl Into<String>, value: f64) -> Result<()> {
        let patch_id = patch_id.into();
        if !value.is_finite() {
            return Err(Error::validation(format!("label for {patch_id} is not finite")));
        }
        if self.values.contains_key(&patch_id) {
            return Err(Error::validation(format!("duplicate label for patch {patch_id}")));
        }
        self.values.insert(patch_id, value);
        Ok(())
    }

    pub fn get(&self, patch_id: &str) -> Option<f64> {
        self.values.get(patch_id).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.values.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
        w.write_record(["patch_id", "gas", "units", "value"]).map_err(csv_err)?;
        let gas = self.gas.to_string();
        for (p, v) in self.iter() {
            w.write_record([p, gas.as_str(), self.gas.units(), v.to_string().as_str()]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a `patch_id,gas,units,value` CSV, keeping rows for `gas`.
///
/// Blank values are skipped and counted; malformed rows and duplicate patch
/// ids are errors.
pub fn load_labels(path: impl AsRef<Path>, gas: GasKind) -> Result<GasLabelSet> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_path(path).map_err(csv_err)?;
    if r.headers().map_err(csv_err)?.iter().collect::<Vec<_>>() != ["patch_id", "gas", "units", "value"] {
        return Err(Error::format(path, "expected columns patch_id,gas,units,value"));
    }
    let mut set = GasLabelSet::new(gas);
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(csv_err)?;
        if rec.len() != 4 {
            return Err(Error::Parse { line, msg: format!("expected 4 fields, found {}", rec.len()) });
        }
        let row_gas: GasKind = rec[1].parse().map_err(|_| Error::Parse { line, msg: format!("unknown gas {:?}", &rec[1]) })?;
        if row_gas != gas {
            continue;
        }
        if !gas.accepts_unit(&rec[2]) {
            return Err(Error::Parse { line, msg: format!("units {:?} inconsistent with {gas}", &rec[2]) });
        }
        if rec[3].is_empty() {
            set.skipped += 1;
            continue;
        }
        let value: f64 = rec[3]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::Parse { line, msg: format!("unparseable value {:?}", &rec[3]) })?;
        set.insert(&rec[0], value).map_err(|_| Error::Parse {
            line,
            msg: format!("duplicate label for patch {}", &rec[0]),
        })?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        std::fs::write(&path, content).unwrap();
        (dir, path)
    }

    #[test]
    fn three_valid_rows() {
        let (_d, p) = write("patch_id,gas,units,value\na,CH4,ppb,1850\nb,CH4,ppb,1870.5\nc,CH4,ppb,1900\n");
        let set = load_labels(&p, GasKind::Ch4).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.get("b"), Some(1870.5));
    }

    #[test]
    fn blank_value_is_skipped_and_counted() {
        let (_d, p) = write("patch_id,gas,units,value\na,CO2,ppm,410\nb,CO2,ppm,\nc,CO2,ppm,415\n");
        let set = load_labels(&p, GasKind::Co2).unwrap();
        assert_eq!((set.len(), set.skipped), (2, 1));
    }

    #[test]
    fn duplicate_is_error() {
        let (_d, p) = write("patch_id,gas,units,value\na,NO2,mol/m2,1e-4\na,NO2,mol/m2,2e-4\n");
        let err = load_labels(&p, GasKind::No2).unwrap_err().to_string();
        assert!(err.contains("duplicate label") && err.contains("line 3"), "{err}");
    }

    #[test]
    fn garbage_value_reports_line() {
        let (_d, p) = write("patch_id,gas,units,value\na,CH4,ppb,1850\nb,CH4,ppb,abc\n");
        let err = load_labels(&p, GasKind::Ch4).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn wrong_unit_rejected() {
        let (_d, p) = write("patch_id,gas,units,value\na,CH4,ppm,1.85\n");
        assert!(load_labels(&p, GasKind::Ch4).is_err());
    }
}
