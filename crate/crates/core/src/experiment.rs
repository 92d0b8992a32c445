//! Experiment configuration, dataset plumbing, the masked-reconstruction
//! comparison, the data-efficiency sweep and report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::baselines::{gaussian_sampling_baseline, linear_interpolation_baseline};
use crate::checkpoint::Section;
use crate::data::srf::csv_err;
use crate::data::{load_cube, save_cube, GasKind, HyperCube, Split, SplitAssignment, SplitMode, SplitRatios, SrfTable};
use crate::error::{Error, Result};
use crate::ghg::RegressorConfig;
use crate::mae::{
    composite_masked, finetune, groups_to_bands, predict_masked, reconstruct, sample_band_mask, CubePair, MaeCheckpoint,
    ModelConfig,
};
use crate::metrics::{ReconReport, ReconRow};
use crate::scalar::Scalar;
use crate::srf_projection::{build_weight_matrix, project_cube};
use crate::synth::{AbsorptionLine, LabelModel, SceneConfig};

/// Flat `key = value` text with `[section]` headers. `#` starts a comment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    sections: BTreeMap<String, Section>,
}

fn empty_section() -> &'static Section {
    static EMPTY: std::sync::OnceLock<Section> = std::sync::OnceLock::new();
    EMPTY.get_or_init(Section::new)
}

fn parse_value<V: std::str::FromStr>(section: &str, key: &str, v: &str) -> Result<V> {
    v.trim().parse().map_err(|_| Error::config(format!("invalid value {v:?} for {section}.{key}")))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, Section> = BTreeMap::new();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| Error::config(format!("line {}: unterminated section header", i + 1)))?;
                current = name.trim().to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::config(format!("line {}: expected key = value", i + 1)))?;
            let prev = sections.entry(current.clone()).or_default().insert(k.trim().to_string(), v.trim().to_string());
            if prev.is_some() {
                return Err(Error::config(format!("line {}: duplicate key {}", i + 1, k.trim())));
            }
        }
        Ok(ExperimentConfig { sections })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn section(&self, name: &str) -> &Section {
        self.sections.get(name).unwrap_or_else(|| empty_section())
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections.entry(section.to_string()).or_default().insert(key.to_string(), value.into());
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.section(section).get(key).map(String::as_str)
    }

    pub fn get_or<V: std::str::FromStr>(&self, section: &str, key: &str, default: V) -> Result<V> {
        self.get(section, key).map_or(Ok(default), |v| parse_value(section, key, v))
    }

    pub fn list<V: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<V>>> {
        self.get(section, key)
            .map(|v| v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_value(section, key, s)).collect())
            .transpose()
    }

    /// Path from the `[paths]` section.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get("paths", key).map(PathBuf::from)
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key).ok_or_else(|| Error::config(format!("missing paths.{key}")))
    }

    /// Canonical serialization; equal configs give equal text.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (name, sec) in &self.sections {
            let _ = writeln!(s, "[{name}]");
            for (k, v) in sec {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut c = ModelConfig::default();
        c.apply(self.section("model"))?;
        Ok(c)
    }

    pub fn regressor_config(&self) -> Result<RegressorConfig> {
        let mut c = RegressorConfig::default();
        c.apply(self.section("regressor"))?;
        c.validate()?;
        Ok(c)
    }

    pub fn split_ratios(&self) -> Result<(SplitMode, SplitRatios)> {
        let mode = match self.get("split", "mode").unwrap_or("hard") {
            "easy" => SplitMode::Easy,
            "hard" => SplitMode::Hard,
            m => return Err(Error::config(format!("unknown split mode {m:?}"))),
        };
        let d = SplitRatios::default();
        let r = SplitRatios::new(
            self.get_or("split", "train", d.train)?,
            self.get_or("split", "val", d.val)?,
            self.get_or("split", "test", d.test)?,
        )?;
        Ok((mode, r))
    }

    /// `[scene]`; `lines` is a comma list of `center:width:max_depth`.
    pub fn scene_config(&self) -> Result<SceneConfig> {
        let mut c = SceneConfig::default();
        for (k, v) in self.section("scene") {
            let p = |v: &str| -> Result<f64> { parse_value("scene", k, v) };
            let u = |v: &str| -> Result<usize> { parse_value("scene", k, v) };
            match k.as_str() {
                "bands" => c.bands = u(v)?,
                "height" => c.height = u(v)?,
                "width" => c.width = u(v)?,
                "lambda_min_nm" => c.lambda_min_nm = p(v)?,
                "lambda_max_nm" => c.lambda_max_nm = p(v)?,
                "fwhm_factor" => c.fwhm_factor = p(v)?,
                "endmembers" => c.endmembers = u(v)?,
                "knots" => c.knots = u(v)?,
                "blobs" => c.blobs = u(v)?,
                "blob_scale" => c.blob_scale = p(v)?,
                "noise_std" => c.noise_std = p(v)?,
                "scale" => c.scale = p(v)?,
                "illumination" => c.illumination = p(v)?,
                "scenes_per_tile" => c.scenes_per_tile = u(v)?,
                "seed" => c.seed = parse_value("scene", k, v)?,
                "lines" => {
                    c.lines = v
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| {
                            let f: Vec<f64> = s.split(':').map(p).collect::<Result<_>>()?;
                            match f.as_slice() {
                                [c, w, d] => Ok(AbsorptionLine { center_nm: *c, width_nm: *w, max_depth: *d }),
                                _ => Err(Error::config(format!("line {s:?} must be center:width:max_depth"))),
                            }
                        })
                        .collect::<Result<_>>()?
                }
                "count" => {}
                _ => return Err(Error::config(format!("unknown scene key {k:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn label_model(&self) -> Result<LabelModel> {
        let d = LabelModel::default();
        Ok(LabelModel {
            gas: self.get("labels", "gas").map_or(Ok(d.gas), str::parse::<GasKind>)?,
            line: self.get_or("labels", "line", d.line)?,
            intercept: self.get_or("labels", "intercept", d.intercept)?,
            slope: self.get_or("labels", "slope", d.slope)?,
            noise_std: self.get_or("labels", "noise_std", d.noise_std)?,
        })
    }
}

/// Every `*.hsc` file of `dir`, in file-name order.
pub fn load_cube_dir<T: Scalar>(dir: impl AsRef<Path>) -> Result<Vec<HyperCube<T>>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::validation(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "hsc"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::validation(format!("no .hsc cubes in {}", dir.display())));
    }
    files.iter().map(load_cube).collect()
}

/// Writes each cube as `<patch_id>.hsc`.
pub fn save_cube_dir<T: Scalar>(cubes: &[HyperCube<T>], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for c in cubes {
        save_cube(c, dir.join(format!("{}.hsc", c.patch_id())))?;
    }
    Ok(())
}

/// Projects every cube through `srf`.
pub fn degrade_all<T: Scalar>(cubes: &[HyperCube<T>], srf: &SrfTable) -> Result<Vec<HyperCube<T>>> {
    let first = cubes.first().ok_or_else(|| Error::validation("no cubes to degrade"))?;
    let w = build_weight_matrix(srf, first.bands())?;
    cubes.iter().map(|c| project_cube(c, &w)).collect()
}

/// `(patch_id, tile_id)` of each cube.
pub fn cube_ids<T: Scalar>(cubes: &[HyperCube<T>]) -> Vec<(String, String)> {
    cubes.iter().map(|c| (c.patch_id().to_string(), c.tile_id().to_string())).collect()
}

/// Cubes assigned to `which`.
pub fn select_split<'a, T: Scalar>(cubes: &'a [HyperCube<T>], split: &SplitAssignment, which: Split) -> Vec<&'a HyperCube<T>> {
    cubes.iter().filter(|c| split.get(c.patch_id()) == Some(which)).collect()
}

/// Pairs each hyperspectral cube with the multispectral cube of the same patch id.
pub fn pair_cubes<T: Scalar>(ms: &[HyperCube<T>], hs: &[&HyperCube<T>]) -> Result<Vec<CubePair<T>>> {
    let by_id: BTreeMap<&str, &HyperCube<T>> = ms.iter().map(|c| (c.patch_id(), c)).collect();
    hs.iter()
        .map(|h| {
            let m = by_id
                .get(h.patch_id())
                .ok_or_else(|| Error::validation(format!("no multispectral cube for patch {}", h.patch_id())))?;
            Ok(((*m).clone(), (*h).clone()))
        })
        .collect()
}

/// Indices of a uniform `fraction` of `n` items, sorted; at least one is required.
pub fn fraction_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::validation(format!("fraction {fraction} outside (0, 1]")));
    }
    let k = ((fraction * n as f64) + 1e-9).floor() as usize;
    if k == 0 {
        return Err(Error::validation(format!("fraction {fraction} of {n} training samples is empty")));
    }
    let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Per-image metrics of `recon` against the `truth` cube with the same patch id.
pub fn evaluate_reconstructions<T: Scalar>(truth: &[&HyperCube<T>], recon: &[HyperCube<T>]) -> Result<ReconReport> {
    let by_id: BTreeMap<&str, &HyperCube<T>> = recon.iter().map(|c| (c.patch_id(), c)).collect();
    let mut report = ReconReport::default();
    for t in truth {
        let r = by_id
            .get(t.patch_id())
            .ok_or_else(|| Error::validation(format!("no reconstruction for patch {}", t.patch_id())))?;
        report.push(ReconRow::compute(t.patch_id(), t.data().view(), r.data().view())?);
    }
    if report.rows.is_empty() {
        return Err(Error::validation("nothing to evaluate"));
    }
    Ok(report)
}

/// Masked reconstruction by the pretrained model and the two baselines on the
/// same masks, each scored on full cubes in raw units.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedComparison {
    pub model: ReconReport,
    pub linear: ReconReport,
    pub gaussian: ReconReport,
}

/// Masks each cube with the checkpoint's mask fraction. Visible bands of the
/// model output are replaced by the observed input, as the baselines do.
pub fn compare_masked<T: Scalar>(cubes: &[&HyperCube<T>], ckpt: &MaeCheckpoint<T>, seed: u64) -> Result<MaskedComparison> {
    let cfg = &ckpt.model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = MaskedComparison { model: ReconReport::default(), linear: ReconReport::default(), gaussian: ReconReport::default() };
    for cube in cubes {
        let groups = cube.num_bands() / cfg.band_group;
        let masked = sample_band_mask(groups, cfg.mask_fraction, &mut rng);
        let bands = groups_to_bands(&masked, cfg.band_group);
        let model = composite_masked(cube, &predict_masked(cube, &masked, ckpt)?, &bands)?;
        let linear = linear_interpolation_baseline(cube, &bands)?;
        let gaussian = gaussian_sampling_baseline(cube, &bands, &ckpt.hs_stats, &mut rng)?;
        let id = cube.patch_id();
        let truth = cube.data().view();
        out.model.push(ReconRow::compute(id, truth, model.data().view())?);
        out.linear.push(ReconRow::compute(id, truth, linear.data().view())?);
        out.gaussian.push(ReconRow::compute(id, truth, gaussian.data().view())?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Init {
    Scratch,
    Pretrained,
}

impl std::fmt::Display for Init {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Init::Scratch => "scratch",
            Init::Pretrained => "pretrained",
        })
    }
}

/// Inputs shared by every sweep cell.
pub struct SweepSetup<'a, T> {
    pub train: &'a [CubePair<T>],
    pub val: &'a [CubePair<T>],
    pub test: &'a [CubePair<T>],
    pub pretrained: &'a MaeCheckpoint<T>,
    /// Optimization settings; the architecture always comes from `pretrained`.
    pub finetune: ModelConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub fraction: f64,
    pub init: Init,
    pub seed: u64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub fraction: f64,
    pub init: Init,
    pub mean_mae: f64,
    pub std_mae: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepReport {
    pub runs: Vec<SweepRun>,
}

impl SweepReport {
    /// Mean and population standard deviation of MAE per `(fraction, init)`.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut groups: Vec<((f64, Init), Vec<f64>)> = Vec::new();
        for r in &self.runs {
            match groups.iter_mut().find(|g| g.0 == (r.fraction, r.init)) {
                Some(g) => g.1.push(r.mae),
                None => groups.push(((r.fraction, r.init), vec![r.mae])),
            }
        }
        groups
            .into_iter()
            .map(|((fraction, init), v)| {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                SweepCell { fraction, init, mean_mae: mean, std_mae: std, runs: v.len() }
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "fraction,init,mean_mae,std_mae,runs")?;
        for c in self.cells() {
            writeln!(f, "{},{},{},{},{}", c.fraction, c.init, c.mean_mae, c.std_mae, c.runs)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn save_runs(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "fraction,init,seed,mae")?;
        for r in &self.runs {
            writeln!(f, "{},{},{},{}", r.fraction, r.init, r.seed, r.mae)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Test MAE, in raw units, of a fine-tuned checkpoint.
pub fn test_mae<T: Scalar>(ckpt: &MaeCheckpoint<T>, test: &[CubePair<T>]) -> Result<f64> {
    let recon: Vec<HyperCube<T>> = test.iter().map(|p| reconstruct(&p.0, ckpt)).collect::<Result<_>>()?;
    let truth: Vec<&HyperCube<T>> = test.iter().map(|p| &p.1).collect();
    Ok(evaluate_reconstructions(&truth, &recon)?.aggregate().mae)
}

/// One fine-tuning run on a `fraction` subset of the training pairs.
pub fn sweep_cell<T: Scalar>(setup: &SweepSetup<T>, fraction: f64, init: Init, seed: u64) -> Result<SweepRun> {
    let idx = fraction_subset(setup.train.len(), fraction, seed)?;
    let subset: Vec<CubePair<T>> = idx.iter().map(|&i| setup.train[i].clone()).collect();
    let mut cfg = setup.pretrained.model.config.clone();
    cfg.learning_rate = setup.finetune.learning_rate;
    cfg.batch_size = setup.finetune.batch_size;
    cfg.steps = setup.finetune.steps;
    cfg.eval_every = setup.finetune.eval_every;
    cfg.seed = seed;
    let outcome = match init {
        Init::Pretrained => finetune(&subset, setup.val, Some(setup.pretrained), &cfg)?,
        Init::Scratch => finetune(&subset, setup.val, None, &cfg)?,
    };
    let ckpt = outcome.best.unwrap_or(outcome.last);
    Ok(SweepRun { fraction, init, seed, mae: test_mae(&ckpt, setup.test)? })
}

/// Every `(fraction, seed, init)` cell, scratch before pretrained.
pub fn run_sweep<T: Scalar>(fractions: &[f64], seeds: &[u64], setup: &SweepSetup<T>) -> Result<SweepReport> {
    if seeds.is_empty() || fractions.is_empty() {
        return Err(Error::validation("sweep needs at least one fraction and one seed"));
    }
    let mut report = SweepReport::default();
    for &fraction in fractions {
        for &seed in seeds {
            for init in [Init::Scratch, Init::Pretrained] {
                let run = sweep_cell(setup, fraction, init, seed)?;
                log::info!("sweep fraction {fraction} seed {seed} {init}: mae {:.4}", run.mae);
                report.runs.push(run);
            }
        }
    }
    Ok(report)
}

/// Comparison table built from evaluation CSVs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl ReportTable {
    pub fn to_text(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(name, v)| std::iter::once(name.clone()).chain(v.iter().map(|x| format!("{x:.4}"))).collect())
            .collect();
        let header: Vec<String> = std::iter::once("input".to_string()).chain(self.columns.iter().cloned()).collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| cells.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        let line = |row: &[String], s: &mut String| {
            let parts: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
                .collect();
            let _ = writeln!(s, "{}", parts.join("  ").trim_end());
        };
        line(&header, &mut s);
        let _ = writeln!(s, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        for r in &cells {
            line(r, &mut s);
        }
        s
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "input,{}", self.columns.join(","))?;
        for (name, v) in &self.rows {
            writeln!(f, "{name},{}", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","))?;
        }
        f.flush()?;
        Ok(())
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

const REGRESSION_COLUMNS: [&str; 4] = ["mae", "mse", "rmse", "r2"];

fn load_regression(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| Error::format(path, format!("missing column {name}")));
    let name_col = col("input")?;
    let cols: Vec<usize> = REGRESSION_COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let v = cols
            .iter()
            .map(|&c| rec[c].parse().map_err(|_| Error::Parse { line: i + 2, msg: format!("bad number {:?}", &rec[c]) }))
            .collect::<Result<_>>()?;
        rows.push((format!("{}:{}", stem(path), &rec[name_col]), v));
    }
    Ok(rows)
}

/// One row per reconstruction report (its recomputed aggregate), or per
/// regression-report row. All inputs must share one schema.
pub fn run_report(inputs: &[PathBuf]) -> Result<ReportTable> {
    if inputs.is_empty() {
        return Err(Error::validation("report needs at least one input"));
    }
    let mut table: Option<ReportTable> = None;
    for path in inputs {
        let header = std::fs::read_to_string(path)
            .map_err(|e| Error::validation(format!("cannot read {}: {e}", path.display())))?
            .lines()
            .next()
            .unwrap_or("")
            .to_string();
        let (columns, rows): (Vec<String>, Vec<(String, Vec<f64>)>) = if header.starts_with("input") {
            (REGRESSION_COLUMNS.iter().map(|s| s.to_string()).collect(), load_regression(path)?)
        } else {
            let report = ReconReport::load(path)?;
            if report.rows.is_empty() {
                return Err(Error::format(path, "no per-image rows"));
            }
            let a = report.aggregate();
            (
                vec!["mae".into(), "psnr_db".into(), "ssim".into(), "sam_deg".into()],
                vec![(stem(path), vec![a.mae, a.psnr_db, a.ssim, a.sam_deg])],
            )
        };
        match &mut table {
            None => table = Some(ReportTable { columns, rows }),
            Some(t) if t.columns == columns => t.rows.extend(rows),
            Some(_) => return Err(Error::format(path, "schema differs from the first input")),
        }
    }
    Ok(table.expect("at least one input"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_sections_and_hashes_canonically() {
        let a = ExperimentConfig::parse("[model]\nembed_dim = 32 # small\n\n[paths]\ndata_dir=cubes\n").unwrap();
        let b = ExperimentConfig::parse("[paths]\n data_dir = cubes\n[model]\nembed_dim=32\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.model_config().unwrap().embed_dim, 32);
        assert_eq!(a.path("data_dir"), Some(PathBuf::from("cubes")));
        assert!(ExperimentConfig::parse("[model]\nx\n").is_err());
        assert!(ExperimentConfig::parse("[model]\nsteps=1\nsteps=2\n").is_err());
        assert!(ExperimentConfig::parse("[model]\nbogus=1\n").unwrap().model_config().is_err());
    }

    #[test]
    fn scene_lines_parse() {
        let c = ExperimentConfig::parse("[scene]\nbands=16\nlines = 2200:30:0.5, 1650:20:0.2\n").unwrap();
        let s = c.scene_config().unwrap();
        assert_eq!(s.lines.len(), 2);
        assert_eq!(s.lines[1], AbsorptionLine { center_nm: 1650.0, width_nm: 20.0, max_depth: 0.2 });
    }

    #[test]
    fn fraction_subsets() {
        assert_eq!(fraction_subset(10, 1.0, 3).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(fraction_subset(100, 0.1, 4).unwrap(), fraction_subset(100, 0.1, 4).unwrap());
        assert_eq!(fraction_subset(100, 0.1, 4).unwrap().len(), 10);
        assert!(fraction_subset(100, 0.001, 4).is_err());
        assert!(fraction_subset(10, 0.0, 4).is_err());
    }

    #[test]
    fn report_tables() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |name: &str, maes: &[f64]| {
            let mut r = ReconReport::default();
            for (i, &m) in maes.iter().enumerate() {
                r.push(ReconRow { patch_id: format!("p{i}"), mae: m, psnr_db: 30.0, ssim: 0.9, sam_deg: 2.0 });
            }
            let p = dir.path().join(name);
            r.save(&p).unwrap();
            p
        };
        let a = mk("ms.csv", &[1.0, 2.0]);
        let b = mk("recon.csv", &[0.5, 0.25]);
        let t = run_report(&[a.clone(), b]).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0], ("ms".to_string(), vec![1.5, 30.0, 0.9, 2.0]));
        assert!(t.to_text().lines().count() == 4);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "patch_id,mae,psnr_db,ssim\np0,1,2,3\n").unwrap();
        let err = run_report(&[bad]).unwrap_err().to_string();
        assert!(err.contains("sam_deg"), "{err}");

        let reg = dir.path().join("ghg.csv");
        std::fs::write(&reg, "input,mae,mse,rmse,r2\nhs,1,1,1,0.5\n").unwrap();
        assert!(run_report(&[a, reg]).is_err());
    }
}
