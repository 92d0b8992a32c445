//! `spectral-bridge <stage> --config <file> [--seed N] [--out DIR]`
//!
//! Exit status is 0 on success, 2 when inputs or configuration are invalid
//! and 1 on any other failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spectral_bridge::data::{
    load_cube, load_labels, make_splits, save_cube, HyperCube, Split, SplitAssignment, SrfTable,
};
use spectral_bridge::experiment::{
    compare_masked, cube_ids, degrade_all, evaluate_reconstructions, load_cube_dir, pair_cubes, run_report, run_sweep,
    save_cube_dir, select_split, ExperimentConfig, SweepSetup,
};
use spectral_bridge::ghg::{evaluate_regressor, train_regressor, RegressorCheckpoint};
use spectral_bridge::mae::{finetune, pretrain, reconstruct, CubePair, MaeCheckpoint, Stage};
use spectral_bridge::metrics::RegressionReport;
use spectral_bridge::preprocess::{accumulate_stats, spatial_average, BandStats, GlobalStats, SpectralSignature};
use spectral_bridge::srf_projection::{build_weight_matrix, project_cube};
use spectral_bridge::synth::{broadband_sensor, gen_dataset, gen_labels, gen_sensor, save_truth};

type Cube = HyperCube<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Stats,
    Degrade,
    Pretrain,
    Finetune,
    Reconstruct,
    Evaluate,
    GhgTrain,
    GhgEval,
    Sweep,
    Synthgen,
    Report,
}

#[derive(Debug, Parser)]
#[command(name = "spectral-bridge", version, about = "Spectral masked autoencoder experiments")]
struct Cli {
    #[arg(value_enum)]
    stage: StageArg,
    /// Experiment configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory; defaults to `out/<stage>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `degrade`: input cube file or directory of cubes.
    #[arg(long)]
    input: Option<PathBuf>,
    /// `degrade`: SRF CSV.
    #[arg(long)]
    srf: Option<PathBuf>,
    /// `degrade`: output cube file or directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Invalid command-line usage; reported with exit status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

struct Ctx {
    cfg: ExperimentConfig,
    seed: u64,
    out: PathBuf,
    cli: Cli,
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn path(&self, key: &str) -> anyhow::Result<PathBuf> {
        Ok(self.cfg.require_path(key)?)
    }

    fn model_config(&self, section: &str) -> anyhow::Result<spectral_bridge::mae::ModelConfig> {
        let mut m = self.cfg.model_config()?;
        m.apply(self.cfg.section(section))?;
        m.seed = self.seed;
        Ok(m)
    }

    fn regressor_config(&self) -> anyhow::Result<spectral_bridge::ghg::RegressorConfig> {
        let mut r = self.cfg.regressor_config()?;
        r.seed = self.seed;
        Ok(r)
    }

    fn hs_cubes(&self) -> anyhow::Result<Vec<Cube>> {
        let dir = self.path("data_dir")?;
        load_cube_dir(&dir).with_context(|| format!("loading cubes from {}", dir.display()))
    }

    fn ms_cubes(&self) -> anyhow::Result<Vec<Cube>> {
        let dir = self.path("ms_dir")?;
        load_cube_dir(&dir).with_context(|| format!("loading cubes from {}", dir.display()))
    }

    /// `paths.split` when given, otherwise a fresh split from `[split]`.
    fn split(&self, cubes: &[Cube]) -> anyhow::Result<SplitAssignment> {
        match self.cfg.path("split") {
            Some(p) => Ok(SplitAssignment::load(&p).with_context(|| format!("loading split {}", p.display()))?),
            None => {
                let (mode, ratios) = self.cfg.split_ratios()?;
                Ok(make_splits(&cube_ids(cubes), mode, ratios, self.seed)?)
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}

fn exit_status(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<spectral_bridge::Error>() {
            return if err.is_validation() { 2 } else { 1 };
        }
    }
    1
}

fn stage_name(s: StageArg) -> String {
    s.to_possible_value().expect("no skipped variants").get_name().to_string()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if cli.stage == StageArg::Degrade => ExperimentConfig::default(),
        None => return Err(usage(format!("{} needs --config", stage_name(cli.stage)))),
    };
    let seed = match cli.seed {
        Some(s) => s,
        None => cfg.get_or("run", "seed", 0u64)?,
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out").join(stage_name(cli.stage)));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let ctx = Ctx { cfg, seed, out, cli };
    log::info!("{} seed {} config {}", stage_name(ctx.cli.stage), ctx.seed, ctx.cfg.hash());
    match ctx.cli.stage {
        StageArg::Stats => stats(&ctx)?,
        StageArg::Degrade => degrade(&ctx)?,
        StageArg::Pretrain => pretrain_stage(&ctx)?,
        StageArg::Finetune => finetune_stage(&ctx)?,
        StageArg::Reconstruct => reconstruct_stage(&ctx)?,
        StageArg::Evaluate => evaluate(&ctx)?,
        StageArg::GhgTrain => ghg_train(&ctx)?,
        StageArg::GhgEval => ghg_eval(&ctx)?,
        StageArg::Sweep => sweep(&ctx)?,
        StageArg::Synthgen => synthgen(&ctx)?,
        StageArg::Report => report(&ctx)?,
    }
    write_manifest(&ctx)
}

fn write_manifest(ctx: &Ctx) -> anyhow::Result<()> {
    let mut text = format!(
        "stage = {}\nconfig_hash = {}\nseed = {}\n",
        stage_name(ctx.cli.stage),
        ctx.cfg.hash(),
        ctx.seed
    );
    if let Some(p) = &ctx.cli.config {
        text.push_str(&format!("config = {}\n", p.display()));
    }
    fs::write(ctx.out("manifest.txt"), text)?;
    Ok(())
}

/// Band statistics and global signature statistics over the training split.
fn stats(ctx: &Ctx) -> anyhow::Result<()> {
    let cubes = ctx.hs_cubes()?;
    let split = ctx.split(&cubes)?;
    let train = select_split(&cubes, &split, Split::Train);
    if train.is_empty() {
        return Err(usage("training split is empty"));
    }
    let mut stats = BandStats::empty();
    for c in &train {
        stats = accumulate_stats(stats, c)?;
    }
    let sigs: Vec<SpectralSignature<f32>> = train.iter().map(|c| spatial_average(c)).collect();
    let global = GlobalStats::from_signatures(&sigs)?;
    stats.save(ctx.out("stats.csv"), Some(&global))?;
    split.save(ctx.out("split.csv"))?;
    println!("{} training cubes, {} bands", train.len(), stats.num_bands());
    Ok(())
}

/// Projects one cube, or every cube of a directory, through an SRF table.
fn degrade(ctx: &Ctx) -> anyhow::Result<()> {
    let pick = |flag: &Option<PathBuf>, key: &str| -> anyhow::Result<PathBuf> {
        flag.clone()
            .or_else(|| ctx.cfg.path(key))
            .ok_or_else(|| usage(format!("degrade needs --{} or paths.{key}", key_flag(key))))
    };
    fn key_flag(key: &str) -> &str {
        match key {
            "data_dir" => "input",
            "ms_dir" => "output",
            k => k,
        }
    }
    let input = pick(&ctx.cli.input, "data_dir")?;
    let srf = SrfTable::load(pick(&ctx.cli.srf, "srf")?)?;
    let output = pick(&ctx.cli.output, "ms_dir")?;
    if input.is_dir() {
        let cubes: Vec<Cube> = load_cube_dir(&input)?;
        let ms = degrade_all(&cubes, &srf)?;
        save_cube_dir(&ms, &output)?;
        println!("degraded {} cubes to {} bands", ms.len(), srf.len());
    } else {
        let cube: Cube = load_cube(&input)?;
        let w = build_weight_matrix(&srf, cube.bands())?;
        let ms = project_cube(&cube, &w)?;
        if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        save_cube(&ms, &output)?;
        println!("degraded {} to {} bands", input.display(), srf.len());
    }
    Ok(())
}

fn owned(cubes: Vec<&Cube>) -> Vec<Cube> {
    cubes.into_iter().cloned().collect()
}

fn pretrain_stage(ctx: &Ctx) -> anyhow::Result<()> {
    let cubes = ctx.hs_cubes()?;
    let split = ctx.split(&cubes)?;
    let train = owned(select_split(&cubes, &split, Split::Train));
    let val = owned(select_split(&cubes, &split, Split::Val));
    let cfg = ctx.model_config("pretrain")?;
    let outcome = pretrain(&train, &val, &cfg)?;
    outcome.log.save(ctx.out("pretrain_log.csv"))?;
    outcome.last.save(ctx.out("last.sbck"))?;
    outcome.best.as_ref().unwrap_or(&outcome.last).save(ctx.out("pretrained.sbck"))?;
    print_losses(&outcome.log.train_losses());
    Ok(())
}

fn print_losses(losses: &[f64]) {
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("loss {first:.6} -> {last:.6} over {} steps", losses.len());
    }
}

/// `(ms, hs)` pairs for one split.
fn pairs_for(ms: &[Cube], hs: &[Cube], split: &SplitAssignment, which: Split) -> anyhow::Result<Vec<CubePair<f32>>> {
    Ok(pair_cubes(&owned(select_split(ms, split, which)), &select_split(hs, split, which))?)
}

fn finetune_stage(ctx: &Ctx) -> anyhow::Result<()> {
    let hs = ctx.hs_cubes()?;
    let ms = ctx.ms_cubes()?;
    let split = ctx.split(&hs)?;
    let train = pairs_for(&ms, &hs, &split, Split::Train)?;
    let val = pairs_for(&ms, &hs, &split, Split::Val)?;
    let init = ctx.cfg.path("pretrained").map(MaeCheckpoint::<f32>::load).transpose()?;
    let cfg = ctx.model_config("finetune")?;
    let outcome = finetune(&train, &val, init.as_ref(), &cfg)?;
    outcome.log.save(ctx.out("finetune_log.csv"))?;
    outcome.best.as_ref().unwrap_or(&outcome.last).save(ctx.out("finetuned.sbck"))?;
    print_losses(&outcome.log.train_losses());
    Ok(())
}

/// Reconstructs every multispectral cube; `[reconstruct] split = test`
/// restricts it to one split of `paths.split`.
fn reconstruct_stage(ctx: &Ctx) -> anyhow::Result<()> {
    let ckpt = MaeCheckpoint::<f32>::load(ctx.path("finetuned")?)?;
    let ms = ctx.ms_cubes()?;
    let selected: Vec<&Cube> = match ctx.cfg.get("reconstruct", "split") {
        Some(which) => {
            let which: Split = which.parse()?;
            select_split(&ms, &SplitAssignment::load(ctx.path("split")?)?, which)
        }
        None => ms.iter().collect(),
    };
    let recon: Vec<Cube> = selected.iter().map(|c| reconstruct(c, &ckpt)).collect::<Result<_, _>>()?;
    save_cube_dir(&recon, ctx.out("recon"))?;
    println!("reconstructed {} cubes", recon.len());
    Ok(())
}

/// `[evaluate] mode = recon` scores `paths.recon_dir` against the reference
/// cubes; `mode = masked` compares the pretrained model with the baselines.
fn evaluate(ctx: &Ctx) -> anyhow::Result<()> {
    let hs = ctx.hs_cubes()?;
    match ctx.cfg.get("evaluate", "mode").unwrap_or("recon") {
        "recon" => {
            let recon: Vec<Cube> = load_cube_dir(ctx.path("recon_dir")?)?;
            let ids: std::collections::BTreeSet<&str> = recon.iter().map(|c| c.patch_id()).collect();
            let truth: Vec<&Cube> = hs.iter().filter(|c| ids.contains(c.patch_id())).collect();
            if truth.len() != recon.len() {
                return Err(usage("some reconstructions have no reference cube"));
            }
            let name = ctx.cfg.get("evaluate", "name").unwrap_or("recon");
            let report = evaluate_reconstructions(&truth, &recon)?;
            report.save(ctx.out(&format!("{name}.csv")))?;
            let a = report.aggregate();
            println!("{name}: mae {:.6} psnr {:.4} ssim {:.6} sam {:.6}", a.mae, a.psnr_db, a.ssim, a.sam_deg);
        }
        "masked" => {
            let ckpt = MaeCheckpoint::<f32>::load(ctx.path("pretrained")?)?;
            if ckpt.stage != Stage::Pretrained {
                return Err(usage("masked evaluation needs a pretrained checkpoint"));
            }
            let split = ctx.split(&hs)?;
            let test = select_split(&hs, &split, Split::Test);
            let cmp = compare_masked(&test, &ckpt, ctx.seed)?;
            for (name, r) in [("model", &cmp.model), ("linear", &cmp.linear), ("gaussian", &cmp.gaussian)] {
                r.save(ctx.out(&format!("{name}.csv")))?;
                println!("{name}: mae {:.6}", r.aggregate().mae);
            }
        }
        m => return Err(usage(format!("unknown evaluate mode {m:?}"))),
    }
    Ok(())
}

fn signatures_of(cubes: &[Cube]) -> Vec<(String, SpectralSignature<f32>)> {
    cubes.iter().map(|c| (c.patch_id().to_string(), spatial_average(c))).collect()
}

fn ghg_train(ctx: &Ctx) -> anyhow::Result<()> {
    let cubes: Vec<Cube> = load_cube_dir(ctx.path("cubes")?)?;
    let sigs = signatures_of(&cubes);
    let mut cfg = ctx.regressor_config()?;
    if ctx.cfg.get("regressor", "input_bands").is_none() {
        cfg.input_bands = sigs.first().map_or(0, |s| s.1.len());
    }
    let labels = load_labels(ctx.path("labels")?, cfg.gas)?;
    let split = match ctx.cfg.path("split") {
        Some(p) => SplitAssignment::load(p)?,
        None => {
            let (mode, ratios) = ctx.cfg.split_ratios()?;
            make_splits(&cube_ids(&cubes), mode, ratios, ctx.seed)?
        }
    };
    let outcome = train_regressor(&sigs, &labels, &cfg, &split)?;
    outcome.checkpoint.save(ctx.out("regressor.sbck"))?;
    let mut hist = String::from("step,train_mse,val_mse\n");
    for (step, tr, va) in &outcome.history {
        hist.push_str(&format!("{step},{tr},{va}\n"));
    }
    fs::write(ctx.out("regressor_log.csv"), hist)?;
    if let Some((step, _, va)) = outcome.history.last() {
        println!("stopped at step {step} (early: {}), val mse {va:.6}", outcome.stopped_early);
    }
    Ok(())
}

/// Scores the regressor on the test split (every cube without a split).
fn ghg_eval(ctx: &Ctx) -> anyhow::Result<()> {
    let ckpt = RegressorCheckpoint::<f32>::load(ctx.path("regressor")?)?;
    let dir = ctx.path("cubes")?;
    let cubes: Vec<Cube> = load_cube_dir(&dir)?;
    let selected: Vec<Cube> = match ctx.cfg.path("split") {
        Some(p) => owned(select_split(&cubes, &SplitAssignment::load(p)?, Split::Test)),
        None => cubes,
    };
    let labels = load_labels(ctx.path("labels")?, ckpt.config.gas)?;
    let report = evaluate_regressor(&ckpt, &signatures_of(&selected), &labels)?;
    let name = match ctx.cfg.get("ghg", "name") {
        Some(n) => n.to_string(),
        None => dir.file_name().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned()),
    };
    RegressionReport::save(&[(name.clone(), report)], ctx.out("ghg_eval.csv"))?;
    println!("{name}: rmse {:.6} r2 {:.6}", report.rmse, report.r2);
    Ok(())
}

/// `[sweep] fractions` and `seeds`; seeds default to 0..5.
fn sweep(ctx: &Ctx) -> anyhow::Result<()> {
    let fractions: Vec<f64> = ctx.cfg.list("sweep", "fractions")?.unwrap_or_else(|| vec![0.001, 0.01, 0.1, 1.0]);
    let seeds: Vec<u64> = match (ctx.cli.seed, ctx.cfg.list("sweep", "seeds")?) {
        (Some(s), _) => vec![s],
        (None, Some(v)) => v,
        (None, None) => (0..5).collect(),
    };
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(usage("sweep fractions must lie in (0, 1]"));
    }
    let hs = ctx.hs_cubes()?;
    let ms = ctx.ms_cubes()?;
    let split = ctx.split(&hs)?;
    let train = pairs_for(&ms, &hs, &split, Split::Train)?;
    let val = pairs_for(&ms, &hs, &split, Split::Val)?;
    let test = pairs_for(&ms, &hs, &split, Split::Test)?;
    let pretrained = MaeCheckpoint::<f32>::load(ctx.path("pretrained")?)?;
    let setup = SweepSetup {
        train: &train,
        val: &val,
        test: &test,
        pretrained: &pretrained,
        finetune: ctx.model_config("finetune")?,
    };
    let report = run_sweep(&fractions, &seeds, &setup)?;
    report.save(ctx.out("sweep.csv"))?;
    report.save_runs(ctx.out("sweep_runs.csv"))?;
    for c in report.cells() {
        println!("{:>8} {:<10} {:.6} ± {:.6} ({} runs)", c.fraction, c.init, c.mean_mae, c.std_mae, c.runs);
    }
    Ok(())
}

/// Scenes, a broadband SRF, labels, ground-truth depths and a split.
fn synthgen(ctx: &Ctx) -> anyhow::Result<()> {
    let mut scene = ctx.cfg.scene_config()?;
    scene.seed = ctx.seed;
    let count: usize = ctx.cfg.get_or("scene", "count", 64)?;
    if count == 0 {
        return Err(usage("scene.count must be positive"));
    }
    let scenes = gen_dataset::<f32>(&scene, count)?;
    let cubes: Vec<Cube> = scenes.iter().map(|s| s.cube.clone()).collect();
    save_cube_dir(&cubes, ctx.out("hs"))?;
    let srf = gen_sensor(&broadband_sensor())?;
    srf.save(ctx.out("srf.csv"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ LABEL_SEED_SALT);
    gen_labels(&scenes, &ctx.cfg.label_model()?, &mut rng)?.save(ctx.out("labels.csv"))?;
    save_truth(&scenes, ctx.out("truth.csv"))?;
    let (mode, ratios) = ctx.cfg.split_ratios()?;
    make_splits(&cube_ids(&cubes), mode, ratios, ctx.seed)?.save(ctx.out("split.csv"))?;
    println!("generated {count} scenes with {} bands", scene.bands);
    Ok(())
}

const LABEL_SEED_SALT: u64 = 0x001a_be15;

/// `[report] inputs` is a comma list of evaluation CSVs.
fn report(ctx: &Ctx) -> anyhow::Result<()> {
    let inputs: Vec<PathBuf> = ctx.cfg.list("report", "inputs")?.ok_or_else(|| usage("missing report.inputs"))?;
    let missing: Vec<&Path> = inputs.iter().map(PathBuf::as_path).filter(|p| !p.is_file()).collect();
    if !missing.is_empty() {
        return Err(usage(format!("report inputs not found: {missing:?}")));
    }
    let table = run_report(&inputs)?;
    let text = table.to_text();
    fs::write(ctx.out("report.txt"), &text)?;
    table.save_csv(ctx.out("report.csv"))?;
    print!("{text}");
    Ok(())
}
