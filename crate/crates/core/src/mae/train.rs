//! Pretraining, fine-tuning and inference drivers.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{MaeCheckpoint, Stage};
use super::config::ModelConfig;
use super::model::{BatchPlan, SpectralMae};
use super::tokens::{group_wavelengths, patchify, reassemble, sample_band_mask, PatchLayout, Patches};
use crate::data::cube::HyperCube;
use crate::data::split::Split;
use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::optim::{cosine_lr, Adam};
use crate::preprocess::{accumulate_stats, denormalize_bandwise, normalize_bandwise, BandStats};
use crate::scalar::Scalar;
use crate::srf_projection::bands_match;

/// Per-step loss trace, written as `step,split,loss`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<(usize, Split, f64)>,
}

impl TrainLog {
    pub fn train_losses(&self) -> Vec<f64> {
        self.rows.iter().filter(|r| r.1 == Split::Train).map(|r| r.2).collect()
    }

    pub fn val_losses(&self) -> Vec<(usize, f64)> {
        self.rows.iter().filter(|r| r.1 == Split::Val).map(|r| (r.0, r.2)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,split,loss")?;
        for (step, split, loss) in &self.rows {
            writeln!(f, "{step},{split},{loss}")?;
        }
        f.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub last: MaeCheckpoint<T>,
    /// Lowest validation loss seen, when a validation set was given.
    pub best: Option<MaeCheckpoint<T>>,
    pub log: TrainLog,
}

/// Offset mixed into the seed of validation masks so they do not track training masks.
const VAL_SEED_SALT: u64 = 0x005e_ed0f_7a11;

fn check_uniform<T: Scalar>(cubes: &[&HyperCube<T>]) -> Result<()> {
    let first = cubes.first().ok_or_else(|| Error::validation("empty dataset"))?;
    for c in cubes {
        if c.data().dim() != first.data().dim() || !bands_match(c.bands(), first.bands()) {
            return Err(Error::validation(format!(
                "cube {} differs in shape or bands from cube {}",
                c.patch_id(),
                first.patch_id()
            )));
        }
    }
    Ok(())
}

fn stats_of<T: Scalar>(cubes: &[&HyperCube<T>]) -> Result<BandStats> {
    cubes.iter().try_fold(BandStats::empty(), |s, c| accumulate_stats(s, c))
}

fn prepare<T: Scalar>(cubes: &[&HyperCube<T>], stats: &BandStats, band_group: usize, patch: usize) -> Result<Vec<Patches<T>>> {
    cubes.iter().map(|c| patchify(&normalize_bandwise(c, stats)?, band_group, patch)).collect()
}

struct Batcher {
    order: Vec<usize>,
    cursor: usize,
}

impl Batcher {
    fn new(n: usize) -> Self {
        Batcher { order: (0..n).collect(), cursor: n }
    }

    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn check_finite<T: Scalar>(loss: T, step: usize) -> Result<f64> {
    let l = loss.as_f64();
    if !l.is_finite() {
        return Err(Error::Diverged { step, msg: format!("loss became {l}") });
    }
    Ok(l)
}

fn optimize_step<T: Scalar>(model: &mut SpectralMae<T>, opt: &mut Adam<T>, plan: &BatchPlan<T>, lr: f64, step: usize) -> Result<f64> {
    model.zero_grad();
    let loss = check_finite(model.loss_and_grad(plan)?, step)?;
    let mut params = model.params_mut();
    opt.step(&mut params, lr);
    Ok(loss)
}

/// Mean loss over `plans`, weighted by predicted token count.
fn eval_plans<T: Scalar>(model: &SpectralMae<T>, plans: &[BatchPlan<T>]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0.0;
    for plan in plans {
        let (preds, _) = model.forward(plan);
        let w = plan.loss_rows.iter().filter(|&&u| u).count() as f64;
        total += model.loss(plan, &preds)?.as_f64() * w;
        n += w;
    }
    Ok(total / n)
}

/// Self-supervised masked reconstruction on hyperspectral cubes.
///
/// Band statistics are taken from `train` only and stored in the checkpoint.
pub fn pretrain<T: Scalar>(train: &[HyperCube<T>], val: &[HyperCube<T>], cfg: &ModelConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let train_refs: Vec<&HyperCube<T>> = train.iter().collect();
    check_uniform(&train_refs)?;
    let first = train_refs[0];
    cfg.check_cube(first.num_bands(), first.height(), first.width())?;
    let val_refs: Vec<&HyperCube<T>> = val.iter().collect();
    if !val_refs.is_empty() {
        check_uniform(&[first].into_iter().chain(val_refs.iter().copied()).collect::<Vec<_>>())?;
    }

    let stats = stats_of(&train_refs)?;
    let train_p = prepare(&train_refs, &stats, cfg.band_group, cfg.spatial_patch)?;
    let val_p = prepare(&val_refs, &stats, cfg.band_group, cfg.spatial_patch)?;
    let groups = train_p[0].layout.groups();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = SpectralMae::new(cfg.clone(), first.height(), &mut rng)?;

    let val_plans: Vec<BatchPlan<T>> = {
        let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VAL_SEED_SALT);
        val_p
            .chunks(cfg.batch_size)
            .map(|chunk| {
                let masks: Vec<Vec<usize>> = chunk.iter().map(|_| sample_band_mask(groups, cfg.mask_fraction, &mut vrng)).collect();
                model.plan_masked(&chunk.iter().collect::<Vec<_>>(), &masks, cfg.masked_only_loss)
            })
            .collect::<Result<_>>()?
    };

    let checkpoint = |model: &SpectralMae<T>| MaeCheckpoint {
        model: model.clone(),
        stage: Stage::Pretrained,
        hs_stats: stats.clone(),
        ms_stats: None,
    };

    let mut opt = Adam::default();
    let mut batcher = Batcher::new(train_p.len());
    let mut log = TrainLog::default();
    let mut best: Option<(f64, MaeCheckpoint<T>)> = None;
    for step in 0..cfg.steps {
        let idx = batcher.next(cfg.batch_size, &mut rng);
        let batch: Vec<&Patches<T>> = idx.iter().map(|&i| &train_p[i]).collect();
        let masks: Vec<Vec<usize>> = idx.iter().map(|_| sample_band_mask(groups, cfg.mask_fraction, &mut rng)).collect();
        let plan = model.plan_masked(&batch, &masks, cfg.masked_only_loss)?;
        let loss = optimize_step(&mut model, &mut opt, &plan, cosine_lr(cfg.learning_rate, step, cfg.steps), step)?;
        log.rows.push((step, Split::Train, loss));
        let last = step + 1 == cfg.steps;
        if !val_plans.is_empty() && ((cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) || last) {
            let v = eval_plans(&model, &val_plans)?;
            log.rows.push((step, Split::Val, v));
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, checkpoint(&model)));
            }
        }
        if step % 50 == 0 {
            log::debug!("pretrain step {step}: loss {loss:.5}");
        }
    }
    Ok(TrainOutcome { last: checkpoint(&model), best: best.map(|b| b.1), log })
}

/// A co-registered multispectral/hyperspectral pair of the same scene.
pub type CubePair<T> = (HyperCube<T>, HyperCube<T>);

fn cross_plans<T: Scalar>(
    model: &SpectralMae<T>,
    ms: &[Patches<T>],
    hs: &[Patches<T>],
    hs_lambdas: &[f64],
    batch: usize,
) -> Result<Vec<BatchPlan<T>>> {
    ms.chunks(batch)
        .zip(hs.chunks(batch))
        .map(|(m, h)| {
            let m: Vec<&Patches<T>> = m.iter().collect();
            let h: Vec<&Patches<T>> = h.iter().collect();
            model.plan_cross(&m, hs_lambdas, Some(&h))
        })
        .collect()
}

/// Fine-tunes (or, with `init = None`, trains from scratch) the
/// multispectral-to-hyperspectral mapping.
///
/// The multispectral arm feeds the encoder; the decoder is queried with mask
/// tokens at every hyperspectral group. The architecture comes from `init`
/// when given, optimization settings always from `cfg`.
pub fn finetune<T: Scalar>(
    train: &[CubePair<T>],
    val: &[CubePair<T>],
    init: Option<&MaeCheckpoint<T>>,
    cfg: &ModelConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if cfg.steps == 0 {
        if let Some(init) = init {
            return Ok(TrainOutcome { last: init.clone(), best: None, log: TrainLog::default() });
        }
    }
    let ms_refs: Vec<&HyperCube<T>> = train.iter().map(|p| &p.0).collect();
    let hs_refs: Vec<&HyperCube<T>> = train.iter().map(|p| &p.1).collect();
    check_uniform(&ms_refs)?;
    check_uniform(&hs_refs)?;
    let (ms0, hs0) = (ms_refs[0], hs_refs[0]);
    if ms0.height() != hs0.height() || ms0.width() != hs0.width() {
        return Err(Error::validation("multispectral and hyperspectral cubes must share the spatial grid"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut model, hs_stats) = match init {
        Some(ckpt) => {
            if !bands_match(ckpt.hs_stats.bands(), hs0.bands()) {
                return Err(Error::config("hyperspectral bands differ from those the model was pretrained on"));
            }
            let mut model = ckpt.model.clone();
            model.config.learning_rate = cfg.learning_rate;
            model.config.batch_size = cfg.batch_size;
            model.config.steps = cfg.steps;
            model.config.eval_every = cfg.eval_every;
            model.config.seed = cfg.seed;
            (model, ckpt.hs_stats.clone())
        }
        None => (SpectralMae::new(cfg.clone(), hs0.height(), &mut rng)?, stats_of(&hs_refs)?),
    };
    let mcfg = model.config.clone();
    mcfg.check_cube(hs0.num_bands(), hs0.height(), hs0.width())?;
    let ms_stats = stats_of(&ms_refs)?;
    let hs_lambdas = group_wavelengths(hs0.bands(), mcfg.band_group);

    let ms_train = prepare(&ms_refs, &ms_stats, 1, mcfg.spatial_patch)?;
    let hs_train = prepare(&hs_refs, &hs_stats, mcfg.band_group, mcfg.spatial_patch)?;
    let ms_val = prepare(&val.iter().map(|p| &p.0).collect::<Vec<_>>(), &ms_stats, 1, mcfg.spatial_patch)?;
    let hs_val = prepare(&val.iter().map(|p| &p.1).collect::<Vec<_>>(), &hs_stats, mcfg.band_group, mcfg.spatial_patch)?;
    let val_plans = cross_plans(&model, &ms_val, &hs_val, &hs_lambdas, cfg.batch_size)?;

    let checkpoint = |model: &SpectralMae<T>| MaeCheckpoint {
        model: model.clone(),
        stage: Stage::Finetuned,
        hs_stats: hs_stats.clone(),
        ms_stats: Some(ms_stats.clone()),
    };

    let mut opt = Adam::default();
    let mut batcher = Batcher::new(train.len());
    let mut log = TrainLog::default();
    let mut best: Option<(f64, MaeCheckpoint<T>)> = None;
    for step in 0..cfg.steps {
        let idx = batcher.next(cfg.batch_size, &mut rng);
        let ms_b: Vec<&Patches<T>> = idx.iter().map(|&i| &ms_train[i]).collect();
        let hs_b: Vec<&Patches<T>> = idx.iter().map(|&i| &hs_train[i]).collect();
        let plan = model.plan_cross(&ms_b, &hs_lambdas, Some(&hs_b))?;
        let loss = optimize_step(&mut model, &mut opt, &plan, cosine_lr(cfg.learning_rate, step, cfg.steps), step)?;
        log.rows.push((step, Split::Train, loss));
        let last = step + 1 == cfg.steps;
        if !val_plans.is_empty() && ((cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) || last) {
            let v = eval_plans(&model, &val_plans)?;
            log.rows.push((step, Split::Val, v));
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, checkpoint(&model)));
            }
        }
    }
    Ok(TrainOutcome { last: checkpoint(&model), best: best.map(|b| b.1), log })
}

fn output_layout<T>(model: &SpectralMae<T>, hs_stats: &BandStats, grid_h: usize, grid_w: usize, patch_id: &str, tile_id: &str) -> PatchLayout {
    PatchLayout {
        band_group: model.config.band_group,
        patch: model.config.spatial_patch,
        grid_h,
        grid_w,
        bands: hs_stats.bands().to_vec(),
        patch_id: patch_id.to_string(),
        tile_id: tile_id.to_string(),
    }
}

fn predictions_to_cube<T: Scalar>(
    ckpt: &MaeCheckpoint<T>,
    plan: &BatchPlan<T>,
    preds: &Array2<T>,
    layout: &PatchLayout,
) -> Result<HyperCube<T>> {
    let coords: Vec<_> = plan.out_coords.iter().map(|(_, c)| *c).collect();
    let normalized = reassemble(layout, &coords, preds.view())?;
    denormalize_bandwise(&normalized, &ckpt.hs_stats)
}

/// Hyperspectral estimate, in reflectance units, of a multispectral cube.
pub fn reconstruct<T: Scalar>(ms_cube: &HyperCube<T>, ckpt: &MaeCheckpoint<T>) -> Result<HyperCube<T>> {
    if ckpt.stage != Stage::Finetuned {
        return Err(Error::validation(format!("reconstruction needs a finetuned checkpoint, got {}", ckpt.stage)));
    }
    let ms_stats = ckpt.ms_stats.as_ref().ok_or_else(|| Error::validation("checkpoint lacks multispectral statistics"))?;
    if !bands_match(ms_cube.bands(), ms_stats.bands()) {
        return Err(Error::validation("input bands differ from the multispectral bands used in fine-tuning"));
    }
    let model = &ckpt.model;
    let ms = patchify(&normalize_bandwise(ms_cube, ms_stats)?, 1, model.config.spatial_patch)?;
    let hs_lambdas = group_wavelengths(ckpt.hs_stats.bands(), model.config.band_group);
    let plan = model.plan_cross(&[&ms], &hs_lambdas, None)?;
    let (preds, _) = model.forward(&plan);
    let layout = output_layout(model, &ckpt.hs_stats, ms.layout.grid_h, ms.layout.grid_w, ms_cube.patch_id(), ms_cube.tile_id());
    predictions_to_cube(ckpt, &plan, &preds, &layout)
}

/// Model output, in reflectance units, for a hyperspectral cube whose
/// `masked` spectral groups are hidden. Every band of the result is predicted.
pub fn predict_masked<T: Scalar>(cube: &HyperCube<T>, masked: &[usize], ckpt: &MaeCheckpoint<T>) -> Result<HyperCube<T>> {
    let model = &ckpt.model;
    if !bands_match(cube.bands(), ckpt.hs_stats.bands()) {
        return Err(Error::validation("cube bands differ from the model's hyperspectral bands"));
    }
    let p = patchify(&normalize_bandwise(cube, &ckpt.hs_stats)?, model.config.band_group, model.config.spatial_patch)?;
    let plan = model.plan_masked(&[&p], &[masked.to_vec()], false)?;
    let (preds, _) = model.forward(&plan);
    predictions_to_cube(ckpt, &plan, &preds, &p.layout)
}

/// Bands hidden when spectral groups `groups` are masked.
pub fn groups_to_bands(groups: &[usize], band_group: usize) -> Vec<usize> {
    groups.iter().flat_map(|&g| g * band_group..(g + 1) * band_group).collect()
}

/// Replaces the visible bands of a masked prediction by the observed input.
pub fn composite_masked<T: Scalar>(observed: &HyperCube<T>, predicted: &HyperCube<T>, masked_bands: &[usize]) -> Result<HyperCube<T>> {
    let mut data = observed.data().clone();
    for &b in masked_bands {
        data.index_axis_mut(ndarray::Axis(0), b).assign(&predicted.band(b));
    }
    observed.with_data(data)
}
