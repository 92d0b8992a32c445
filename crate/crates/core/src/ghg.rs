//! Gas concentration regression from spatially averaged spectra.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Container, Section};
use crate::data::{GasKind, GasLabelSet, Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::metrics::RegressionReport;
use crate::nn::{Linear, Param, Parameterized};
use crate::optim::Adam;
use crate::preprocess::{GlobalStats, SpectralSignature};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorConfig {
    pub input_bands: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Validation is scored every this many steps.
    pub eval_every: usize,
    /// Evaluations without improvement before training stops.
    pub patience: usize,
    pub seed: u64,
    pub gas: GasKind,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            input_bands: 12,
            hidden: vec![256, 256],
            learning_rate: 1e-3,
            steps: 2000,
            batch_size: 32,
            eval_every: 10,
            patience: 20,
            seed: 0,
            gas: GasKind::Ch4,
        }
    }
}

impl RegressorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_bands == 0 {
            return Err(Error::config("input_bands must be at least 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden layer sizes must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config("batch_size and eval_every must be positive"));
        }
        Ok(())
    }

    pub fn to_map(&self) -> Section {
        let mut m = Section::new();
        m.insert("input_bands".into(), self.input_bands.to_string());
        m.insert("hidden".into(), self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","));
        m.insert("learning_rate".into(), self.learning_rate.to_string());
        m.insert("steps".into(), self.steps.to_string());
        m.insert("batch_size".into(), self.batch_size.to_string());
        m.insert("eval_every".into(), self.eval_every.to_string());
        m.insert("patience".into(), self.patience.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("gas".into(), self.gas.to_string());
        m
    }

    /// Overrides fields present in `map`; unknown keys are an error.
    pub fn apply(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        fn num<V: std::str::FromStr>(k: &str, v: &str) -> Result<V> {
            v.trim().parse().map_err(|_| Error::config(format!("bad value {v:?} for {k}")))
        }
        for (k, v) in map {
            match k.as_str() {
                "input_bands" => self.input_bands = num(k, v)?,
                "hidden" => {
                    self.hidden = if v.trim().is_empty() {
                        Vec::new()
                    } else {
                        v.split(',').map(|h| num(k, h)).collect::<Result<_>>()?
                    }
                }
                "learning_rate" => self.learning_rate = num(k, v)?,
                "steps" => self.steps = num(k, v)?,
                "batch_size" => self.batch_size = num(k, v)?,
                "eval_every" => self.eval_every = num(k, v)?,
                "patience" => self.patience = num(k, v)?,
                "seed" => self.seed = num(k, v)?,
                "gas" => self.gas = v.parse().map_err(|_| Error::config(format!("unknown gas {v:?}")))?,
                _ => return Err(Error::config(format!("unknown regressor key {k:?}"))),
            }
        }
        Ok(())
    }
}

/// Fully connected network with rectifier activations and a scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new<R: rand::Rng + ?Sized>(input: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Mlp { layers: dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect() }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    /// Layer inputs (post-activation) followed by the output column.
    fn forward_trace(&self, x: ArrayView2<T>) -> Vec<Array2<T>> {
        let mut acts = vec![x.to_owned()];
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(acts[i].view());
            if i + 1 < self.layers.len() {
                y.mapv_inplace(|v| v.max(T::zero()));
            }
            acts.push(y);
        }
        acts
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        self.forward_trace(x).pop().expect("at least one layer")
    }

    /// Mean squared error against `y` (one column), accumulating gradients.
    pub fn loss_and_grad(&mut self, x: ArrayView2<T>, y: ArrayView2<T>) -> T {
        let acts = self.forward_trace(x);
        let out = acts.last().expect("output");
        let n = T::of(y.nrows() as f64);
        let diff = out - &y;
        let loss = diff.iter().map(|&d| d * d).sum::<T>() / n;
        let mut grad = diff.mapv(|d| T::of(2.0) * d / n);
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                grad.zip_mut_with(&acts[i + 1], |g, &a| {
                    if a <= T::zero() {
                        *g = T::zero();
                    }
                });
            }
            grad = self.layers[i].backward(acts[i].view(), grad.view());
        }
        loss
    }
}

impl<T: Scalar> Parameterized<T> for Mlp<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}layer{i}"), out);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}layer{i}"), out);
        }
    }
}

/// Trained network with the input and label scalings it was fit under.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorCheckpoint<T> {
    pub config: RegressorConfig,
    pub mlp: Mlp<T>,
    pub input_norm: GlobalStats,
    /// Mean and standard deviation of training labels, in native units.
    pub label_mean: f64,
    pub label_std: f64,
}

impl<T: Scalar> RegressorCheckpoint<T> {
    /// Predicted concentrations, in native units, for raw signatures.
    pub fn predict(&self, signatures: &[&SpectralSignature<T>]) -> Result<Vec<f64>> {
        let x = design_matrix(signatures, &self.input_norm, self.mlp.input_dim())?;
        let z = self.mlp.forward(x.view());
        Ok(z.iter().map(|v| v.as_f64() * self.label_std + self.label_mean).collect())
    }

    pub fn cast<U: Scalar>(&self) -> RegressorCheckpoint<U> {
        let mut mlp = Mlp::<U>::new(self.config.input_bands, &self.config.hidden, &mut ChaCha8Rng::seed_from_u64(0));
        for ((_, dst), (_, src)) in mlp.params_mut().into_iter().zip(self.mlp.params()) {
            dst.value = src.value.mapv(|v| U::of(v.as_f64()));
        }
        RegressorCheckpoint {
            config: self.config.clone(),
            mlp,
            input_norm: self.input_norm,
            label_mean: self.label_mean,
            label_std: self.label_std,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut c = Container::default();
        let mut meta = Section::new();
        meta.insert("kind".into(), "ghg_mlp".into());
        meta.insert("input_mean".into(), self.input_norm.mean.to_string());
        meta.insert("input_std".into(), self.input_norm.std.to_string());
        meta.insert("label_mean".into(), self.label_mean.to_string());
        meta.insert("label_std".into(), self.label_std.to_string());
        c.sections.insert("meta".into(), meta);
        c.sections.insert("regressor".into(), self.config.to_map());
        for (name, p) in self.mlp.params() {
            c.push_param(&name, p);
        }
        c.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = Container::read(path)?;
        let meta = c.section("meta")?;
        if meta.get("kind").map(String::as_str) != Some("ghg_mlp") {
            return Err(Error::validation("checkpoint does not hold a gas regressor"));
        }
        let get = |k: &str| -> Result<f64> {
            meta.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::validation(format!("regressor checkpoint lacks {k}")))
        };
        let mut config = RegressorConfig::default();
        config.apply(c.section("regressor")?)?;
        let mut mlp = Mlp::new(config.input_bands, &config.hidden, &mut ChaCha8Rng::seed_from_u64(0));
        c.fill_params(mlp.params_mut())?;
        Ok(RegressorCheckpoint {
            input_norm: GlobalStats::new(get("input_mean")?, get("input_std")?)?,
            label_mean: get("label_mean")?,
            label_std: get("label_std")?,
            config,
            mlp,
        })
    }
}

fn design_matrix<T: Scalar>(signatures: &[&SpectralSignature<T>], norm: &GlobalStats, width: usize) -> Result<Array2<T>> {
    let mut x = Array2::zeros((signatures.len(), width));
    for (mut row, s) in x.axis_iter_mut(Axis(0)).zip(signatures) {
        if s.len() != width {
            return Err(Error::validation(format!("signature has {} bands, regressor expects {width}", s.len())));
        }
        let (m, sd) = (T::of(norm.mean), T::of(norm.std));
        row.zip_mut_with(&s.values, |r, &v| *r = (v - m) / sd);
    }
    Ok(x)
}

#[derive(Debug, Clone)]
pub struct RegressorOutcome<T> {
    pub checkpoint: RegressorCheckpoint<T>,
    /// `(step, train MSE, val MSE)` in z-scored label units at every evaluation.
    pub history: Vec<(usize, f64, f64)>,
    pub stopped_early: bool,
}

type Labeled<'a, T> = Vec<(&'a SpectralSignature<T>, f64)>;

fn gather<'a, T>(
    signatures: &'a [(String, SpectralSignature<T>)],
    labels: &GasLabelSet,
    split: &SplitAssignment,
    which: Split,
) -> Result<Labeled<'a, T>> {
    let mut out = Vec::new();
    for (id, sig) in signatures {
        if split.get(id) != Some(which) {
            continue;
        }
        let y = labels
            .get(id)
            .ok_or_else(|| Error::validation(format!("signature {id} in the {which} split has no {} label", labels.gas)))?;
        out.push((sig, y));
    }
    Ok(out)
}

fn mse_of<T: Scalar>(mlp: &Mlp<T>, x: &Array2<T>, y: &Array2<T>) -> f64 {
    let p = mlp.forward(x.view());
    p.iter().zip(y).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>() / y.nrows() as f64
}

/// Fits the regressor on the training split, stopping early on validation MSE.
///
/// Signatures are raw spatial averages; the global input normalization and
/// the label z-scoring are estimated on the training split and stored in the
/// checkpoint.
pub fn train_regressor<T: Scalar>(
    signatures: &[(String, SpectralSignature<T>)],
    labels: &GasLabelSet,
    cfg: &RegressorConfig,
    split: &SplitAssignment,
) -> Result<RegressorOutcome<T>> {
    cfg.validate()?;
    if labels.gas != cfg.gas {
        return Err(Error::validation(format!("labels are {} but the regressor is configured for {}", labels.gas, cfg.gas)));
    }
    let train = gather(signatures, labels, split, Split::Train)?;
    let val = gather(signatures, labels, split, Split::Val)?;
    if train.is_empty() {
        return Err(Error::validation("training split has no labeled signatures"));
    }
    let input_norm = GlobalStats::from_signatures(train.iter().map(|(s, _)| *s))?;
    let ys: Vec<f64> = train.iter().map(|t| t.1).collect();
    let label_mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let label_std = {
        let var = ys.iter().map(|y| (y - label_mean).powi(2)).sum::<f64>() / ys.len() as f64;
        var.sqrt().max(crate::preprocess::STD_EPSILON)
    };
    let prep = |set: &Labeled<T>| -> Result<(Array2<T>, Array2<T>)> {
        let sigs: Vec<&SpectralSignature<T>> = set.iter().map(|s| s.0).collect();
        let x = design_matrix(&sigs, &input_norm, cfg.input_bands)?;
        let y = Array2::from_shape_fn((set.len(), 1), |(i, _)| T::of((set[i].1 - label_mean) / label_std));
        Ok((x, y))
    };
    let (xt, yt) = prep(&train)?;
    let (xv, yv) = prep(&val)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mlp = Mlp::new(cfg.input_bands, &cfg.hidden, &mut rng);
    let mut opt = Adam::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut best: Option<(f64, Mlp<T>)> = None;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut stopped_early = false;
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(order.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let xb = xt.select(Axis(0), &idx);
        let yb = yt.select(Axis(0), &idx);
        mlp.zero_grad();
        let loss = mlp.loss_and_grad(xb.view(), yb.view()).as_f64();
        if !loss.is_finite() {
            return Err(Error::Diverged { step, msg: format!("regression loss became {loss}") });
        }
        opt.step(&mut mlp.params_mut(), cfg.learning_rate);

        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let tr = mse_of(&mlp, &xt, &yt);
            let score = if val.is_empty() { tr } else { mse_of(&mlp, &xv, &yv) };
            history.push((step, tr, score));
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, mlp.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if !val.is_empty() && since_best >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let mlp = best.map(|b| b.1).unwrap_or(mlp);
    Ok(RegressorOutcome {
        checkpoint: RegressorCheckpoint { config: cfg.clone(), mlp, input_norm, label_mean, label_std },
        history,
        stopped_early,
    })
}

/// Error metrics, in native label units, over every signature given.
pub fn evaluate_regressor<T: Scalar>(
    ckpt: &RegressorCheckpoint<T>,
    signatures: &[(String, SpectralSignature<T>)],
    labels: &GasLabelSet,
) -> Result<RegressionReport> {
    if signatures.is_empty() {
        return Err(Error::validation("no signatures to evaluate"));
    }
    let mut y = Vec::with_capacity(signatures.len());
    for (id, _) in signatures {
        y.push(labels.get(id).ok_or_else(|| Error::validation(format!("signature {id} has no label")))?);
    }
    let sigs: Vec<&SpectralSignature<T>> = signatures.iter().map(|s| &s.1).collect();
    let yhat = ckpt.predict(&sigs)?;
    RegressionReport::compute(&y, &yhat)
}
