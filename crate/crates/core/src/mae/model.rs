//! The spectral masked autoencoder: per-arm patch embeddings, a shared
//! encoder/decoder trunk with spectral self-attention, and a pixel head.
//!
//! Every spatial position forms its own attention sequence made of that
//! position's spectral tokens. A batch is described by a [`BatchPlan`]:
//! encoder rows for each sequence followed, in the decoder, by positioned
//! mask-token queries.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::config::ModelConfig;
use super::tokens::{positional_encoding, Patches, TokenCoord};
use crate::error::{Error, Result};
use crate::nn::{normal_init, Linear, Param, Parameterized, Transformer, TransformerCache};
use crate::scalar::Scalar;

/// Which input projection embeds the encoder tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Hyperspectral,
    Multispectral,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMae<T> {
    pub config: ModelConfig,
    pub n_spatial: usize,
    pub embed_hs: Linear<T>,
    /// One band per token, so inputs have length `p * p`.
    pub embed_ms: Linear<T>,
    pub mask_token: Param<T>,
    pub encoder: Transformer<T>,
    pub decoder: Transformer<T>,
    pub head: Linear<T>,
}

/// Token layout of one batch.
#[derive(Debug, Clone)]
pub struct BatchPlan<T> {
    pub arm: Arm,
    /// `S * enc_len` flattened patches, sequence-major.
    pub enc_inputs: Array2<T>,
    pub enc_pos: Array2<T>,
    pub enc_len: usize,
    /// Positional encodings of the `S * query_len` mask-token queries.
    pub query_pos: Array2<T>,
    pub query_len: usize,
    /// Decoder row feeding each predicted token.
    pub outputs: Vec<usize>,
    /// `(cube index in batch, coordinate)` of each predicted token.
    pub out_coords: Vec<(usize, TokenCoord)>,
    pub targets: Option<Array2<T>>,
    /// Per predicted token: whether it contributes to the loss.
    pub loss_rows: Vec<bool>,
}

impl<T> BatchPlan<T> {
    pub fn sequences(&self) -> usize {
        self.enc_inputs.nrows() / self.enc_len
    }

    pub fn dec_len(&self) -> usize {
        self.enc_len + self.query_len
    }
}

pub struct ForwardCache<T> {
    pub encoder: TransformerCache<T>,
    pub decoder: TransformerCache<T>,
    gathered: Array2<T>,
}

fn encodings<T: Scalar>(coords: impl Iterator<Item = (usize, usize, f64)>, dim: usize, n_spatial: usize) -> Result<Array2<T>> {
    let rows: Vec<Vec<f64>> =
        coords.map(|(x, y, l)| positional_encoding(x, y, l, dim, n_spatial)).collect::<Result<_>>()?;
    Ok(Array2::from_shape_fn((rows.len(), dim), |(i, j)| T::of(rows[i][j])))
}

impl<T: Scalar> SpectralMae<T> {
    /// Randomly initialized model for hyperspectral cubes of height `height`.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, height: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let p2 = config.spatial_patch * config.spatial_patch;
        let hs_len = config.band_group * p2;
        Ok(SpectralMae {
            n_spatial: config.resolved_n_spatial(height),
            embed_hs: Linear::new(hs_len, d, rng),
            embed_ms: Linear::new(p2, d, rng),
            mask_token: Param::new(normal_init(1, d, 0.02, rng)),
            encoder: Transformer::new(config.encoder_layers, d, config.heads, config.mlp_ratio, rng),
            decoder: Transformer::new(config.decoder_layers, d, config.heads, config.mlp_ratio, rng),
            head: Linear::new(d, hs_len, rng),
            config,
        })
    }

    pub fn token_len(&self) -> usize {
        self.config.band_group * self.config.spatial_patch * self.config.spatial_patch
    }

    fn arm(&self, arm: Arm) -> &Linear<T> {
        match arm {
            Arm::Hyperspectral => &self.embed_hs,
            Arm::Multispectral => &self.embed_ms,
        }
    }

    /// `E = W_embed . flatten(P) + b_embed` for one patch.
    pub fn embed(&self, patch: &[T], arm: Arm) -> Result<Array1<T>> {
        let lin = self.arm(arm);
        if patch.len() != lin.input_dim() {
            return Err(Error::shape(format!("patch length {} but the arm expects {}", patch.len(), lin.input_dim())));
        }
        let x = ArrayView2::from_shape((1, patch.len()), patch).expect("row vector");
        Ok(lin.forward(x).row(0).to_owned())
    }

    /// Masked reconstruction plan: each cube's `masked` groups become
    /// decoder queries; visible groups go through the encoder.
    pub fn plan_masked(&self, batch: &[&Patches<T>], masked: &[Vec<usize>], masked_only_loss: bool) -> Result<BatchPlan<T>> {
        let first = batch.first().ok_or_else(|| Error::validation("empty batch"))?;
        let groups = first.layout.groups();
        let n_mask = masked[0].len();
        if n_mask >= groups {
            return Err(Error::validation("at least one spectral group must stay visible"));
        }
        let (enc_len, query_len) = (groups - n_mask, n_mask);
        let d = self.config.embed_dim;
        let tl = self.token_len();
        let mut enc_rows = Vec::new();
        let mut enc_coords = Vec::new();
        let mut query_coords = Vec::new();
        let mut outputs = Vec::new();
        let mut out_coords = Vec::new();
        let mut loss_rows = Vec::new();
        let mut targets = Vec::new();
        let mut seq = 0usize;
        for (ci, (p, mask)) in batch.iter().zip(masked).enumerate() {
            if p.layout.groups() != groups || mask.len() != n_mask || p.layout.token_len() != tl {
                return Err(Error::shape("cubes in a batch must share band structure and mask size"));
            }
            let lambdas = p.layout.group_wavelengths();
            let mut is_masked = vec![false; groups];
            for &g in mask {
                is_masked[g] = true;
            }
            for y in 0..p.layout.grid_h {
                for x in 0..p.layout.grid_w {
                    let base = seq * (enc_len + query_len);
                    let (mut vi, mut mi) = (0, 0);
                    for g in 0..groups {
                        let c = TokenCoord { x, y, group: g };
                        let row = p.layout.index(c);
                        if is_masked[g] {
                            query_coords.push((x, y, lambdas[g]));
                            outputs.push(base + enc_len + mi);
                            mi += 1;
                        } else {
                            enc_rows.push((ci, row));
                            enc_coords.push((x, y, lambdas[g]));
                            outputs.push(base + vi);
                            vi += 1;
                        }
                        out_coords.push((ci, c));
                        loss_rows.push(!masked_only_loss || is_masked[g]);
                        targets.push((ci, row));
                    }
                    seq += 1;
                }
            }
        }
        let enc_inputs = Array2::from_shape_fn((enc_rows.len(), tl), |(i, j)| batch[enc_rows[i].0].values[[enc_rows[i].1, j]]);
        let target = Array2::from_shape_fn((targets.len(), tl), |(i, j)| batch[targets[i].0].values[[targets[i].1, j]]);
        Ok(BatchPlan {
            arm: Arm::Hyperspectral,
            enc_inputs,
            enc_pos: encodings(enc_coords.into_iter(), d, self.n_spatial)?,
            enc_len,
            query_pos: encodings(query_coords.into_iter(), d, self.n_spatial)?,
            query_len,
            outputs,
            out_coords,
            targets: Some(target),
            loss_rows,
        })
    }

    /// Cross-sensor plan: every multispectral band is an encoder token
    /// and every hyperspectral group of `hs_lambdas` is a decoder query.
    pub fn plan_cross(&self, ms: &[&Patches<T>], hs_lambdas: &[f64], targets: Option<&[&Patches<T>]>) -> Result<BatchPlan<T>> {
        let first = ms.first().ok_or_else(|| Error::validation("empty batch"))?;
        if first.layout.band_group != 1 || first.layout.patch != self.config.spatial_patch {
            return Err(Error::config("multispectral patches must use one band per token and the model's spatial patch"));
        }
        let ms_groups = first.layout.groups();
        let hs_groups = hs_lambdas.len();
        let d = self.config.embed_dim;
        let p2 = self.config.spatial_patch * self.config.spatial_patch;
        let mut enc_rows = Vec::new();
        let mut enc_coords = Vec::new();
        let mut query_coords = Vec::new();
        let mut outputs = Vec::new();
        let mut out_coords = Vec::new();
        let mut target_rows = Vec::new();
        let mut seq = 0usize;
        for (ci, p) in ms.iter().enumerate() {
            if p.layout.groups() != ms_groups || p.layout.token_len() != p2 {
                return Err(Error::shape("multispectral cubes in a batch must share band structure"));
            }
            let ms_lambdas = p.layout.group_wavelengths();
            if let Some(t) = targets {
                let tl = &t[ci].layout;
                if tl.groups() != hs_groups || tl.grid_h != p.layout.grid_h || tl.grid_w != p.layout.grid_w {
                    return Err(Error::shape("target cube layout does not match the input cube"));
                }
            }
            for y in 0..p.layout.grid_h {
                for x in 0..p.layout.grid_w {
                    let base = seq * (ms_groups + hs_groups);
                    for g in 0..ms_groups {
                        enc_rows.push((ci, p.layout.index(TokenCoord { x, y, group: g })));
                        enc_coords.push((x, y, ms_lambdas[g]));
                    }
                    for (g, &l) in hs_lambdas.iter().enumerate() {
                        let c = TokenCoord { x, y, group: g };
                        query_coords.push((x, y, l));
                        outputs.push(base + ms_groups + g);
                        out_coords.push((ci, c));
                        if let Some(t) = targets {
                            target_rows.push((ci, t[ci].layout.index(c)));
                        }
                    }
                    seq += 1;
                }
            }
        }
        let enc_inputs = Array2::from_shape_fn((enc_rows.len(), p2), |(i, j)| ms[enc_rows[i].0].values[[enc_rows[i].1, j]]);
        let tl = self.token_len();
        let target = targets.map(|t| Array2::from_shape_fn((target_rows.len(), tl), |(i, j)| t[target_rows[i].0].values[[target_rows[i].1, j]]));
        let n_out = outputs.len();
        Ok(BatchPlan {
            arm: Arm::Multispectral,
            enc_inputs,
            enc_pos: encodings(enc_coords.into_iter(), d, self.n_spatial)?,
            enc_len: ms_groups,
            query_pos: encodings(query_coords.into_iter(), d, self.n_spatial)?,
            query_len: hs_groups,
            outputs,
            out_coords,
            targets: target,
            loss_rows: vec![true; n_out],
        })
    }

    /// Encoder over visible tokens; each sequence is one spatial position.
    pub fn encode(&self, tokens: ArrayView2<T>, seq_len: usize) -> (Array2<T>, TransformerCache<T>) {
        self.encoder.forward(tokens, seq_len)
    }

    /// Interleaves latents with positioned mask tokens.
    fn decoder_input(&self, latents: &Array2<T>, plan: &BatchPlan<T>) -> Array2<T> {
        let (le, lq, d) = (plan.enc_len, plan.query_len, self.config.embed_dim);
        let s = plan.sequences();
        let mut x = Array2::zeros((s * (le + lq), d));
        let mask = self.mask_token.value.row(0);
        for k in 0..s {
            let base = k * (le + lq);
            x.slice_mut(s![base..base + le, ..]).assign(&latents.slice(s![k * le..(k + 1) * le, ..]));
            let mut q = x.slice_mut(s![base + le..base + le + lq, ..]);
            q.assign(&plan.query_pos.slice(s![k * lq..(k + 1) * lq, ..]));
            q += &mask;
        }
        x
    }

    /// Decoder over the full token set followed by the pixel head.
    pub fn decode(&self, dec_in: ArrayView2<T>, plan: &BatchPlan<T>) -> (Array2<T>, TransformerCache<T>, Array2<T>) {
        let (h, cache) = self.decoder.forward(dec_in, plan.dec_len());
        let gathered = h.select(Axis(0), &plan.outputs);
        let preds = self.head.forward(gathered.view());
        (preds, cache, gathered)
    }

    /// Per-token predictions in plan output order.
    pub fn forward(&self, plan: &BatchPlan<T>) -> (Array2<T>, ForwardCache<T>) {
        let mut x0 = self.arm(plan.arm).forward(plan.enc_inputs.view());
        x0 += &plan.enc_pos;
        let (latents, encoder) = self.encode(x0.view(), plan.enc_len);
        let dec_in = self.decoder_input(&latents, plan);
        let (preds, decoder, gathered) = self.decode(dec_in.view(), plan);
        (preds, ForwardCache { encoder, decoder, gathered })
    }

    /// Mean absolute error over the loss rows of the plan.
    pub fn loss(&self, plan: &BatchPlan<T>, preds: &Array2<T>) -> Result<T> {
        let targets = plan.targets.as_ref().ok_or_else(|| Error::validation("plan has no targets"))?;
        let mut sum = T::zero();
        let mut count = 0usize;
        for (r, &used) in plan.loss_rows.iter().enumerate() {
            if used {
                for (p, t) in preds.row(r).iter().zip(targets.row(r)) {
                    sum += (*p - *t).abs();
                }
                count += preds.ncols();
            }
        }
        if count == 0 {
            return Err(Error::validation("no tokens contribute to the loss"));
        }
        Ok(sum / T::of(count as f64))
    }

    /// Forward, loss and backward. Gradients are accumulated, not reset.
    pub fn loss_and_grad(&mut self, plan: &BatchPlan<T>) -> Result<T> {
        let (preds, cache) = self.forward(plan);
        let loss = self.loss(plan, &preds)?;
        let targets = plan.targets.as_ref().expect("checked by loss");
        let count = plan.loss_rows.iter().filter(|&&u| u).count() * preds.ncols();
        let inv = T::one() / T::of(count as f64);
        let mut dpred = Array2::zeros(preds.raw_dim());
        for (r, &used) in plan.loss_rows.iter().enumerate() {
            if used {
                for k in 0..preds.ncols() {
                    let diff = preds[[r, k]] - targets[[r, k]];
                    dpred[[r, k]] = if diff > T::zero() {
                        inv
                    } else if diff < T::zero() {
                        -inv
                    } else {
                        T::zero()
                    };
                }
            }
        }
        let dgathered = self.head.backward(cache.gathered.view(), dpred.view());
        let mut ddec = Array2::zeros((plan.sequences() * plan.dec_len(), self.config.embed_dim));
        for (i, &row) in plan.outputs.iter().enumerate() {
            let mut r = ddec.row_mut(row);
            r += &dgathered.row(i);
        }
        let ddec_in = self.decoder.backward(&cache.decoder, ddec.view());
        let (le, lq) = (plan.enc_len, plan.query_len);
        let mut dlatent = Array2::zeros((plan.sequences() * le, self.config.embed_dim));
        let mut dmask = Array1::<T>::zeros(self.config.embed_dim);
        for k in 0..plan.sequences() {
            let base = k * (le + lq);
            dlatent.slice_mut(s![k * le..(k + 1) * le, ..]).assign(&ddec_in.slice(s![base..base + le, ..]));
            dmask += &ddec_in.slice(s![base + le..base + le + lq, ..]).sum_axis(Axis(0));
        }
        {
            let mut g = self.mask_token.grad.row_mut(0);
            g += &dmask;
        }
        let dx0 = self.encoder.backward(&cache.encoder, dlatent.view());
        let arm = match plan.arm {
            Arm::Hyperspectral => &mut self.embed_hs,
            Arm::Multispectral => &mut self.embed_ms,
        };
        arm.backward(plan.enc_inputs.view(), dx0.view());
        Ok(loss)
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> SpectralMae<U> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut out = SpectralMae::<U>::new(self.config.clone(), 1, &mut rng).expect("config already valid");
        out.n_spatial = self.n_spatial;
        for ((_, dst), (_, src)) in out.params_mut().into_iter().zip(self.params()) {
            dst.value = src.value.mapv(|v| U::of(v.as_f64()));
        }
        out
    }
}

impl<T: Scalar> Parameterized<T> for SpectralMae<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        let _ = prefix;
        self.embed_hs.visit("embed_hs", out);
        self.embed_ms.visit("embed_ms", out);
        out.push(("mask_token".into(), &self.mask_token));
        self.encoder.visit("encoder", out);
        self.decoder.visit("decoder", out);
        self.head.visit("head", out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        let _ = prefix;
        self.embed_hs.visit_mut("embed_hs", out);
        self.embed_ms.visit_mut("embed_ms", out);
        out.push(("mask_token".into(), &mut self.mask_token));
        self.encoder.visit_mut("encoder", out);
        self.decoder.visit_mut("decoder", out);
        self.head.visit_mut("head", out);
    }
}
