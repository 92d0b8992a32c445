//! Minimal dense layers with explicit forward caches and hand-written
//! backward passes. Gradients accumulate into [`Param::grad`].

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::scalar::Scalar;

/// A learnable tensor and its accumulated gradient. Vectors are stored as `1 x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Array2<T>,
    pub grad: Array2<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Array2<T>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Something that owns named parameters.
pub trait Parameterized<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>);

    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn zero_grad(&mut self)
    where
        T: Scalar,
    {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x W^T + b` with `W` stored as `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    /// Xavier-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
        let w = Array2::from_shape_fn((output, input), |_| T::of(dist.sample(rng)));
        Linear { weight: Param::new(w), bias: Param::new(Array2::zeros((1, output))) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight.value.t());
        y += &self.bias.value;
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: ArrayView2<T>, dy: ArrayView2<T>) -> Array2<T> {
        self.weight.grad += &dy.t().dot(&x);
        self.bias.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.weight.value)
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm { gamma: Param::new(Array2::ones((1, dim))), beta: Param::new(Array2::zeros((1, dim))) }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let d = T::of(x.ncols() as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut xhat = x.to_owned();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            let r = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * r);
            inv_std.push(r);
        }
        let mut y = &xhat * &self.gamma.value;
        y += &self.beta.value;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, dy: ArrayView2<T>) -> Array2<T> {
        self.gamma.grad += &(&dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.beta.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = &dy * &self.gamma.value;
        let d = T::of(dxhat.ncols() as f64);
        let mut dx = Array2::zeros(dxhat.raw_dim());
        for (i, (g, xh)) in dxhat.rows().into_iter().zip(cache.xhat.rows()).enumerate() {
            let mean_g = g.sum() / d;
            let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
            let r = cache.inv_std[i];
            Zip::from(dx.row_mut(i)).and(&g).and(&xh).for_each(|o, &gi, &xi| {
                *o = r * (gi - mean_g - xi * mean_gx);
            });
        }
        dx
    }
}

impl<T: Scalar> Parameterized<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x)
}

/// In-place numerically stable softmax over each row.
pub fn softmax_rows<T: Scalar>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Multi-head self-attention restricted to contiguous, equal-length
/// sequences of rows: rows `[k*L, (k+1)*L)` attend only to each other.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention<T> {
    pub heads: usize,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
}

pub struct AttentionCache<T> {
    x: Array2<T>,
    qkv: Array2<T>,
    /// One `L x L` map per (sequence, head), sequence-major.
    weights: Vec<Array2<T>>,
    context: Array2<T>,
    seq_len: usize,
}

impl<T> AttentionCache<T> {
    pub fn attention_maps(&self) -> &[Array2<T>] {
        &self.weights
    }
}

impl<T: Scalar> SelfAttention<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "embedding dim must divide into heads");
        SelfAttention { heads, qkv: Linear::new(dim, 3 * dim, rng), proj: Linear::new(dim, dim, rng) }
    }

    pub fn forward(&self, x: ArrayView2<T>, seq_len: usize) -> (Array2<T>, AttentionCache<T>) {
        let (n, d) = x.dim();
        assert!(seq_len > 0 && n % seq_len == 0, "rows must split into whole sequences");
        let dh = d / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let qkv = self.qkv.forward(x);
        let mut context = Array2::zeros((n, d));
        let mut weights = Vec::with_capacity(n / seq_len * self.heads);
        for r0 in (0..n).step_by(seq_len) {
            let rows = r0..r0 + seq_len;
            for h in 0..self.heads {
                let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
                let v = qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut a = q.dot(&k.t());
                a.mapv_inplace(|z| z * scale);
                softmax_rows(&mut a);
                context.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]).assign(&a.dot(&v));
                weights.push(a);
            }
        }
        let y = self.proj.forward(context.view());
        (y, AttentionCache { x: x.to_owned(), qkv, weights, context, seq_len })
    }

    pub fn backward(&mut self, cache: &AttentionCache<T>, dy: ArrayView2<T>) -> Array2<T> {
        let (n, d) = cache.x.dim();
        let dh = d / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let l = cache.seq_len;
        let dcontext = self.proj.backward(cache.context.view(), dy);
        let mut dqkv = Array2::zeros((n, 3 * d));
        for (si, r0) in (0..n).step_by(l).enumerate() {
            let rows = r0..r0 + l;
            for h in 0..self.heads {
                let a = &cache.weights[si * self.heads + h];
                let q = cache.qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = cache.qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
                let v = cache.qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let dout = dcontext.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let da = dout.dot(&v.t());
                let dv = a.t().dot(&dout);
                let mut ds = Array2::zeros((l, l));
                for i in 0..l {
                    let dot: T = (0..l).map(|j| da[[i, j]] * a[[i, j]]).sum();
                    for j in 0..l {
                        ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot) * scale;
                    }
                }
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);
                dqkv.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]).assign(&dq);
                dqkv.slice_mut(s![rows.clone(), d + h * dh..d + (h + 1) * dh]).assign(&dk);
                dqkv.slice_mut(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
            }
        }
        self.qkv.backward(cache.x.view(), dqkv.view())
    }
}

impl<T: Scalar> Parameterized<T> for SelfAttention<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.qkv.visit(&join(prefix, "qkv"), out);
        self.proj.visit(&join(prefix, "proj"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.qkv.visit_mut(&join(prefix, "qkv"), out);
        self.proj.visit_mut(&join(prefix, "proj"), out);
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub attn: SelfAttention<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    ln2_out: Array2<T>,
    hidden_pre: Array2<T>,
    hidden: Array2<T>,
}

impl<T> BlockCache<T> {
    pub fn attention(&self) -> &AttentionCache<T> {
        &self.attn
    }
}

impl<T: Scalar> Block<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        Block {
            ln1: LayerNorm::new(dim),
            attn: SelfAttention::new(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            fc1: Linear::new(dim, dim * mlp_ratio, rng),
            fc2: Linear::new(dim * mlp_ratio, dim, rng),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>, seq_len: usize) -> (Array2<T>, BlockCache<T>) {
        let (h1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(h1.view(), seq_len);
        let x1 = &x + &a;
        let (h2, ln2) = self.ln2.forward(x1.view());
        let hidden_pre = self.fc1.forward(h2.view());
        let hidden = hidden_pre.mapv(gelu);
        let out = &x1 + &self.fc2.forward(hidden.view());
        (out, BlockCache { ln1, attn, ln2, ln2_out: h2, hidden_pre, hidden })
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, dy: ArrayView2<T>) -> Array2<T> {
        let dhidden = self.fc2.backward(cache.hidden.view(), dy);
        let mut dpre = dhidden;
        Zip::from(&mut dpre).and(&cache.hidden_pre).for_each(|g, &z| *g *= gelu_grad(z));
        let dh2 = self.fc1.backward(cache.ln2_out.view(), dpre.view());
        let mut dx1 = self.ln2.backward(&cache.ln2, dh2.view());
        dx1 += &dy;
        let dh1 = self.attn.backward(&cache.attn, dx1.view());
        let mut dx = self.ln1.backward(&cache.ln1, dh1.view());
        dx += &dx1;
        dx
    }
}

impl<T: Scalar> Parameterized<T> for Block<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.ln1.visit(&join(prefix, "ln1"), out);
        self.attn.visit(&join(prefix, "attn"), out);
        self.ln2.visit(&join(prefix, "ln2"), out);
        self.fc1.visit(&join(prefix, "fc1"), out);
        self.fc2.visit(&join(prefix, "fc2"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.ln1.visit_mut(&join(prefix, "ln1"), out);
        self.attn.visit_mut(&join(prefix, "attn"), out);
        self.ln2.visit_mut(&join(prefix, "ln2"), out);
        self.fc1.visit_mut(&join(prefix, "fc1"), out);
        self.fc2.visit_mut(&join(prefix, "fc2"), out);
    }
}

/// A stack of blocks followed by a final layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T> {
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
}

pub struct TransformerCache<T> {
    pub blocks: Vec<BlockCache<T>>,
    norm: LayerNormCache<T>,
}

impl<T: Scalar> Transformer<T> {
    pub fn new<R: Rng + ?Sized>(depth: usize, dim: usize, heads: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        Transformer { blocks: (0..depth).map(|_| Block::new(dim, heads, mlp_ratio, rng)).collect(), norm: LayerNorm::new(dim) }
    }

    pub fn forward(&self, x: ArrayView2<T>, seq_len: usize) -> (Array2<T>, TransformerCache<T>) {
        let mut h = x.to_owned();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, c) = block.forward(h.view(), seq_len);
            caches.push(c);
            h = next;
        }
        let (out, norm) = self.norm.forward(h.view());
        (out, TransformerCache { blocks: caches, norm })
    }

    pub fn backward(&mut self, cache: &TransformerCache<T>, dy: ArrayView2<T>) -> Array2<T> {
        let mut g = self.norm.backward(&cache.norm, dy);
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = block.backward(c, g.view());
        }
        g
    }
}

impl<T: Scalar> Parameterized<T> for Transformer<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &i.to_string()), out);
        }
        self.norm.visit(&join(prefix, "norm"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &i.to_string()), out);
        }
        self.norm.visit_mut(&join(prefix, "norm"), out);
    }
}

/// Small-variance normal initializer for token-like parameters.
pub fn normal_init<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| T::of(dist.sample(rng)))
}
