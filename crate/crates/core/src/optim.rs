//! Adaptive-moment optimizer with a cosine learning-rate schedule.

use std::f64::consts::PI;

use ndarray::{Array2, Zip};

use crate::nn::Param;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl<T: Scalar> Adam<T> {
    /// One update of every parameter from its accumulated gradient.
    /// Parameters must be passed in the same order on every call.
    pub fn step(&mut self, params: &mut [(String, &mut Param<T>)], lr: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| Array2::zeros(p.value.raw_dim())).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed between steps");
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        let one = T::one();
        for (((_, p), m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            Zip::from(&mut p.value).and(&p.grad).and(m).and(v).for_each(|w, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// `base * 0.5 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
}
