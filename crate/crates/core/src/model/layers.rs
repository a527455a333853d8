use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::prelude::*;
use crate::tensor::{BatchStats, ParamId, ParamStore, Tape, Tensor, Var};
use crate::Result;

pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect();
    Tensor::new(shape, data).expect("element count matches")
}

pub(crate) fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape, data).expect("element count matches")
}

/// `y = x·W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(rng, &[fan_in, fan_out], bound))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Self { w, b })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub(crate) const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[d]))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and report them for the running
    /// averages.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

/// Batch statistics to fold into one layer's running averages.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub(crate) mean: ParamId,
    pub(crate) var: ParamId,
    pub(crate) stats: BatchStats<f32>,
}

/// Exponential running averages with `momentum` weight on the new batch;
/// the stored variance is the unbiased estimate.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate], momentum: f64) {
    let m = momentum as f32;
    for u in updates {
        let n = u.stats.count as f32;
        let correction = n / (n - 1.0);
        for (r, &b) in store.get_mut(u.mean).value.data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in store.get_mut(u.var).value.data_mut().iter_mut().zip(&u.stats.var) {
            *r = (1.0 - m) * *r + m * b * correction;
        }
    }
}

/// Bias-free convolution followed by batch normalization.
#[derive(Debug, Clone)]
pub(crate) struct ConvBn {
    pub conv: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvBn {
    /// Kaiming-uniform kernel for ReLU networks.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let conv = store.add(format!("{name}.conv"), uniform(rng, &[cout, cin, kernel, kernel], bound))?;
        let gamma = store.add(format!("{name}.bn.gamma"), Tensor::ones(&[cout]))?;
        let beta = store.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout]))?;
        let mean = store.add_buffer(format!("{name}.bn.mean"), Tensor::zeros(&[cout]))?;
        let var = store.add_buffer(format!("{name}.bn.var"), Tensor::ones(&[cout]))?;
        Ok(Self { conv, gamma, beta, mean, var, stride, padding })
    }

    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        x: Var,
        mode: BnMode,
        eps: f64,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let w = tape.param(store, self.conv);
        let y = tape.conv2d(x, w, self.stride, self.padding)?;
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        match mode {
            BnMode::Train => {
                let (out, stats) = tape.batch_norm_train(y, g, b, eps)?;
                updates.push(BnUpdate { mean: self.mean, var: self.var, stats });
                Ok(out)
            }
            BnMode::Eval => tape.batch_norm_eval(y, g, b, store.value(self.mean), store.value(self.var), eps),
        }
    }
}
