use serde::{Deserialize, Serialize};

use crate::prelude::*;
use crate::tensor::{ParamId, ParamStore, Real, Tensor};
use crate::{Error, Result};

/// Linear warmup followed by half-cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
}

impl Schedule {
    pub fn new(max_lr: f64, total_steps: usize, warmup_fraction: f64) -> Result<Self> {
        if !(max_lr >= 0.0 && max_lr.is_finite()) {
            return Err(Error::Parameter(format!("max_lr must be finite and non-negative, got {max_lr}")));
        }
        if total_steps == 0 {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if !(warmup_fraction > 0.0 && warmup_fraction < 1.0) {
            return Err(Error::Parameter(format!("warmup fraction {warmup_fraction} outside (0, 1)")));
        }
        Ok(Self { max_lr, total_steps, warmup_fraction })
    }

    /// Learning rate at training progress `t ∈ [0, 1]`.
    pub fn at_fraction(&self, t: f64) -> f64 {
        let w = self.warmup_fraction;
        if t <= w {
            self.max_lr * t / w
        } else {
            self.max_lr * 0.5 * (1.0 + (core::f64::consts::PI * (t - w) / (1.0 - w)).cos())
        }
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Contract(format!("step {step} beyond the schedule's {} steps", self.total_steps)));
        }
        Ok(self.at_fraction(step as f64 / self.total_steps as f64))
    }
}

/// Slow-weight wrapper: every `k` inner steps the slow weights move a
/// fraction `alpha` toward the fast ones, and the fast weights restart there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LookAhead {
    pub k: usize,
    pub alpha: f64,
}

impl Default for LookAhead {
    fn default() -> Self {
        Self { k: 5, alpha: 0.5 }
    }
}

/// SGD with momentum and weight decay folded into the gradient, optionally
/// wrapped in LookAhead.
///
/// Only parameters that track gradients and hold one are touched by a step.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Real = f32> {
    momentum: f64,
    weight_decay: f64,
    lookahead: Option<LookAhead>,
    velocity: Vec<Option<Tensor<T>>>,
    slow: Vec<Option<Tensor<T>>>,
    steps: u64,
}

impl<T: Real> Optimizer<T> {
    /// Slow weights start as a copy of the current trainable parameters.
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64, lookahead: Option<LookAhead>) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Parameter(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Parameter(format!("weight decay must be non-negative, got {weight_decay}")));
        }
        if let Some(la) = lookahead {
            if la.k == 0 || !(0.0..=1.0).contains(&la.alpha) {
                return Err(Error::Parameter(format!("lookahead needs k >= 1 and alpha in [0, 1], got {la:?}")));
            }
        }
        let slow = match lookahead {
            Some(_) => store.iter().map(|(_, p)| p.requires_grad.then(|| p.value.clone())).collect(),
            None => vec![None; store.len()],
        };
        Ok(Self { momentum, weight_decay, lookahead, velocity: vec![None; store.len()], slow, steps: 0 })
    }

    /// Inner steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn slow_weights(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slow.get(id.index()).and_then(Option::as_ref)
    }

    /// `v ← μ·v + g + λ·w; w ← w − lr·v` for every parameter with a stored
    /// gradient, then the LookAhead sync when the step count reaches a
    /// multiple of `k`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if store.len() != self.velocity.len() {
            return Err(Error::State("parameter store changed since the optimizer was built".into()));
        }
        let (mu, wd, lr) = (T::from_f64(self.momentum), T::from_f64(self.weight_decay), T::from_f64(lr));
        for (id, p) in store.iter_mut() {
            let Some(g) = p.grad.as_ref().filter(|_| p.requires_grad) else { continue };
            if g.shape() != p.value.shape() {
                return Err(Error::Dimension(format!(
                    "gradient {:?} does not match parameter {} {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((v, &g), w) in v.data_mut().iter_mut().zip(g.data()).zip(p.value.data_mut()) {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
        }
        self.steps += 1;
        if let Some(la) = self.lookahead {
            if self.steps % la.k as u64 == 0 {
                self.sync(store, la.alpha);
            }
        }
        Ok(())
    }

    fn sync(&mut self, store: &mut ParamStore<T>, alpha: f64) {
        let (a, keep) = (T::from_f64(alpha), T::from_f64(1.0 - alpha));
        for (id, p) in store.iter_mut() {
            let Some(slow) = self.slow[id.index()].as_mut() else { continue };
            for (s, f) in slow.data_mut().iter_mut().zip(p.value.data_mut()) {
                *s = keep * *s + a * *f;
                *f = *s;
            }
        }
    }
}
