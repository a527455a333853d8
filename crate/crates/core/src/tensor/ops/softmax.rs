use super::rows_last;
use crate::error::dim_err;
use crate::prelude::*;
use crate::tensor::tape::Backward;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    row.iter().map(|&v| v - lse).collect()
}

struct SoftmaxBack;

impl<T: Real> Backward<T> for SoftmaxBack {
    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (_, d) = rows_last(out.shape());
        let mut dx = Vec::with_capacity(out.len());
        for (y, g) in out.data().chunks_exact(d).zip(grad.data().chunks_exact(d)) {
            let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
            dx.extend(y.iter().zip(g).map(|(&a, &b)| a * (b - dot)));
        }
        vec![Some(Tensor::new(out.shape(), dx).expect("same shape"))]
    }
}

struct CrossEntropyBack<T> {
    probs: Vec<T>,
    targets: Vec<Option<usize>>,
    count: usize,
}

impl<T: Real> Backward<T> for CrossEntropyBack<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (_, v) = rows_last(inputs[0].shape());
        let scale = grad.data()[0] / T::from_f64(self.count as f64);
        let mut dx = vec![T::zero(); inputs[0].len()];
        for (r, t) in self.targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &mut dx[r * v..(r + 1) * v];
            for (d, &p) in row.iter_mut().zip(&self.probs[r * v..(r + 1) * v]) {
                *d = p * scale;
            }
            row[t] -= scale;
        }
        vec![Some(Tensor::new(inputs[0].shape(), dx).expect("same shape"))]
    }
}

struct BceBack {
    targets: Vec<f64>,
    rows: usize,
}

impl<T: Real> Backward<T> for BceBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let scale = grad.data()[0] / T::from_f64(self.rows as f64);
        let dx = inputs[0]
            .data()
            .iter()
            .zip(&self.targets)
            .map(|(&x, &y)| (super::elementwise::sigmoid(x) - T::from_f64(y)) * scale)
            .collect();
        vec![Some(Tensor::new(inputs[0].shape(), dx).expect("same shape"))]
    }
}

impl<T: Real> Tape<'_, T> {
    /// Softmax over the last axis. With `causal`, the last two axes must be
    /// square and entry `(i, j)` is excluded whenever `j > i`.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, d) = rows_last(&shape);
        if causal && (shape.len() < 2 || shape[shape.len() - 2] != d) {
            return Err(dim_err!("causal softmax needs square trailing axes, got {:?}", shape));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let visible = if causal { r % d + 1 } else { d };
            let row = &xv[r * d..r * d + visible];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let dst = &mut out[r * d..r * d + visible];
            let mut sum = T::zero();
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            let inv = T::one() / sum;
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let value = Tensor::new(&shape, out)?;
        self.record("softmax", value, &[x], || SoftmaxBack)
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    /// Rows whose target equals `ignore_index` contribute neither loss nor
    /// gradient.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: Option<usize>) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(dim_err!("cross entropy: logits {:?} vs {} targets", shape, targets.len()));
        }
        let v = shape[1];
        let mut kept = Vec::with_capacity(targets.len());
        for &t in targets {
            if Some(t) == ignore_index {
                kept.push(None);
            } else if t < v {
                kept.push(Some(t));
            } else {
                return Err(Error::Parameter(format!("target {t} outside [0, {v})")));
            }
        }
        let count = kept.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::UndefinedMean);
        }
        let xv = self.value(logits).data();
        let mut probs = vec![T::zero(); xv.len()];
        let mut total = 0.0f64;
        for (r, t) in kept.iter().enumerate() {
            let Some(t) = *t else { continue };
            let ls = log_softmax_row(&xv[r * v..(r + 1) * v]);
            total -= ls[t].as_f64();
            for (p, &l) in probs[r * v..(r + 1) * v].iter_mut().zip(&ls) {
                *p = l.exp();
            }
        }
        let value = Tensor::scalar(T::from_f64(total / count as f64));
        self.record("softmax_cross_entropy", value, &[logits], move || CrossEntropyBack { probs, targets: kept, count })
    }

    /// Binary cross-entropy on logits `[N, K]` against 0/1 targets: the sum
    /// over the `K` outputs of each output's mean over the `N` rows.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] * shape[1] != targets.len() {
            return Err(dim_err!("bce: logits {:?} vs {} targets", shape, targets.len()));
        }
        if shape[0] == 0 {
            return Err(Error::UndefinedMean);
        }
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| {
                let x = x.as_f64();
                x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
            })
            .sum();
        let rows = shape[0];
        let value = Tensor::scalar(T::from_f64(total / rows as f64));
        let targets = targets.to_vec();
        self.record("bce_with_logits", value, &[logits], move || BceBack { targets, rows })
    }
}
