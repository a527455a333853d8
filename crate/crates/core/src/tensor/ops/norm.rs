use super::{rows_last, some_if};
use crate::error::dim_err;
use crate::prelude::*;
use crate::tensor::tape::Backward;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Debug, Clone)]
pub struct BatchStats<T: Real = f32> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Elements reduced per channel.
    pub count: usize,
}

struct LayerNormBack<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Real> Backward<T> for LayerNormBack<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let gamma = inputs[1].data();
        let (rows, d) = rows_last(grad.shape());
        let inv_d = T::from_f64(1.0 / d as f64);
        let dx = some_if(needs[0], || {
            let mut dx = vec![T::zero(); rows * d];
            let mut dxhat = vec![T::zero(); d];
            for r in 0..rows {
                let g = &grad.data()[r * d..(r + 1) * d];
                let xh = &self.xhat[r * d..(r + 1) * d];
                let mut sum = T::zero();
                let mut dot = T::zero();
                for j in 0..d {
                    dxhat[j] = g[j] * gamma[j];
                    sum += dxhat[j];
                    dot += dxhat[j] * xh[j];
                }
                let (mean_dxhat, mean_dot) = (sum * inv_d, dot * inv_d);
                for j in 0..d {
                    dx[r * d + j] = self.rstd[r] * (dxhat[j] - mean_dxhat - xh[j] * mean_dot);
                }
            }
            Tensor::new(grad.shape(), dx).expect("same shape")
        });
        let (dgamma, dbeta) = affine_grads(grad.data(), &self.xhat, d, 1, needs[1], needs[2]);
        vec![dx, dgamma.map(|v| vec_tensor(v)), dbeta.map(|v| vec_tensor(v))]
    }
}

fn vec_tensor<T: Real>(v: Vec<T>) -> Tensor<T> {
    let n = v.len();
    Tensor::new(&[n], v).expect("rank-1")
}

/// Gradients of a per-feature affine map `y = γ·x̂ + β`. Elements come in
/// runs of `run` sharing a feature, and features cycle with period
/// `features`.
fn affine_grads<T: Real>(
    grad: &[T],
    xhat: &[T],
    features: usize,
    run: usize,
    need_gamma: bool,
    need_beta: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    if !need_gamma && !need_beta {
        return (None, None);
    }
    let mut dgamma = vec![T::zero(); features];
    let mut dbeta = vec![T::zero(); features];
    if run == 1 {
        for (g, xh) in grad.chunks_exact(features).zip(xhat.chunks_exact(features)) {
            for f in 0..features {
                dgamma[f] += g[f] * xh[f];
                dbeta[f] += g[f];
            }
        }
    } else {
        for (i, (g, xh)) in grad.chunks_exact(run).zip(xhat.chunks_exact(run)).enumerate() {
            let f = i % features;
            dgamma[f] += dot(g, xh);
            dbeta[f] += g.iter().copied().sum::<T>();
        }
    }
    (need_gamma.then_some(dgamma), need_beta.then_some(dbeta))
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Per-channel planes of a `[B, C, spatial]` buffer, paired with their
/// channel index.
fn planes<T>(data: &[T], channels: usize, spatial: usize) -> impl Iterator<Item = (usize, &[T])> {
    data.chunks_exact(spatial).enumerate().map(move |(i, p)| (i % channels, p))
}

struct BatchNormTrainBack<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
    channels: usize,
    spatial: usize,
}

impl<T: Real> Backward<T> for BatchNormTrainBack<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (c, hw) = (self.channels, self.spatial);
        let gamma = inputs[1].data();
        let n = grad.len() / c;
        // channel sums of dxhat and dxhat·xhat are needed by the input gradient
        let (sum_g, sum_gx) = {
            let (sg, sb) = affine_grads(grad.data(), &self.xhat, c, hw, true, true);
            (sb.expect("requested"), sg.expect("requested"))
        };
        let dx = some_if(needs[0], || {
            let inv_n = T::from_f64(1.0 / n as f64);
            let mut data = Vec::with_capacity(grad.len());
            for ((k, g), xh) in planes(grad.data(), c, hw).zip(self.xhat.chunks_exact(hw)) {
                let (scale, mg, mgx) = (gamma[k] * self.rstd[k], sum_g[k] * inv_n, sum_gx[k] * inv_n);
                data.extend(g.iter().zip(xh).map(|(&g, &xh)| scale * (g - mg - xh * mgx)));
            }
            Tensor::new(grad.shape(), data).expect("same shape")
        });
        let dgamma = some_if(needs[1], || vec_tensor(sum_gx.clone()));
        let dbeta = some_if(needs[2], || vec_tensor(sum_g.clone()));
        vec![dx, dgamma, dbeta]
    }
}

struct ChannelAffineBack<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
    channels: usize,
    spatial: usize,
}

impl<T: Real> Backward<T> for ChannelAffineBack<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (c, hw) = (self.channels, self.spatial);
        let gamma = inputs[1].data();
        let dx = some_if(needs[0], || {
            let mut data = Vec::with_capacity(grad.len());
            for (k, g) in planes(grad.data(), c, hw) {
                let scale = gamma[k] * self.rstd[k];
                data.extend(g.iter().map(|&g| g * scale));
            }
            Tensor::new(grad.shape(), data).expect("same shape")
        });
        let (dg, db) = affine_grads(grad.data(), &self.xhat, c, hw, needs[1], needs[2]);
        vec![dx, dg.map(vec_tensor), db.map(vec_tensor)]
    }
}

/// `x̂ = (x − μ)·rstd` and `γ·x̂ + β` per channel plane.
fn normalize_planes<T: Real>(
    x: &[T],
    c: usize,
    hw: usize,
    mean: &[T],
    rstd: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for (k, p) in planes(x, c, hw) {
        let start = xhat.len();
        xhat.extend(p.iter().map(|&v| (v - mean[k]) * rstd[k]));
        out.extend(xhat[start..].iter().map(|&xh| gamma[k] * xh + beta[k]));
    }
    (xhat, out)
}

impl<T: Real> Tape<'_, T> {
    fn check_affine(&self, op: &str, gamma: Var, beta: Var, d: usize, eps: f64) -> Result<()> {
        let (g, b) = (self.shape(gamma), self.shape(beta));
        if g != [d] || b != [d] {
            return Err(dim_err!("{op}: gamma {:?} / beta {:?} must both be [{}]", g, b, d));
        }
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("{op}: eps must be positive, got {eps}")));
        }
        Ok(())
    }

    /// Standardizes each row over the last axis, then applies `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, d) = rows_last(self.shape(x));
        self.check_affine("layer_norm", gamma, beta, d, eps)?;
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let eps_t = T::from_f64(eps);
        let inv_d = T::from_f64(1.0 / d as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps_t).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        self.record("layer_norm", value, &[x, gamma, beta], move || LayerNormBack { xhat, rstd })
    }

    fn channel_layout(&self, op: &str, x: Var) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 && s.len() != 2 {
            return Err(dim_err!("{op} expects [B, C, H, W] or [B, C], got {:?}", s));
        }
        let spatial = s[2..].iter().product();
        Ok((s[1], spatial))
    }

    /// Training-mode batch normalization over every axis except the channel
    /// axis 1, returning the batch statistics alongside the output.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let (c, hw) = self.channel_layout("batch_norm", x)?;
        self.check_affine("batch_norm", gamma, beta, c, eps)?;
        let xv = self.value(x).data();
        let n = xv.len() / c.max(1);
        if n < 2 {
            return Err(dim_err!("batch_norm needs at least 2 values per channel, got {}", n));
        }
        let mut mean = vec![T::zero(); c];
        for (k, p) in planes(xv, c, hw) {
            mean[k] += p.iter().copied().sum::<T>();
        }
        let inv_n = T::from_f64(1.0 / n as f64);
        mean.iter_mut().for_each(|m| *m *= inv_n);
        let mut var = vec![T::zero(); c];
        for (k, p) in planes(xv, c, hw) {
            var[k] += p.iter().map(|&v| (v - mean[k]) * (v - mean[k])).sum::<T>();
        }
        var.iter_mut().for_each(|v| *v *= inv_n);
        let eps_t = T::from_f64(eps);
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let (xhat, out) = normalize_planes(xv, c, hw, &mean, &rstd, g, b);
        let value = Tensor::new(self.shape(x), out)?;
        let stats = BatchStats { mean, var, count: n };
        let y = self.record("batch_norm", value, &[x, gamma, beta], move || BatchNormTrainBack {
            xhat,
            rstd,
            channels: c,
            spatial: hw,
        })?;
        Ok((y, stats))
    }

    /// Inference-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let (c, hw) = self.channel_layout("batch_norm", x)?;
        self.check_affine("batch_norm", gamma, beta, c, eps)?;
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(dim_err!("batch_norm running statistics must be [{}]", c));
        }
        let eps_t = T::from_f64(eps);
        let rstd: Vec<T> = running_var.data().iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let (xhat, out) = normalize_planes(self.value(x).data(), c, hw, running_mean.data(), &rstd, g, b);
        let value = Tensor::new(self.shape(x), out)?;
        self.record("batch_norm", value, &[x, gamma, beta], move || ChannelAffineBack {
            xhat,
            rstd,
            channels: c,
            spatial: hw,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ln(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let d = x.len();
        let xv = tape.constant(Tensor::from_f64(&[1, d], x).unwrap());
        let g = tape.constant(Tensor::from_f64(&[d], gamma).unwrap());
        let b = tape.constant(Tensor::from_f64(&[d], beta).unwrap());
        let y = tape.layer_norm(xv, g, b, eps).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let y = ln(&[5.0, 5.0, 5.0], &[1.0; 3], &[0.0; 3], 1e-5);
        assert!(y.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn layer_norm_standardizes() {
        // population std of [1,2,3] is sqrt(2/3)
        let y = ln(&[1.0, 2.0, 3.0], &[1.0; 3], &[0.0; 3], 1e-12);
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in y.iter().zip(expected) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let y = ln(&[0.3, -2.0, 9.0], &[0.0; 3], &[0.5, -1.0, 2.0], 1e-5);
        assert_eq!(y, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn layer_norm_rejects_bad_eps_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        assert!(tape.layer_norm(x, g, b, 1e-5).is_err());
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.layer_norm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn batch_norm_train_normalizes_channels() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| (i as f64 * 0.37).sin() * 3.0 + i as f64 * 0.1).collect();
        let x = tape.constant(Tensor::from_f64(&[2, 3, 2, 2], &data).unwrap());
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let (y, stats) = tape.batch_norm_train(x, g, b, 1e-9).unwrap();
        assert_eq!(stats.count, 8);
        let yv = tape.value(y).data();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|bi| (0..4).map(move |s| (bi * 3 + c) * 4 + s)).map(|i| yv[i]).collect();
            let mean = vals.iter().sum::<f64>() / 8.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-6);
        }
    }
}
