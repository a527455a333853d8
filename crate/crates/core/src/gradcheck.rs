//! Central finite-difference verification of every differentiable tape op.
//!
//! Each case draws random inputs (64-bit), reduces the op output to a scalar
//! through a fixed random weighting, and compares the tape's analytic
//! gradient against `(L(x+h) - L(x-h)) / 2h` element by element.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::prelude::*;
use crate::tensor::{Tape, Tensor, Var};
use crate::Result;

/// Step used for central differences.
pub const STEP: f64 = 1e-5;
/// Relative error bound every op must meet.
pub const TOLERANCE: f64 = 1e-4;

/// Outcome for one op over all its random instances.
#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl OpReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

type Forward = Box<dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>>;

/// One random instance: input tensors plus the op applied to them.
pub struct Instance {
    pub inputs: Vec<Tensor<f64>>,
    forward: Forward,
}

impl Instance {
    fn new(inputs: Vec<Tensor<f64>>, forward: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var> + 'static) -> Self {
        Self { inputs, forward: Box::new(forward) }
    }
}

type Generator = fn(&mut ChaCha8Rng) -> Instance;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -1.0, 1.0).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

/// Shape extents are drawn before the values, so `rng` is borrowed once at a
/// time.
macro_rules! uniform {
    ($rng:expr, [$($d:expr),*], $lo:expr, $hi:expr) => {{
        let shape = [$($d),*];
        uniform($rng, &shape, $lo, $hi)
    }};
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Every op covered by the suite, with its instance generator.
pub fn cases() -> Vec<(&'static str, Generator)> {
    vec![
        ("matmul", |rng| {
            let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            let (ta, tb) = (rng.random::<bool>(), rng.random::<bool>());
            let a = uniform(rng, &if ta { [k, m] } else { [m, k] }, -1.0, 1.0);
            let b = uniform(rng, &if tb { [n, k] } else { [k, n] }, -1.0, 1.0);
            Instance::new(vec![a, b], move |t, v| t.matmul_t(v[0], v[1], ta, tb))
        }),
        ("bmm", |rng| {
            let (g, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
            let (ta, tb) = (rng.random::<bool>(), rng.random::<bool>());
            let a = uniform(rng, &if ta { [g, k, m] } else { [g, m, k] }, -1.0, 1.0);
            let b = uniform(rng, &if tb { [g, n, k] } else { [g, k, n] }, -1.0, 1.0);
            Instance::new(vec![a, b], move |t, v| t.bmm(v[0], v[1], ta, tb))
        }),
        ("add", |rng| {
            let s = [dim(rng, 1, 3), dim(rng, 1, 4)];
            Instance::new(vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)], |t, v| t.add(v[0], v[1]))
        }),
        ("add_bias", |rng| {
            let d = dim(rng, 1, 4);
            let x = uniform!(rng, [dim(rng, 1, 3), dim(rng, 1, 2), d], -1.0, 1.0);
            Instance::new(vec![x, uniform!(rng, [d], -1.0, 1.0)], |t, v| t.add_bias(v[0], v[1]))
        }),
        ("mul", |rng| {
            let s = [dim(rng, 1, 3), dim(rng, 1, 4)];
            Instance::new(vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)], |t, v| t.mul(v[0], v[1]))
        }),
        ("scale", |rng| {
            let c = rng.random_range(-2.0..2.0);
            Instance::new(vec![uniform!(rng, [dim(rng, 1, 5)], -1.0, 1.0)], move |t, v| t.scale(v[0], c))
        }),
        ("relu", |rng| Instance::new(vec![{ let s = [dim(rng, 1, 4), 3]; away_from_zero(rng, &s) }], |t, v| t.relu(v[0]))),
        ("sigmoid", |rng| Instance::new(vec![uniform!(rng, [dim(rng, 1, 6)], -3.0, 3.0)], |t, v| t.sigmoid(v[0]))),
        ("sum", |rng| Instance::new(vec![uniform!(rng, [dim(rng, 1, 3), 2], -1.0, 1.0)], |t, v| t.sum(v[0]))),
        ("mean", |rng| Instance::new(vec![uniform!(rng, [dim(rng, 1, 3), 2], -1.0, 1.0)], |t, v| t.mean(v[0]))),
        ("dropout", |rng| {
            let seed = rng.random::<u64>();
            let p = rng.random_range(0.1..0.6);
            Instance::new(vec![uniform!(rng, [dim(rng, 2, 8)], -1.0, 1.0)], move |t, v| {
                let mut stream = ChaCha8Rng::seed_from_u64(seed);
                t.dropout(v[0], p, true, &mut stream)
            })
        }),
        ("reshape", |rng| {
            let (a, b) = (dim(rng, 1, 3), dim(rng, 1, 4));
            Instance::new(vec![uniform!(rng, [a, b], -1.0, 1.0)], move |t, v| t.reshape(v[0], &[b, a]))
        }),
        ("permute", |rng| {
            let s = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 2)];
            let mut axes = vec![0, 1, 2, 3];
            for i in (1..4).rev() {
                axes.swap(i, rng.random_range(0..=i));
            }
            Instance::new(vec![uniform(rng, &s, -1.0, 1.0)], move |t, v| t.permute(v[0], &axes))
        }),
        ("concat", |rng| {
            let axis = rng.random_range(0..2);
            let mut s1 = [dim(rng, 1, 3), dim(rng, 1, 3)];
            let mut s2 = s1;
            s2[axis] = dim(rng, 1, 3);
            s1[1 - axis] = s2[1 - axis];
            Instance::new(vec![uniform(rng, &s1, -1.0, 1.0), uniform(rng, &s2, -1.0, 1.0)], move |t, v| {
                t.concat(&[v[0], v[1]], axis)
            })
        }),
        ("embedding", |rng| {
            let (rows, d) = (dim(rng, 2, 5), dim(rng, 1, 3));
            let ids: Vec<usize> = (0..dim(rng, 1, 6)).map(|_| rng.random_range(0..rows)).collect();
            Instance::new(vec![uniform!(rng, [rows, d], -1.0, 1.0)], move |t, v| t.embedding(v[0], &ids))
        }),
        ("layer_norm", |rng| {
            let d = dim(rng, 2, 5);
            let x = uniform!(rng, [dim(rng, 1, 3), d], -2.0, 2.0);
            let g = uniform!(rng, [d], 0.5, 1.5);
            let b = uniform!(rng, [d], -0.5, 0.5);
            Instance::new(vec![x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))
        }),
        ("batch_norm_train", |rng| {
            let c = dim(rng, 1, 3);
            let x = uniform!(rng, [dim(rng, 2, 3), c, dim(rng, 1, 2), dim(rng, 1, 3)], -2.0, 2.0);
            let g = uniform!(rng, [c], 0.5, 1.5);
            let b = uniform!(rng, [c], -0.5, 0.5);
            Instance::new(vec![x, g, b], |t, v| t.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|(y, _)| y))
        }),
        ("batch_norm_eval", |rng| {
            let c = dim(rng, 1, 3);
            let x = uniform!(rng, [dim(rng, 1, 3), c, dim(rng, 1, 3), dim(rng, 1, 3)], -2.0, 2.0);
            let g = uniform!(rng, [c], 0.5, 1.5);
            let b = uniform!(rng, [c], -0.5, 0.5);
            let mean = uniform!(rng, [c], -0.5, 0.5);
            let var = uniform!(rng, [c], 0.5, 2.0);
            Instance::new(vec![x, g, b], move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5))
        }),
        ("conv2d", |rng| {
            let (c, f) = (dim(rng, 1, 2), dim(rng, 1, 3));
            let (kh, kw) = (dim(rng, 1, 3), dim(rng, 1, 3));
            let (stride, pad) = (dim(rng, 1, 2), dim(rng, 0, 1));
            let x = uniform!(rng, [dim(rng, 1, 2), c, dim(rng, 3, 5), dim(rng, 3, 5)], -1.0, 1.0);
            let w = uniform!(rng, [f, c, kh, kw], -1.0, 1.0);
            Instance::new(vec![x, w], move |t, v| t.conv2d(v[0], v[1], stride, pad))
        }),
        ("maxpool2d", |rng| {
            let k = dim(rng, 1, 2);
            let stride = dim(rng, 1, 2);
            let x = uniform!(rng, [dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 2, 5), dim(rng, 2, 5)], -1.0, 1.0);
            Instance::new(vec![x], move |t, v| t.maxpool2d(v[0], k, stride))
        }),
        ("global_avg_pool", |rng| {
            let x = uniform!(rng, [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)], -1.0, 1.0);
            Instance::new(vec![x], |t, v| t.global_avg_pool(v[0]))
        }),
        ("softmax", |rng| {
            let causal = rng.random::<bool>();
            let d = dim(rng, 1, 5);
            let x = uniform!(rng, [dim(rng, 1, 2), d, d], -2.0, 2.0);
            Instance::new(vec![x], move |t, v| t.softmax(v[0], causal))
        }),
        ("softmax_cross_entropy", |rng| {
            let (n, classes) = (dim(rng, 2, 5), dim(rng, 2, 5));
            let mut targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            // one row ignored via an out-of-vocabulary marker
            targets[0] = classes;
            let x = uniform!(rng, [n, classes], -2.0, 2.0);
            Instance::new(vec![x], move |t, v| t.softmax_cross_entropy(v[0], &targets, Some(classes)))
        }),
        ("bce_with_logits", |rng| {
            let (n, k) = (dim(rng, 1, 4), dim(rng, 1, 3));
            let targets: Vec<f64> = (0..n * k).map(|_| f64::from(rng.random::<bool>() as u8)).collect();
            Instance::new(vec![uniform!(rng, [n, k], -3.0, 3.0)], move |t, v| t.bce_with_logits(v[0], &targets))
        }),
    ]
}

/// Weighted scalar reduction used as the loss for every case.
fn eval_loss(inst: &Instance, inputs: &[Tensor<f64>], weights: Option<&Tensor<f64>>) -> Result<(f64, Tensor<f64>)> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = (inst.forward)(&mut tape, &vars)?;
    let out_value = tape.value(out).clone();
    let loss = match weights {
        Some(w) => out_value.data().iter().zip(w.data()).map(|(a, b)| a * b).sum(),
        None => 0.0,
    };
    Ok((loss, out_value))
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric)).max(1e-10);
    norm(&diff) / scale
}

/// Checks one instance; returns the worst relative error over its inputs.
pub fn check_instance(inst: &Instance, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (_, out) = eval_loss(inst, &inst.inputs, None)?;
    let weights = uniform(rng, out.shape(), -1.0, 1.0);

    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inst.inputs.iter().map(|x| tape.input(x.clone())).collect();
    let y = (inst.forward)(&mut tape, &vars)?;
    let w = tape.constant(weights.clone());
    let yw = tape.mul(y, w)?;
    let loss = tape.sum(yw)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).expect("input leaf").data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        let mut probe = inst.inputs.clone();
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = probe[i].data()[e];
            probe[i].data_mut()[e] = orig + STEP;
            let (plus, _) = eval_loss(inst, &probe, Some(&weights))?;
            probe[i].data_mut()[e] = orig - STEP;
            let (minus, _) = eval_loss(inst, &probe, Some(&weights))?;
            probe[i].data_mut()[e] = orig;
            *slot = (plus - minus) / (2.0 * STEP);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Runs every case on `instances` random draws.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<OpReport>> {
    let mut reports = Vec::new();
    for (k, (op, generate)) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let mut max_rel_error: f64 = 0.0;
        for _ in 0..instances {
            let inst = generate(&mut rng);
            max_rel_error = max_rel_error.max(check_instance(&inst, &mut rng)?);
        }
        reports.push(OpReport { op, instances, max_rel_error });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        let reports = run_suite(20, 7).unwrap();
        assert_eq!(reports.len(), cases().len());
        for r in &reports {
            std::println!("{:>24} {:e}", r.op, r.max_rel_error);
            assert!(r.passed(TOLERANCE), "{} max rel error {:e}", r.op, r.max_rel_error);
        }
    }

    #[test]
    fn rel_error_flags_a_halved_gradient() {
        assert!(rel_error(&[1.0, 2.0], &[2.0, 4.0]) > TOLERANCE);
        assert_eq!(rel_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }
}
