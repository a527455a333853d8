use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

use super::{rows_last, some_if};
use crate::error::dim_err;
use crate::prelude::*;
use crate::tensor::tape::Backward;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

struct AddBack;

impl<T: Real> Backward<T> for AddBack {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![some_if(needs[0], || grad.clone()), some_if(needs[1], || grad.clone())]
    }
}

struct AddBiasBack;

impl<T: Real> Backward<T> for AddBiasBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let db = some_if(needs[1], || {
            let d = inputs[1].len();
            let mut db = Tensor::zeros(inputs[1].shape());
            for row in grad.data().chunks_exact(d) {
                for (acc, &g) in db.data_mut().iter_mut().zip(row) {
                    *acc += g;
                }
            }
            db
        });
        vec![some_if(needs[0], || grad.clone()), db]
    }
}

struct MulBack;

impl<T: Real> Backward<T> for MulBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let prod = |other: &Tensor<T>| {
            let data = grad.data().iter().zip(other.data()).map(|(&g, &o)| g * o).collect();
            Tensor::new(grad.shape(), data).expect("same shape")
        };
        vec![some_if(needs[0], || prod(inputs[1])), some_if(needs[1], || prod(inputs[0]))]
    }
}

struct ScaleBack<T>(T);

impl<T: Real> Backward<T> for ScaleBack<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.map(|g| g * self.0))]
    }
}

struct ReluBack;

impl<T: Real> Backward<T> for ReluBack {
    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let data = grad
            .data()
            .iter()
            .zip(out.data())
            .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
            .collect();
        vec![Some(Tensor::new(grad.shape(), data).expect("same shape"))]
    }
}

struct SigmoidBack;

impl<T: Real> Backward<T> for SigmoidBack {
    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let data = grad.data().iter().zip(out.data()).map(|(&g, &y)| g * y * (T::one() - y)).collect();
        vec![Some(Tensor::new(grad.shape(), data).expect("same shape"))]
    }
}

struct SumBack {
    scale: f64,
}

impl<T: Real> Backward<T> for SumBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let g = grad.data()[0] * T::from_f64(self.scale);
        vec![Some(Tensor::full(inputs[0].shape(), g))]
    }
}

struct MaskBack<T> {
    mask: Vec<T>,
}

impl<T: Real> Backward<T> for MaskBack<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let data = grad.data().iter().zip(&self.mask).map(|(&g, &m)| g * m).collect();
        vec![Some(Tensor::new(grad.shape(), data).expect("same shape"))]
    }
}

impl<T: Real> Tape<'_, T> {
    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("{op}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(x.shape(), data)?;
        self.record("add", value, &[a, b], || AddBack)
    }

    /// `x[..., d] + bias[d]`, broadcasting the bias over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, d) = rows_last(xv.shape());
        if bv.rank() != 1 || bv.len() != d {
            return Err(dim_err!("add_bias: bias {:?} does not match last axis of {:?}", bv.shape(), xv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (v, &b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(xv.shape(), data)?;
        self.record("add_bias", value, &[x, bias], || AddBiasBack)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(x.shape(), data)?;
        self.record("mul", value, &[a, b], || MulBack)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.record("scale", value, &[x], || ScaleBack(factor))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.record("relu", value, &[x], || ReluBack)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.record("sigmoid", value, &[x], || SigmoidBack)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.record("sum", Tensor::scalar(s), &[x], || SumBack { scale: 1.0 })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::UndefinedMean);
        }
        let s: T = self.value(x).data().iter().copied().sum();
        let value = Tensor::scalar(s / T::from_f64(n as f64));
        self.record("mean", value, &[x], || SumBack { scale: 1.0 / n as f64 })
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`. Identity when
    /// `training` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let n = self.value(x).len();
        // a fast generator seeded from `rng` draws the mask
        let mut bits = vec![0u32; n];
        SmallRng::seed_from_u64(rng.next_u64()).fill(&mut bits[..]);
        let cut = (p * 4_294_967_296.0) as u64;
        let mask: Vec<T> = bits.iter().map(|&b| if u64::from(b) < cut { T::zero() } else { keep }).collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape(), data)?;
        self.record("dropout", value, &[x], move || MaskBack { mask })
    }
}

/// Logistic function, evaluated without overflow for either sign.
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_definition() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dropout_zero_is_identity_and_rejects_bad_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::ones(&[4, 4]));
        let y = tape.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
        assert!(tape.dropout(x, -0.1, true, &mut rng).is_err());
        let z = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::ones(&[1000]));
        let y = tape.dropout(x, 0.25, true, &mut rng).unwrap();
        let vals = tape.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12));
        let dropped = vals.iter().filter(|&&v| v == 0.0).count();
        assert!((150..350).contains(&dropped), "dropped {dropped}");
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &Tensor::<f64>::ones(&[2, 3]));
    }

    #[test]
    fn backward_contracts() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::State(_))));
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1], &[1e308]).unwrap());
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
    }
}
