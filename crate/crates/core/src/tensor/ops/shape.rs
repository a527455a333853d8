use super::{some_if, strides};
use crate::error::dim_err;
use crate::prelude::*;
use crate::tensor::tape::Backward;
use crate::tensor::{numel, Real, Tape, Tensor, Var};
use crate::Result;

struct ReshapeBack;

impl<T: Real> Backward<T> for ReshapeBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.clone().reshaped(inputs[0].shape()).expect("element count preserved"))]
    }
}

struct PermuteBack {
    inverse: Vec<usize>,
}

impl<T: Real> Backward<T> for PermuteBack {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(permute_values(grad, &self.inverse))]
    }
}

struct ConcatBack {
    axis: usize,
}

impl<T: Real> Backward<T> for ConcatBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let outer: usize = grad.shape()[..self.axis].iter().product();
        let inner: usize = grad.shape()[self.axis + 1..].iter().product();
        let total = grad.shape()[self.axis];
        let mut offset = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (x, &need) in inputs.iter().zip(needs) {
            let ext = x.shape()[self.axis];
            out.push(some_if(need, || {
                let mut data = Vec::with_capacity(x.len());
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    data.extend_from_slice(&grad.data()[start..start + ext * inner]);
                }
                Tensor::new(x.shape(), data).expect("slice of concat")
            }));
            offset += ext;
        }
        out
    }
}

struct EmbeddingBack {
    ids: Vec<usize>,
}

impl<T: Real> Backward<T> for EmbeddingBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let table = inputs[0];
        let d = table.shape()[1];
        let mut dt = Tensor::zeros(table.shape());
        for (row, &id) in self.ids.iter().enumerate() {
            let src = &grad.data()[row * d..(row + 1) * d];
            for (acc, &g) in dt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(src) {
                *acc += g;
            }
        }
        vec![Some(dt)]
    }
}

/// Materializes `x` with its axes reordered so that output axis `i` is input
/// axis `axes[i]`.
pub(crate) fn permute_values<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides(in_shape);
    // stride in the input for a unit step along each output axis
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    if rank == 0 || n == 0 {
        return x.clone();
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let src = x.data();
    let mut base = 0usize;
    loop {
        let s = step[last];
        for j in 0..out_shape[last] {
            out.push(src[base + j * s]);
        }
        // advance the odometer on all axes except the last
        let mut ax = last;
        loop {
            if ax == 0 {
                return Tensor::new(&out_shape, out).expect("permute preserves count");
            }
            ax -= 1;
            idx[ax] += 1;
            base += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

impl<T: Real> Tape<'_, T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.record("reshape", value, &[x], || ReshapeBack)
    }

    /// Generalized transpose: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.value(x).rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || core::mem::replace(&mut seen[a], true)) {
            return Err(dim_err!("permute: {:?} is not a permutation of {} axes", axes, rank));
        }
        let value = permute_values(self.value(x), axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.record("permute", value, &[x], move || PermuteBack { inverse })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank < 2 {
            return Err(dim_err!("transpose needs rank >= 2, got {}", rank));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(dim_err!("concat of zero tensors"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {} out of range for {:?}", axis, base));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err!("concat: {:?} incompatible with {:?} on axis {}", s, base, axis));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let ext = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * ext..(o + 1) * ext]);
            }
        }
        let value = Tensor::new(&out_shape, data)?;
        self.record("concat", value, xs, || ConcatBack { axis })
    }

    /// Rows of `table[V, d]` selected by `ids`, as `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(dim_err!("embedding table must be rank 2, got {:?}", t.shape()));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(dim_err!("embedding id {} outside table of {} rows", bad, v));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(&[ids.len(), d], data)?;
        let ids = ids.to_vec();
        self.record("embedding", value, &[table], move || EmbeddingBack { ids })
    }
}
