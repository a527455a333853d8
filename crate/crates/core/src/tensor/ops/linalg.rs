use super::some_if;
use crate::error::dim_err;
use crate::prelude::*;
use crate::tensor::tape::Backward;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::Result;

struct MatMulBack {
    groups: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
}

impl<T: Real> Backward<T> for MatMulBack {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let Self { groups, m, k, n, trans_a, trans_b } = *self;
        let g = grad.data();
        let da = some_if(needs[0], || {
            let mut da = Tensor::zeros(a.shape());
            for gi in 0..groups {
                let gs = &g[gi * m * n..(gi + 1) * m * n];
                let bs = &b.data()[gi * k * n..(gi + 1) * k * n];
                let out = &mut da.data_mut()[gi * m * k..(gi + 1) * m * k];
                if trans_a {
                    // dA (k×m) = op(B) · dCᵀ
                    T::gemm(k, n, m, bs, trans_b, gs, true, out, false);
                } else {
                    // dA (m×k) = dC · op(B)ᵀ
                    T::gemm(m, n, k, gs, false, bs, !trans_b, out, false);
                }
            }
            da
        });
        let db = some_if(needs[1], || {
            let mut db = Tensor::zeros(b.shape());
            for gi in 0..groups {
                let gs = &g[gi * m * n..(gi + 1) * m * n];
                let as_ = &a.data()[gi * m * k..(gi + 1) * m * k];
                let out = &mut db.data_mut()[gi * k * n..(gi + 1) * k * n];
                if trans_b {
                    // dB (n×k) = dCᵀ · op(A)
                    T::gemm(n, m, k, gs, true, as_, trans_a, out, false);
                } else {
                    // dB (k×n) = op(A)ᵀ · dC
                    T::gemm(k, m, n, as_, !trans_a, gs, false, out, false);
                }
            }
            db
        });
        vec![da, db]
    }
}

impl<T: Real> Tape<'_, T> {
    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product `op(a)·op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(dim_err!("matmul needs rank-2 operands, got {:?} and {:?}", sa, sb));
        }
        let (m, k) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(dim_err!("matmul inner extents differ: {:?} · {:?}", sa, sb));
        }
        self.gemm_op(a, b, 1, m, k, n, trans_a, trans_b, &[m, n])
    }

    /// Batched matrix product over a leading group axis:
    /// `[g, m, k] · [g, k, n] → [g, m, n]`, with optional per-group transposes.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err!("bmm needs rank-3 operands with equal groups, got {:?} and {:?}", sa, sb));
        }
        let g = sa[0];
        let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(dim_err!("bmm inner extents differ: {:?} · {:?}", sa, sb));
        }
        self.gemm_op(a, b, g, m, k, n, trans_a, trans_b, &[g, m, n])
    }

    #[allow(clippy::too_many_arguments)]
    fn gemm_op(
        &mut self,
        a: Var,
        b: Var,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_a: bool,
        trans_b: bool,
        out_shape: &[usize],
    ) -> Result<Var> {
        let mut out = vec![T::zero(); groups * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for gi in 0..groups {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[gi * m * k..(gi + 1) * m * k],
                    trans_a,
                    &bv[gi * k * n..(gi + 1) * k * n],
                    trans_b,
                    &mut out[gi * m * n..(gi + 1) * m * n],
                    false,
                );
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.record("matmul", value, &[a, b], || MatMulBack { groups, m, k, n, trans_a, trans_b })
    }
}
