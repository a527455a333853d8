use super::some_if;
use crate::error::dim_err;
use crate::prelude::*;
use crate::tensor::tape::Backward;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Source pixel for output row `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Output columns `ow` whose tap `t` lands inside a row of `extent`.
    #[inline]
    fn valid(&self, t: usize, extent: usize, out: usize) -> core::ops::Range<usize> {
        let lo = self.pad.saturating_sub(t).div_ceil(self.stride);
        let hi = if extent + self.pad > t { ((extent + self.pad - t - 1) / self.stride + 1).min(out) } else { 0 };
        lo..hi.max(lo)
    }

    /// Unrolls input patches into a `[K, B·H'·W']` matrix.
    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let (k, n) = (self.k(), self.cols());
        let p = self.out_h * self.out_w;
        let mut col = vec![T::zero(); k * n];
        for c in 0..self.channels {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let r = (c * self.kh + i) * self.kw + j;
                    let row = &mut col[r * n..(r + 1) * n];
                    for b in 0..self.batch {
                        let plane = &x[(b * self.channels + c) * self.height * self.width..][..self.height * self.width];
                        for oh in 0..self.out_h {
                            let Some(ih) = self.src(oh, i, self.height) else { continue };
                            let dst = &mut row[b * p + oh * self.out_w..][..self.out_w];
                            let src = &plane[ih * self.width..][..self.width];
                            let cols = self.valid(j, self.width, self.out_w);
                            let first = cols.start * self.stride + j - self.pad;
                            if self.stride == 1 {
                                dst[cols.clone()].copy_from_slice(&src[first..first + cols.len()]);
                            } else {
                                for (d, &v) in dst[cols].iter_mut().zip(src[first..].iter().step_by(self.stride)) {
                                    *d = v;
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Scatters a `[K, B·H'·W']` patch matrix back onto the input layout.
    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let n = self.cols();
        let p = self.out_h * self.out_w;
        for c in 0..self.channels {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let r = (c * self.kh + i) * self.kw + j;
                    let row = &col[r * n..(r + 1) * n];
                    for b in 0..self.batch {
                        let plane = &mut dx[(b * self.channels + c) * self.height * self.width..][..self.height * self.width];
                        for oh in 0..self.out_h {
                            let Some(ih) = self.src(oh, i, self.height) else { continue };
                            let src = &row[b * p + oh * self.out_w..][..self.out_w];
                            let dst = &mut plane[ih * self.width..][..self.width];
                            let cols = self.valid(j, self.width, self.out_w);
                            let first = cols.start * self.stride + j - self.pad;
                            for (d, &v) in dst[first..].iter_mut().step_by(self.stride).zip(&src[cols]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[F, B·P]` ↔ `[B, F, P]`
fn fold_batch<T: Real>(mat: &[T], filters: usize, batch: usize, p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(mat.len());
    for b in 0..batch {
        for f in 0..filters {
            out.extend_from_slice(&mat[f * batch * p + b * p..][..p]);
        }
    }
    out
}

fn unfold_batch<T: Real>(x: &[T], filters: usize, batch: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for f in 0..filters {
            out[f * batch * p + b * p..][..p].copy_from_slice(&x[(b * filters + f) * p..][..p]);
        }
    }
    out
}

struct ConvBack<T> {
    geom: ConvGeom,
    col: Option<Vec<T>>,
}

impl<T: Real> Backward<T> for ConvBack<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let g = &self.geom;
        let (k, n, f) = (g.k(), g.cols(), g.filters);
        let gmat = unfold_batch(grad.data(), f, g.batch, g.out_h * g.out_w);
        let w = inputs[1];
        let dx = some_if(needs[0], || {
            let mut dcol = vec![T::zero(); k * n];
            T::gemm(k, f, n, w.data(), true, &gmat, false, &mut dcol, false);
            let mut dx = Tensor::zeros(inputs[0].shape());
            g.col2im(&dcol, dx.data_mut());
            dx
        });
        let dw = some_if(needs[1], || {
            let col = self.col.as_ref().expect("im2col kept when the kernel needs a gradient");
            let mut dw = Tensor::zeros(w.shape());
            T::gemm(f, n, k, &gmat, false, col, true, dw.data_mut(), false);
            dw
        });
        vec![dx, dw]
    }
}

struct MaxPoolBack {
    argmax: Vec<usize>,
}

impl<T: Real> Backward<T> for MaxPoolBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            dx.data_mut()[src] += g;
        }
        vec![Some(dx)]
    }
}

struct AvgPoolBack {
    spatial: usize,
}

impl<T: Real> Backward<T> for AvgPoolBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let inv = T::from_f64(1.0 / self.spatial as f64);
        let mut data = Vec::with_capacity(inputs[0].len());
        for &g in grad.data() {
            data.extend(core::iter::repeat_n(g * inv, self.spatial));
        }
        vec![Some(Tensor::new(inputs[0].shape(), data).expect("same count"))]
    }
}

fn out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    (kernel <= padded && stride > 0).then(|| (padded - kernel) / stride + 1)
}

impl<T: Real> Tape<'_, T> {
    /// 2-D cross-correlation (no kernel flip), `[B,C,H,W] ⋆ [F,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 {
            return Err(dim_err!("conv2d expects [B,C,H,W] and [F,C,kh,kw], got {:?} and {:?}", xs, ws));
        }
        if xs[1] != ws[1] {
            return Err(dim_err!("conv2d: input has {} channels, kernel expects {}", xs[1], ws[1]));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be positive".into()));
        }
        let (Some(out_h), Some(out_w)) = (out_extent(xs[2], ws[2], stride, padding), out_extent(xs[3], ws[3], stride, padding))
        else {
            return Err(dim_err!("conv2d kernel {:?} larger than padded input {:?} (pad {})", ws, xs, padding));
        };
        let geom = ConvGeom {
            batch: xs[0],
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            filters: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad: padding,
            out_h,
            out_w,
        };
        let col = geom.im2col(self.value(x).data());
        let mut out_mat = vec![T::zero(); geom.filters * geom.cols()];
        T::gemm(geom.filters, geom.k(), geom.cols(), self.value(w).data(), false, &col, false, &mut out_mat, false);
        let out = fold_batch(&out_mat, geom.filters, geom.batch, out_h * out_w);
        let value = Tensor::new(&[geom.batch, geom.filters, out_h, out_w], out)?;
        let keep_col = self.requires_grad(w);
        self.record("conv2d", value, &[x, w], move || ConvBack { geom, col: keep_col.then_some(col) })
    }

    /// Max pooling without padding.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(dim_err!("maxpool2d expects [B,C,H,W], got {:?}", s));
        }
        let (Some(oh), Some(ow)) = (out_extent(s[2], kernel, stride, 0), out_extent(s[3], kernel, stride, 0)) else {
            return Err(dim_err!("maxpool2d window {} larger than input {:?}", kernel, s));
        };
        let xv = self.value(x).data();
        let planes = s[0] * s[1];
        let (h, w) = (s[2], s[3]);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for pl in 0..planes {
            let base = pl * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * stride * w + j * stride;
                    for di in 0..kernel {
                        for dj in 0..kernel {
                            let idx = base + (i * stride + di) * w + j * stride + dj;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[s[0], s[1], oh, ow], out)?;
        self.record("maxpool2d", value, &[x], move || MaxPoolBack { argmax })
    }

    /// Mean over the spatial axes: `[B,C,H,W] → [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(dim_err!("global_avg_pool expects [B,C,H,W], got {:?}", s));
        }
        let spatial = s[2] * s[3];
        let inv = T::from_f64(1.0 / spatial as f64);
        let out = self.value(x).data().chunks_exact(spatial).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::new(&[s[0], s[1]], out)?;
        self.record("global_avg_pool", value, &[x], move || AvgPoolBack { spatial })
    }
}
