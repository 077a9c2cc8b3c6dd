//! Forward ops on [`Var`] with their adjoint rules.

use std::sync::Arc;

use super::kernels::{col2im, gemm, im2col};
use super::{Tensor, Var};
use crate::error::{dim_err, Result};

pub const LN_EPS: f32 = 1e-5;

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact `x·Φ(x)`.
pub fn gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))) as f32
}

fn gelu_grad_scalar(x: f32) -> f32 {
    let x = x as f64;
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    (cdf + x * pdf) as f32
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("tensors have rank >= 1")
}

fn zip_add(a: &mut [f32], b: &[f32]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn row_sums(data: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    (0..rows)
        .map(|r| data[r * cols..(r + 1) * cols].iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect()
}

fn col_sums(data: &[f32], cols: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; cols];
    for row in data.chunks_exact(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

impl<'t> Var<'t> {
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.value().add(other.value())?;
        Ok(self.tape().op(out, &[self, other], 0, |g, _| {
            vec![Some(g.clone()), Some(g.clone())]
        }))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.value().sub(other.value())?;
        Ok(self.tape().op(out, &[self, other], 0, |g, _| {
            vec![Some(g.clone()), Some(g.scale(-1.0))]
        }))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.value().zip_map(other.value(), |a, b| a * b)?;
        let (a, b) = (self.value().clone(), other.value().clone());
        Ok(self.tape().op(out, &[self, other], 0, move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |x, y| x * y).unwrap()),
                need[1].then(|| g.zip_map(&a, |x, y| x * y).unwrap()),
            ]
        }))
    }

    pub fn scale(&self, s: f32) -> Var<'t> {
        let out = self.value().scale(s);
        self.tape().op(out, &[self], 0, move |g, _| vec![Some(g.scale(s))])
    }

    /// Adds `bias` repeated over the leading axes; `bias.shape` must equal
    /// the trailing axes of `self`.
    pub fn add_broadcast(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let (xs, bs) = (self.shape(), bias.shape());
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return dim_err(format!("cannot broadcast {bs:?} onto {xs:?}"));
        }
        let n = bias.numel();
        let mut out = self.value().to_vec();
        for chunk in out.chunks_exact_mut(n) {
            zip_add(chunk, bias.value().data());
        }
        let out = Tensor::from_parts(xs.to_vec(), out);
        let bshape = bs.to_vec();
        Ok(self.tape().op(out, &[self, bias], 0, move |g, need| {
            vec![
                Some(g.clone()),
                need[1].then(|| Tensor::from_parts(bshape.clone(), col_sums(g.data(), n))),
            ]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        let orig = self.shape().to_vec();
        Ok(self.tape().op(out, &[self], 0, move |g, _| {
            vec![Some(g.reshape(&orig).unwrap())]
        }))
    }

    pub fn sum(&self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum() as f32);
        let shape = self.shape().to_vec();
        self.tape().op(out, &[self], 0, move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.numel() as f32;
        let out = Tensor::scalar((self.value().sum() / n as f64) as f32);
        let shape = self.shape().to_vec();
        self.tape().op(out, &[self], 0, move |g, _| {
            vec![Some(Tensor::full(&shape, g.item() / n))]
        })
    }

    /// Mean absolute error. The subgradient at a zero residual is 0.
    pub fn l1_loss(&self, target: &Var<'t>) -> Result<Var<'t>> {
        let diff = self.value().sub(target.value())?;
        let n = diff.numel() as f32;
        let total: f64 = diff.data().iter().map(|&d| d.abs() as f64).sum();
        let out = Tensor::scalar((total / n as f64) as f32);
        Ok(self.tape().op(out, &[self, target], 0, move |g, need| {
            let s = g.item() / n;
            let dp = diff.map(|d| {
                if d > 0.0 {
                    s
                } else if d < 0.0 {
                    -s
                } else {
                    0.0
                }
            });
            let dt = need[1].then(|| dp.scale(-1.0));
            vec![Some(dp), dt]
        }))
    }

    /// `y[..., o] = Σ_i W[o, i]·x[..., i] + b[o]`.
    pub fn linear(&self, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        let xs = self.shape();
        let ws = weight.shape();
        let din = last_dim(xs);
        if ws.len() != 2 || ws[1] != din {
            return dim_err(format!("linear: input {xs:?} vs weight {ws:?}"));
        }
        let dout = ws[0];
        if let Some(b) = bias {
            if b.shape() != [dout] {
                return dim_err(format!("linear: bias {:?} vs weight {ws:?}", b.shape()));
            }
        }
        let m = self.numel() / din;
        let mut y = vec![0.0f32; m * dout];
        gemm(m, din, dout, self.value().data(), false, weight.value().data(), true, &mut y, false);
        if let Some(b) = bias {
            for row in y.chunks_exact_mut(dout) {
                zip_add(row, b.value().data());
            }
        }
        let mut oshape = xs.to_vec();
        *oshape.last_mut().unwrap() = dout;
        let out = Tensor::from_parts(oshape, y);
        let (x, w) = (self.value().clone(), weight.value().clone());
        let macs = (m * din * dout) as u64;
        let backward = move |g: &Tensor, need: &[bool]| {
            let gd = g.data();
            let dx = need[0].then(|| {
                let mut dx = vec![0.0; m * din];
                gemm(m, dout, din, gd, false, w.data(), false, &mut dx, false);
                Tensor::from_parts(x.shape().to_vec(), dx)
            });
            let dw = need[1].then(|| {
                let mut dw = vec![0.0; dout * din];
                gemm(dout, m, din, gd, true, x.data(), false, &mut dw, false);
                Tensor::from_parts(vec![dout, din], dw)
            });
            let mut grads = vec![dx, dw];
            if need.len() == 3 {
                grads.push(need[2].then(|| Tensor::from_parts(vec![dout], col_sums(gd, dout))));
            }
            grads
        };
        Ok(match bias {
            Some(b) => self.tape().op(out, &[self, weight, b], macs, backward),
            None => self.tape().op(out, &[self, weight], macs, backward),
        })
    }

    /// Batched `[B, M, K] · [B, K, N]`.
    pub fn bmm(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 3 || b.len() != 3 || a[0] != b[0] || a[2] != b[1] {
            return dim_err(format!("bmm: {a:?} vs {b:?}"));
        }
        let (bs, m, k, n) = (a[0], a[1], a[2], b[2]);
        let mut c = vec![0.0f32; bs * m * n];
        let (av, bv) = (self.value().clone(), other.value().clone());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..][..m * k],
                false,
                &bv.data()[i * k * n..][..k * n],
                false,
                &mut c[i * m * n..][..m * n],
                false,
            );
        }
        let out = Tensor::from_parts(vec![bs, m, n], c);
        let macs = (bs * m * k * n) as u64;
        Ok(self.tape().op(out, &[self, other], macs, move |g, need| {
            let gd = g.data();
            let da = need[0].then(|| {
                let mut da = vec![0.0; bs * m * k];
                for i in 0..bs {
                    gemm(m, n, k, &gd[i * m * n..][..m * n], false,
                        &bv.data()[i * k * n..][..k * n], true,
                        &mut da[i * m * k..][..m * k], false);
                }
                Tensor::from_parts(vec![bs, m, k], da)
            });
            let db = need[1].then(|| {
                let mut db = vec![0.0; bs * k * n];
                for i in 0..bs {
                    gemm(k, m, n, &av.data()[i * m * k..][..m * k], true,
                        &gd[i * m * n..][..m * n], false,
                        &mut db[i * k * n..][..k * n], false);
                }
                Tensor::from_parts(vec![bs, k, n], db)
            });
            vec![da, db]
        }))
    }

    /// Batched `[B, M, K] · [B, N, K]ᵀ`.
    pub fn bmm_nt(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 3 || b.len() != 3 || a[0] != b[0] || a[2] != b[2] {
            return dim_err(format!("bmm_nt: {a:?} vs {b:?}"));
        }
        let (bs, m, k, n) = (a[0], a[1], a[2], b[1]);
        let mut c = vec![0.0f32; bs * m * n];
        let (av, bv) = (self.value().clone(), other.value().clone());
        for i in 0..bs {
            gemm(m, k, n, &av.data()[i * m * k..][..m * k], false,
                &bv.data()[i * n * k..][..n * k], true,
                &mut c[i * m * n..][..m * n], false);
        }
        let out = Tensor::from_parts(vec![bs, m, n], c);
        let macs = (bs * m * k * n) as u64;
        Ok(self.tape().op(out, &[self, other], macs, move |g, need| {
            let gd = g.data();
            let da = need[0].then(|| {
                let mut da = vec![0.0; bs * m * k];
                for i in 0..bs {
                    gemm(m, n, k, &gd[i * m * n..][..m * n], false,
                        &bv.data()[i * n * k..][..n * k], false,
                        &mut da[i * m * k..][..m * k], false);
                }
                Tensor::from_parts(vec![bs, m, k], da)
            });
            let db = need[1].then(|| {
                let mut db = vec![0.0; bs * n * k];
                for i in 0..bs {
                    gemm(n, m, k, &gd[i * m * n..][..m * n], true,
                        &av.data()[i * m * k..][..m * k], false,
                        &mut db[i * n * k..][..n * k], false);
                }
                Tensor::from_parts(vec![bs, n, k], db)
            });
            vec![da, db]
        }))
    }

    /// "Same" convolution of a `[C_in, H, W]` map with an odd square kernel
    /// `[C_out, C_in, s, s]`, zero padded.
    pub fn conv2d(&self, kernel: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        let xs = self.shape();
        let ks = kernel.shape();
        if xs.len() != 3 || ks.len() != 4 {
            return dim_err(format!("conv2d: input {xs:?}, kernel {ks:?}"));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, s) = (ks[0], ks[2]);
        if ks[1] != cin {
            return dim_err(format!("conv2d: input {xs:?} has {cin} channels, kernel {ks:?}"));
        }
        if ks[3] != s || s % 2 == 0 {
            return dim_err(format!("conv2d: kernel {ks:?} is not odd and square"));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return dim_err(format!("conv2d: bias {:?} vs kernel {ks:?}", b.shape()));
            }
        }
        let hw = h * w;
        let kk = cin * s * s;
        let x = self.value().clone();
        let col: Arc<Vec<f32>> = if s == 1 {
            Arc::new(x.to_vec())
        } else {
            Arc::new(im2col(x.data(), cin, h, w, s))
        };
        let mut y = vec![0.0f32; cout * hw];
        gemm(cout, kk, hw, kernel.value().data(), false, &col, false, &mut y, false);
        if let Some(b) = bias {
            for (row, &bv) in y.chunks_exact_mut(hw).zip(b.value().data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        let out = Tensor::from_parts(vec![cout, h, w], y);
        let kv = kernel.value().clone();
        let macs = (cout * kk * hw) as u64;
        let backward = move |g: &Tensor, need: &[bool]| {
            let gd = g.data();
            let dx = need[0].then(|| {
                let mut dcol = vec![0.0; kk * hw];
                gemm(kk, cout, hw, kv.data(), true, gd, false, &mut dcol, false);
                let dx = if s == 1 { dcol } else { col2im(&dcol, cin, h, w, s) };
                Tensor::from_parts(vec![cin, h, w], dx)
            });
            let dk = need[1].then(|| {
                let mut dk = vec![0.0; cout * kk];
                gemm(cout, hw, kk, gd, false, &col, true, &mut dk, false);
                Tensor::from_parts(vec![cout, cin, s, s], dk)
            });
            let mut grads = vec![dx, dk];
            if need.len() == 3 {
                grads.push(need[2].then(|| Tensor::from_parts(vec![cout], row_sums(gd, cout, hw))));
            }
            grads
        };
        Ok(match bias {
            Some(b) => self.tape().op(out, &[self, kernel, b], macs, backward),
            None => self.tape().op(out, &[self, kernel], macs, backward),
        })
    }

    /// Normalizes every last-axis slice, then applies `gamma·x̂ + beta`.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f32) -> Result<Var<'t>> {
        let d = last_dim(self.shape());
        if gamma.shape() != [d] || beta.shape() != [d] {
            return dim_err(format!(
                "layer_norm: input {:?}, gamma {:?}, beta {:?}",
                self.shape(),
                gamma.shape(),
                beta.shape()
            ));
        }
        let rows = self.numel() / d;
        let mut xhat = vec![0.0f32; rows * d];
        let mut inv_std = vec![0.0f32; rows];
        for (r, slice) in self.value().data().chunks_exact(d).enumerate() {
            let mean = slice.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = slice.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps as f64).sqrt();
            inv_std[r] = is as f32;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(slice) {
                *o = ((v as f64 - mean) * is) as f32;
            }
        }
        let (gv, bv) = (gamma.value().clone(), beta.value().clone());
        let y: Vec<f32> = xhat
            .chunks_exact(d)
            .flat_map(|row| {
                row.iter()
                    .zip(gv.data().iter().zip(bv.data()))
                    .map(|(&xh, (&g, &b))| g * xh + b)
            })
            .collect();
        let out = Tensor::from_parts(self.shape().to_vec(), y);
        let shape = self.shape().to_vec();
        Ok(self.tape().op(out, &[self, gamma, beta], 0, move |g, need| {
            let gd = g.data();
            let dx = need[0].then(|| {
                let mut dx = vec![0.0f32; rows * d];
                for r in 0..rows {
                    let gr = &gd[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0f64;
                    let mut m2 = 0.0f64;
                    for i in 0..d {
                        let dxh = (gr[i] * gv.data()[i]) as f64;
                        m1 += dxh;
                        m2 += dxh * xr[i] as f64;
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for i in 0..d {
                        let dxh = (gr[i] * gv.data()[i]) as f64;
                        dx[r * d + i] =
                            (inv_std[r] as f64 * (dxh - m1 - xr[i] as f64 * m2)) as f32;
                    }
                }
                Tensor::from_parts(shape.clone(), dx)
            });
            let dgamma = need[1].then(|| {
                let prod: Vec<f32> = gd.iter().zip(&xhat).map(|(a, b)| a * b).collect();
                Tensor::from_parts(vec![d], col_sums(&prod, d))
            });
            let dbeta = need[2].then(|| Tensor::from_parts(vec![d], col_sums(gd, d)));
            vec![dx, dgamma, dbeta]
        }))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&self) -> Var<'t> {
        let d = last_dim(self.shape());
        let mut y = vec![0.0f32; self.numel()];
        for (src, dst) in self.value().data().chunks_exact(d).zip(y.chunks_exact_mut(d)) {
            let max = src.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0f64;
            for (o, &v) in dst.iter_mut().zip(src) {
                let e = (v - max).exp();
                *o = e;
                total += e as f64;
            }
            let inv = (1.0 / total) as f32;
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let out = Tensor::from_parts(self.shape().to_vec(), y);
        let yv = out.clone();
        self.tape().op(out, &[self], 0, move |g, _| {
            let mut dx = vec![0.0f32; g.numel()];
            for ((gr, yr), dr) in g
                .data()
                .chunks_exact(d)
                .zip(yv.data().chunks_exact(d))
                .zip(dx.chunks_exact_mut(d))
            {
                let s = dot(gr, yr) as f32;
                for i in 0..d {
                    dr[i] = yr[i] * (gr[i] - s);
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), dx))]
        })
    }

    pub fn gelu(&self) -> Var<'t> {
        let out = self.value().map(gelu_scalar);
        let x = self.value().clone();
        self.tape().op(out, &[self], 0, move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| gv * gelu_grad_scalar(xv)).unwrap())]
        })
    }

    /// `out[i] = self[index[i]]`, reshaped to `shape`. Adjoint scatter-adds.
    pub fn gather(&self, index: Arc<Vec<u32>>, shape: &[usize]) -> Result<Var<'t>> {
        if shape.iter().product::<usize>() != index.len() {
            return dim_err(format!("gather: {} indices for shape {shape:?}", index.len()));
        }
        let n = self.numel();
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= n) {
            return dim_err(format!("gather: index {bad} out of range for {n} elements"));
        }
        let src = self.value().data();
        let out = Tensor::from_parts(shape.to_vec(), index.iter().map(|&i| src[i as usize]).collect());
        let in_shape = self.shape().to_vec();
        Ok(self.tape().op(out, &[self], 0, move |g, _| {
            let mut dx = vec![0.0f32; n];
            for (&i, &gv) in index.iter().zip(g.data()) {
                dx[i as usize] += gv;
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
        }))
    }

    /// Concatenation along axis 0; trailing extents must agree.
    pub fn concat0(parts: &[&Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| crate::error::Error::Dimension("concat of nothing".into()))?;
        let tail = &first.shape()[1..];
        for p in parts {
            if p.shape().len() != first.shape().len() || &p.shape()[1..] != tail {
                return dim_err(format!("concat0: {:?} vs {:?}", first.shape(), p.shape()));
            }
        }
        let lead: usize = parts.iter().map(|p| p.shape()[0]).sum();
        let mut shape = first.shape().to_vec();
        shape[0] = lead;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
        for p in parts {
            data.extend_from_slice(p.value().data());
        }
        let out = Tensor::from_parts(shape, data);
        let sizes: Vec<(Vec<usize>, usize)> = parts
            .iter()
            .map(|p| (p.shape().to_vec(), p.numel()))
            .collect();
        Ok(first.tape().op(out, parts, 0, move |g, need| {
            let mut off = 0;
            sizes
                .iter()
                .zip(need)
                .map(|((shape, n), &need)| {
                    let r = need.then(|| {
                        Tensor::from_parts(shape.clone(), g.data()[off..off + n].to_vec())
                    });
                    off += n;
                    r
                })
                .collect()
        }))
    }

    /// Rows `start..start + len` of axis 0.
    pub fn slice0(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if len == 0 || start + len > shape[0] {
            return dim_err(format!("slice0: {start}..{} of {shape:?}", start + len));
        }
        let inner: usize = shape[1..].iter().product();
        let mut oshape = shape.to_vec();
        oshape[0] = len;
        let out = Tensor::from_parts(
            oshape,
            self.value().data()[start * inner..(start + len) * inner].to_vec(),
        );
        let in_shape = shape.to_vec();
        let n = self.numel();
        Ok(self.tape().op(out, &[self], 0, move |g, _| {
            let mut dx = vec![0.0f32; n];
            dx[start * inner..(start + len) * inner].copy_from_slice(g.data());
            vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
        }))
    }

    /// `Σ_j weights[j]·terms[j]` for equally shaped terms.
    pub fn weighted_sum(terms: &[Var<'t>], weights: &Var<'t>) -> Result<Var<'t>> {
        let n = terms.len();
        if n == 0 || weights.shape() != [n] {
            return dim_err(format!(
                "weighted_sum: {n} terms with weights {:?}",
                weights.shape()
            ));
        }
        let shape = terms[0].shape().to_vec();
        if let Some(t) = terms.iter().find(|t| t.shape() != shape.as_slice()) {
            return dim_err(format!("weighted_sum: {:?} vs {shape:?}", t.shape()));
        }
        let w = weights.value().clone();
        let mut acc = vec![0.0f32; terms[0].numel()];
        for (t, &wj) in terms.iter().zip(w.data()) {
            for (a, &v) in acc.iter_mut().zip(t.value().data()) {
                *a += wj * v;
            }
        }
        let out = Tensor::from_parts(shape, acc);
        let macs = (n * terms[0].numel()) as u64;
        let values: Vec<Tensor> = terms.iter().map(|t| t.value().clone()).collect();
        let mut inputs: Vec<&Var<'t>> = terms.iter().collect();
        inputs.push(weights);
        Ok(weights.tape().op(out, &inputs, macs, move |g, need| {
            let mut grads: Vec<Option<Tensor>> = w
                .data()
                .iter()
                .zip(need)
                .map(|(&wj, &need)| need.then(|| g.scale(wj)))
                .collect();
            grads.push(need[n].then(|| {
                let dw = values.iter().map(|t| dot(t.data(), g.data()) as f32).collect();
                Tensor::from_parts(vec![n], dw)
            }));
            grads
        }))
    }
}
