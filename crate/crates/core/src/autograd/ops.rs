//! Elementwise, matrix, normalization and reduction operations.

use std::sync::Arc;

use super::Var;
use crate::tensor::{matmul_into, Float, Tensor};

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1/sqrt(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * INV_SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

fn sigmoid_scalar<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("non-scalar tensor");
    (shape.iter().product::<usize>() / cols.max(1), cols)
}

fn lead_rest(shape: &[usize]) -> (usize, usize) {
    let lead = shape[0];
    (lead, shape.iter().product::<usize>() / lead.max(1))
}

impl<'t, T: Float> Var<'t, T> {
    fn same_tape(&self, other: &Var<'t, T>) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let out = a.zip_map(&b, |x, y| x + y);
        self.tape
            .push_op(out, &[self.id, other.id], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'t, T>) -> Var<'t, T> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let out = a.zip_map(&b, |x, y| x - y);
        self.tape.push_op(out, &[self.id, other.id], |g, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        })
    }

    pub fn mul(self, other: Var<'t, T>) -> Var<'t, T> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape.push_op(out, &[self.id, other.id], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |g, y| g * y)),
                need[1].then(|| g.zip_map(&a, |g, x| g * x)),
            ]
        })
    }

    pub fn div(self, other: Var<'t, T>) -> Var<'t, T> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "div shape mismatch");
        let out = a.zip_map(&b, |x, y| x / y);
        self.tape.push_op(out, &[self.id, other.id], move |g, need| {
            let ga = need[0].then(|| g.zip_map(&b, |g, y| g / y));
            let gb = need[1].then(|| {
                let t = g.zip_map(&a, |g, x| g * x);
                t.zip_map(&b, |t, y| -t / (y * y))
            });
            vec![ga, gb]
        })
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let out = self.value().map(|v| v * s);
        self.tape
            .push_op(out, &[self.id], move |g, _| vec![Some(g.map(|v| v * s))])
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        let out = self.value().map(|v| v + s);
        self.tape.push_op(out, &[self.id], |g, _| vec![Some(g.clone())])
    }

    /// Pass-through when `keep`, exact zeros (and zero gradient) otherwise.
    pub fn gate(self, keep: bool) -> Var<'t, T> {
        if keep {
            return self;
        }
        let out = Tensor::zeros(&self.shape());
        self.tape.push_op(out, &[self.id], |_, _| vec![None])
    }

    /// Broadcast-add `b` (length = last dim) to every row.
    pub fn add_last(self, b: Var<'t, T>) -> Var<'t, T> {
        let (x, bv) = (self.value(), b.value());
        let (rows, cols) = rows_cols(x.shape());
        assert_eq!(bv.numel(), cols, "add_last width mismatch");
        let mut out = (*x).clone();
        for r in out.data_mut().chunks_mut(cols) {
            for (o, &bb) in r.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let bshape = bv.shape().to_vec();
        self.tape.push_op(out, &[self.id, b.id], move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![T::zero(); cols];
                for r in g.data().chunks(cols).take(rows) {
                    for (a, &v) in acc.iter_mut().zip(r) {
                        *a += v;
                    }
                }
                Tensor::from_vec(&bshape, acc).unwrap()
            });
            vec![Some(g.clone()), gb]
        })
    }

    /// Broadcast-multiply every row by `b` (length = last dim).
    pub fn mul_last(self, b: Var<'t, T>) -> Var<'t, T> {
        let (x, bv) = (self.value(), b.value());
        let (_, cols) = rows_cols(x.shape());
        assert_eq!(bv.numel(), cols, "mul_last width mismatch");
        let mut out = (*x).clone();
        for r in out.data_mut().chunks_mut(cols) {
            for (o, &bb) in r.iter_mut().zip(bv.data()) {
                *o *= bb;
            }
        }
        let bshape = bv.shape().to_vec();
        self.tape.push_op(out, &[self.id, b.id], move |g, need| {
            let gx = need[0].then(|| {
                let mut gx = g.clone();
                for r in gx.data_mut().chunks_mut(cols) {
                    for (o, &bb) in r.iter_mut().zip(bv.data()) {
                        *o *= bb;
                    }
                }
                gx
            });
            let gb = need[1].then(|| {
                let mut acc = vec![T::zero(); cols];
                for (gr, xr) in g.data().chunks(cols).zip(x.data().chunks(cols)) {
                    for ((a, &gv), &xv) in acc.iter_mut().zip(gr).zip(xr) {
                        *a += gv * xv;
                    }
                }
                Tensor::from_vec(&bshape, acc).unwrap()
            });
            vec![gx, gb]
        })
    }

    /// Broadcast-add `b` (length = leading dim) across all trailing elements.
    pub fn add_first(self, b: Var<'t, T>) -> Var<'t, T> {
        let (x, bv) = (self.value(), b.value());
        let (lead, rest) = lead_rest(x.shape());
        assert_eq!(bv.numel(), lead, "add_first width mismatch");
        let mut out = (*x).clone();
        for (blk, &bb) in out.data_mut().chunks_mut(rest).zip(bv.data()) {
            for o in blk {
                *o += bb;
            }
        }
        let bshape = bv.shape().to_vec();
        self.tape.push_op(out, &[self.id, b.id], move |g, need| {
            let gb = need[1].then(|| {
                let acc = g.data().chunks(rest).map(|c| c.iter().copied().sum()).collect();
                Tensor::from_vec(&bshape, acc).unwrap()
            });
            vec![Some(g.clone()), gb]
        })
    }

    /// Broadcast-multiply each leading slice by the matching entry of `b`.
    pub fn mul_first(self, b: Var<'t, T>) -> Var<'t, T> {
        let (x, bv) = (self.value(), b.value());
        let (lead, rest) = lead_rest(x.shape());
        assert_eq!(bv.numel(), lead, "mul_first width mismatch");
        let mut out = (*x).clone();
        for (blk, &bb) in out.data_mut().chunks_mut(rest).zip(bv.data()) {
            for o in blk {
                *o *= bb;
            }
        }
        let bshape = bv.shape().to_vec();
        self.tape.push_op(out, &[self.id, b.id], move |g, need| {
            let gx = need[0].then(|| {
                let mut gx = g.clone();
                for (blk, &bb) in gx.data_mut().chunks_mut(rest).zip(bv.data()) {
                    for o in blk {
                        *o *= bb;
                    }
                }
                gx
            });
            let gb = need[1].then(|| {
                let acc = g
                    .data()
                    .chunks(rest)
                    .zip(x.data().chunks(rest))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                    .collect();
                Tensor::from_vec(&bshape, acc).unwrap()
            });
            vec![gx, gb]
        })
    }

    /// 2-D matrix product `op(self) · op(other)`.
    pub fn matmul(self, other: Var<'t, T>, trans_a: bool, trans_b: bool) -> Var<'t, T> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        assert!(a.shape().len() == 2 && b.shape().len() == 2, "matmul needs matrices");
        let (m, k) = if trans_a {
            (a.shape()[1], a.shape()[0])
        } else {
            (a.shape()[0], a.shape()[1])
        };
        let (k2, n) = if trans_b {
            (b.shape()[1], b.shape()[0])
        } else {
            (b.shape()[0], b.shape()[1])
        };
        assert_eq!(k, k2, "matmul inner dims {:?} {:?}", a.shape(), b.shape());
        let mut out = Tensor::zeros(&[m, n]);
        matmul_into(a.data(), trans_a, b.data(), trans_b, m, k, n, T::one(), T::zero(), out.data_mut());
        self.tape.push_op(out, &[self.id, other.id], move |g, need| {
            let ga = need[0].then(|| {
                let mut ga = Tensor::zeros(a.shape());
                if trans_a {
                    // a is k×m: ga = op(b) · gᵀ
                    matmul_into(b.data(), trans_b, g.data(), true, k, n, m, T::one(), T::zero(), ga.data_mut());
                } else {
                    // ga = g · op(b)ᵀ
                    matmul_into(g.data(), false, b.data(), !trans_b, m, n, k, T::one(), T::zero(), ga.data_mut());
                }
                ga
            });
            let gb = need[1].then(|| {
                let mut gb = Tensor::zeros(b.shape());
                if trans_b {
                    // b is n×k: gb = gᵀ · op(a)
                    matmul_into(g.data(), true, a.data(), trans_a, n, m, k, T::one(), T::zero(), gb.data_mut());
                } else {
                    // gb = op(a)ᵀ · g
                    matmul_into(a.data(), !trans_a, g.data(), false, k, m, n, T::one(), T::zero(), gb.data_mut());
                }
                gb
            });
            vec![ga, gb]
        })
    }

    pub fn transpose(self) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(x.shape().len(), 2, "transpose needs a matrix");
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let out = transpose2(x.data(), r, c);
        self.tape.push_op(out, &[self.id], move |g, _| {
            vec![Some(transpose2(g.data(), c, r))]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape).expect("reshape size");
        self.tape.push_op(out, &[self.id], move |g, _| {
            vec![Some(g.clone().reshape(&old).unwrap())]
        })
    }

    /// Concatenate along the leading axis.
    pub fn concat(parts: &[Var<'t, T>]) -> Var<'t, T> {
        let tape = parts[0].tape;
        let values: Vec<Arc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_leading(&refs).expect("concat shapes");
        let leads: Vec<usize> = values.iter().map(|v| v.shape()[0]).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push_op(out, &ids, move |g, need| {
            let mut start = 0;
            leads
                .iter()
                .zip(need)
                .map(|(&len, &n)| {
                    let s = start;
                    start += len;
                    n.then(|| g.slice_leading(s, len))
                })
                .collect()
        })
    }

    pub fn slice_leading(self, start: usize, len: usize) -> Var<'t, T> {
        let x = self.value();
        assert!(start + len <= x.shape()[0], "slice out of range");
        let out = x.slice_leading(start, len);
        let full = x.shape().to_vec();
        self.tape.push_op(out, &[self.id], move |g, _| {
            let inner: usize = full[1..].iter().product();
            let mut gx = Tensor::zeros(&full);
            gx.data_mut()[start * inner..(start + len) * inner].copy_from_slice(g.data());
            vec![Some(gx)]
        })
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t, T> {
        let x = self.value();
        let (r, c) = (x.shape()[0], x.shape()[1]);
        assert!(start + len <= c);
        let mut out = Vec::with_capacity(r * len);
        for row in x.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::from_vec(&[r, len], out).unwrap();
        self.tape.push_op(out, &[self.id], move |g, _| {
            let mut gx = Tensor::zeros(&[r, c]);
            for (dst, src) in gx.data_mut().chunks_mut(c).zip(g.data().chunks(len)) {
                dst[start..start + len].copy_from_slice(src);
            }
            vec![Some(gx)]
        })
    }

    /// Concatenate matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Var<'t, T>]) -> Var<'t, T> {
        let tape = parts[0].tape;
        let values: Vec<Arc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let r = values[0].shape()[0];
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[r, total]);
        let mut off = 0;
        for (v, &w) in values.iter().zip(&widths) {
            assert_eq!(v.shape()[0], r, "concat_cols row mismatch");
            for (dst, src) in out.data_mut().chunks_mut(total).zip(v.data().chunks(w)) {
                dst[off..off + w].copy_from_slice(src);
            }
            off += w;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push_op(out, &ids, move |g, need| {
            let mut off = 0;
            widths
                .iter()
                .zip(need)
                .map(|(&w, &n)| {
                    let o = off;
                    off += w;
                    n.then(|| {
                        let mut gp = Vec::with_capacity(r * w);
                        for row in g.data().chunks(total) {
                            gp.extend_from_slice(&row[o..o + w]);
                        }
                        Tensor::from_vec(&[r, w], gp).unwrap()
                    })
                })
                .collect()
        })
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let x = self.value();
        let out = Tensor::scalar(x.sum());
        let shape = x.shape().to_vec();
        self.tape
            .push_op(out, &[self.id], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = T::c(self.value().numel() as f64);
        self.sum_all().scale(T::one() / n)
    }

    /// Sum over the trailing elements of each leading slice: `[C, ...] -> [C]`.
    pub fn sum_rest(self) -> Var<'t, T> {
        let x = self.value();
        let (lead, rest) = lead_rest(x.shape());
        let out = Tensor::from_vec(
            &[lead],
            x.data().chunks(rest).map(|c| c.iter().copied().sum()).collect(),
        )
        .unwrap();
        let shape = x.shape().to_vec();
        self.tape.push_op(out, &[self.id], move |g, _| {
            let mut gx = Tensor::zeros(&shape);
            for (blk, &gv) in gx.data_mut().chunks_mut(rest).zip(g.data()) {
                blk.fill(gv);
            }
            vec![Some(gx)]
        })
    }

    /// Mean over the trailing elements of each leading slice: `[C, ...] -> [C]`.
    pub fn mean_rest(self) -> Var<'t, T> {
        let (_, rest) = lead_rest(&self.shape());
        self.sum_rest().scale(T::one() / T::c(rest as f64))
    }

    /// Zero-mean, unit-variance normalization of every row (last axis).
    pub fn normalize_last(self, eps: f64) -> Var<'t, T> {
        let x = self.value();
        let (_, cols) = rows_cols(x.shape());
        let n = T::c(cols as f64);
        let eps = T::c(eps);
        let mut y = (*x).clone();
        let mut inv_std = Vec::new();
        for row in y.data_mut().chunks_mut(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let yv = Arc::new(y.clone());
        self.tape.push_op(y, &[self.id], move |g, _| {
            let mut gx = g.clone();
            for ((gr, yr), &is) in gx
                .data_mut()
                .chunks_mut(cols)
                .zip(yv.data().chunks(cols))
                .zip(&inv_std)
            {
                let mg = gr.iter().copied().sum::<T>() / n;
                let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                for (gv, &yy) in gr.iter_mut().zip(yr) {
                    *gv = is * (*gv - mg - yy * mgy);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(self) -> Var<'t, T> {
        let x = self.value();
        let (_, cols) = rows_cols(x.shape());
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(cols) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let yv = Arc::new(y.clone());
        self.tape.push_op(y, &[self.id], move |g, _| {
            let mut gx = g.clone();
            for (gr, yr) in gx.data_mut().chunks_mut(cols).zip(yv.data().chunks(cols)) {
                let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                for (gv, &yy) in gr.iter_mut().zip(yr) {
                    *gv = yy * (*gv - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Softmax over the leading (class) axis of a `[C, ...]` tensor.
    pub fn softmax_first(self) -> Var<'t, T> {
        let x = self.value();
        let (c, s) = lead_rest(x.shape());
        let y = softmax_first_values(x.data(), c, s);
        let y = Tensor::from_vec(x.shape(), y).unwrap();
        let yv = Arc::new(y.clone());
        self.tape.push_op(y, &[self.id], move |g, _| {
            let (gd, yd) = (g.data(), yv.data());
            let mut gx = vec![T::zero(); gd.len()];
            for j in 0..s {
                let dot = (0..c).map(|k| gd[k * s + j] * yd[k * s + j]).sum::<T>();
                for k in 0..c {
                    gx[k * s + j] = yd[k * s + j] * (gd[k * s + j] - dot);
                }
            }
            vec![Some(Tensor::from_vec(g.shape(), gx).unwrap())]
        })
    }

    /// Log-softmax over the leading (class) axis of a `[C, ...]` tensor.
    pub fn log_softmax_first(self) -> Var<'t, T> {
        let x = self.value();
        let (c, s) = lead_rest(x.shape());
        let xd = x.data();
        let mut y = vec![T::zero(); xd.len()];
        for j in 0..s {
            let mx = (0..c).map(|k| xd[k * s + j]).fold(T::neg_infinity(), T::max);
            let lse = mx + (0..c).map(|k| (xd[k * s + j] - mx).exp()).sum::<T>().ln();
            for k in 0..c {
                y[k * s + j] = xd[k * s + j] - lse;
            }
        }
        let y = Tensor::from_vec(x.shape(), y).unwrap();
        let yv = Arc::new(y.clone());
        self.tape.push_op(y, &[self.id], move |g, _| {
            let (gd, yd) = (g.data(), yv.data());
            let mut gx = vec![T::zero(); gd.len()];
            for j in 0..s {
                let gs = (0..c).map(|k| gd[k * s + j]).sum::<T>();
                for k in 0..c {
                    gx[k * s + j] = gd[k * s + j] - yd[k * s + j].exp() * gs;
                }
            }
            vec![Some(Tensor::from_vec(g.shape(), gx).unwrap())]
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| T::c(gelu_scalar(v.to_f64_lossy())));
        self.tape.push_op(out, &[self.id], move |g, _| {
            vec![Some(g.zip_map(&x, |g, v| g * T::c(gelu_grad_scalar(v.to_f64_lossy()))))]
        })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let out = self.value().map(sigmoid_scalar);
        let y = Arc::new(out.clone());
        self.tape.push_op(out, &[self.id], move |g, _| {
            vec![Some(g.zip_map(&y, |g, s| g * s * (T::one() - s)))]
        })
    }

    /// x·σ(x).
    pub fn silu(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| v * sigmoid_scalar(v));
        self.tape.push_op(out, &[self.id], move |g, _| {
            vec![Some(g.zip_map(&x, |g, v| {
                let s = sigmoid_scalar(v);
                g * (s + v * s * (T::one() - s))
            }))]
        })
    }

    /// Euclidean norm of all elements; the gradient at zero is taken as zero.
    pub fn l2_norm(self) -> Var<'t, T> {
        let x = self.value();
        let norm = x.sq_norm().sqrt();
        self.tape.push_op(Tensor::scalar(norm), &[self.id], move |g, _| {
            if norm == T::zero() {
                return vec![Some(Tensor::zeros(x.shape()))];
            }
            let s = g.item() / norm;
            vec![Some(x.map(|v| v * s))]
        })
    }

    /// Rotate adjacent channel pairs of each head by per-row angles.
    ///
    /// `self` is `[rows, heads·head_dim]`; `cos`/`sin` are `[rows, head_dim/2]`
    /// and shared by all heads.
    pub fn rotate_pairs(self, cos: Arc<Tensor<T>>, sin: Arc<Tensor<T>>, heads: usize) -> Var<'t, T> {
        let x = self.value();
        let (rows, width) = (x.shape()[0], x.shape()[1]);
        let hd = width / heads;
        let half = hd / 2;
        assert_eq!(cos.shape(), &[rows, half]);
        let out = rotate_pairs_values(x.data(), cos.data(), sin.data(), rows, heads, half, false);
        let out = Tensor::from_vec(&[rows, width], out).unwrap();
        self.tape.push_op(out, &[self.id], move |g, _| {
            let gx = rotate_pairs_values(g.data(), cos.data(), sin.data(), rows, heads, half, true);
            vec![Some(Tensor::from_vec(&[rows, width], gx).unwrap())]
        })
    }

    /// 1-D cross-channel convolution with zero padding (`[C] -> [C]`), odd kernel.
    pub fn channel_conv1d(self, weight: Var<'t, T>, bias: Var<'t, T>) -> Var<'t, T> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let c = x.numel();
        let k = w.numel();
        assert!(k % 2 == 1, "channel conv kernel must be odd");
        let half = (k / 2) as isize;
        let bias0 = b.item();
        let xd = x.data().to_vec();
        let wd = w.data().to_vec();
        let out: Vec<T> = (0..c as isize)
            .map(|i| {
                let mut acc = bias0;
                for (j, &wj) in wd.iter().enumerate() {
                    let src = i + j as isize - half;
                    if (0..c as isize).contains(&src) {
                        acc += wj * xd[src as usize];
                    }
                }
                acc
            })
            .collect();
        let out = Tensor::from_vec(x.shape(), out).unwrap();
        let xshape = x.shape().to_vec();
        let wshape = w.shape().to_vec();
        let bshape = b.shape().to_vec();
        self.tape.push_op(out, &[self.id, weight.id, bias.id], move |g, need| {
            let gd = g.data();
            let mut gx = vec![T::zero(); c];
            let mut gw = vec![T::zero(); k];
            for i in 0..c as isize {
                for (j, &wj) in wd.iter().enumerate() {
                    let src = i + j as isize - half;
                    if (0..c as isize).contains(&src) {
                        gx[src as usize] += wj * gd[i as usize];
                        gw[j] += xd[src as usize] * gd[i as usize];
                    }
                }
            }
            let gb = gd.iter().copied().sum::<T>();
            vec![
                need[0].then(|| Tensor::from_vec(&xshape, gx).unwrap()),
                need[1].then(|| Tensor::from_vec(&wshape, gw).unwrap()),
                need[2].then(|| Tensor::full(&bshape, gb)),
            ]
        })
    }
}

fn transpose2<T: Float>(x: &[T], r: usize, c: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    Tensor::from_vec(&[c, r], out).unwrap()
}

pub(crate) fn softmax_first_values<T: Float>(xd: &[T], c: usize, s: usize) -> Vec<T> {
    let mut y = vec![T::zero(); xd.len()];
    for j in 0..s {
        let mx = (0..c).map(|k| xd[k * s + j]).fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for k in 0..c {
            let e = (xd[k * s + j] - mx).exp();
            y[k * s + j] = e;
            z += e;
        }
        for k in 0..c {
            y[k * s + j] /= z;
        }
    }
    y
}

fn rotate_pairs_values<T: Float>(
    x: &[T],
    cos: &[T],
    sin: &[T],
    rows: usize,
    heads: usize,
    half: usize,
    inverse: bool,
) -> Vec<T> {
    let hd = half * 2;
    let width = heads * hd;
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for h in 0..heads {
            let base = r * width + h * hd;
            for j in 0..half {
                let (c, mut s) = (cos[r * half + j], sin[r * half + j]);
                if inverse {
                    s = -s;
                }
                let (a, b) = (x[base + 2 * j], x[base + 2 * j + 1]);
                out[base + 2 * j] = a * c - b * s;
                out[base + 2 * j + 1] = a * s + b * c;
            }
        }
    }
    out
}
