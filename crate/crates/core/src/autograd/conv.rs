//! Volumetric convolutions (im2col + GEMM) and patch-level masking.

use std::sync::Arc;

use super::Var;
use crate::tensor::{matmul_into, spatial_dims, Float, Tensor};

/// Output extent of a convolution along each axis.
pub fn conv_output_dims(dims: [usize; 3], kernel: usize, stride: usize, pad: usize) -> [usize; 3] {
    dims.map(|d| (d + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    dims: [usize; 3],
    out: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.out.iter().product()
    }

    /// Source index along one axis, or None when it falls in the padding.
    #[inline]
    fn src(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let s = (o * self.stride + kk) as isize - self.pad as isize;
        (s >= 0 && (s as usize) < extent).then_some(s as usize)
    }
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let [d, h, w] = g.dims;
    let [od, oh, ow] = g.out;
    let ncol = g.cols();
    let mut cols = vec![T::zero(); g.rows() * ncol];
    let k = g.k;
    for ci in 0..g.cin {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let dst = &mut cols[row * ncol..(row + 1) * ncol];
                    for z in 0..od {
                        let Some(sz) = g.src(z, kd, d) else { continue };
                        for y in 0..oh {
                            let Some(sy) = g.src(y, kh, h) else { continue };
                            let src_row = &xc[(sz * h + sy) * w..(sz * h + sy + 1) * w];
                            let drow = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            if g.stride == 1 {
                                // contiguous run, clipped at the borders
                                let lo = g.pad.saturating_sub(kw);
                                let hi = ow.min((w + g.pad).saturating_sub(kw));
                                if lo < hi {
                                    let s0 = lo + kw - g.pad;
                                    drow[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                                }
                            } else {
                                for (xo, v) in drow.iter_mut().enumerate() {
                                    if let Some(sx) = g.src(xo, kw, w) {
                                        *v = src_row[sx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let [d, h, w] = g.dims;
    let [od, oh, ow] = g.out;
    let ncol = g.cols();
    let mut x = vec![T::zero(); g.cin * d * h * w];
    let k = g.k;
    for ci in 0..g.cin {
        let xc = &mut x[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let src = &cols[row * ncol..(row + 1) * ncol];
                    for z in 0..od {
                        let Some(sz) = g.src(z, kd, d) else { continue };
                        for y in 0..oh {
                            let Some(sy) = g.src(y, kh, h) else { continue };
                            let dst_row = &mut xc[(sz * h + sy) * w..(sz * h + sy + 1) * w];
                            let srow = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            for (xo, &v) in srow.iter().enumerate() {
                                if let Some(sx) = g.src(xo, kw, w) {
                                    dst_row[sx] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

impl<'t, T: Float> Var<'t, T> {
    /// 3-D convolution of a `Cin×D×H×W` volume with a `Cout×Cin×k×k×k` kernel (no bias).
    pub fn conv3d(self, weight: Var<'t, T>, stride: usize, pad: usize) -> Var<'t, T> {
        let (x, w) = (self.value(), weight.value());
        let dims = spatial_dims(x.shape()).expect("conv3d input");
        let ws = w.shape().to_vec();
        assert_eq!(ws.len(), 5, "conv3d weight must be 5-D");
        let (cout, cin, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(x.shape()[0], cin, "conv3d channel mismatch");
        let geom = ConvGeom {
            cin,
            dims,
            out: conv_output_dims(dims, k, stride, pad),
            k,
            stride,
            pad,
        };
        let (rows, ncol) = (geom.rows(), geom.cols());
        let cols = im2col(x.data(), &geom);
        let mut out = Tensor::zeros(&[cout, geom.out[0], geom.out[1], geom.out[2]]);
        matmul_into(w.data(), false, &cols, false, cout, rows, ncol, T::one(), T::zero(), out.data_mut());
        drop(cols);
        self.tape.push_op(out, &[self.id, weight.id], move |g, need| {
            let gx = need[0].then(|| {
                let mut gcols = vec![T::zero(); rows * ncol];
                matmul_into(w.data(), true, g.data(), false, rows, cout, ncol, T::one(), T::zero(), &mut gcols);
                Tensor::from_vec(x.shape(), col2im(&gcols, &geom)).unwrap()
            });
            let gw = need[1].then(|| {
                let cols = im2col(x.data(), &geom);
                let mut gw = Tensor::zeros(&ws);
                matmul_into(g.data(), false, &cols, true, cout, ncol, rows, T::one(), T::zero(), gw.data_mut());
                gw
            });
            vec![gx, gw]
        })
    }

    /// Transposed convolution whose kernel equals its stride (non-overlapping
    /// upsampling). Weight layout `Cin×Cout×s×s×s`.
    pub fn conv_transpose3d(self, weight: Var<'t, T>) -> Var<'t, T> {
        let (x, w) = (self.value(), weight.value());
        let [d, h, wd] = spatial_dims(x.shape()).expect("conv_transpose3d input");
        let ws = w.shape().to_vec();
        assert_eq!(ws.len(), 5, "conv_transpose3d weight must be 5-D");
        let (cin, cout, s) = (ws[0], ws[1], ws[2]);
        assert_eq!(x.shape()[0], cin, "conv_transpose3d channel mismatch");
        let sp = d * h * wd;
        let kk = s * s * s;
        let outer = cout * kk;
        // y_cols[(co, a, b, c), voxel] = Σ_ci w[ci, (co,a,b,c)] · x[ci, voxel]
        let mut ycols = vec![T::zero(); outer * sp];
        matmul_into(w.data(), true, x.data(), false, outer, cin, sp, T::one(), T::zero(), &mut ycols);
        let odims = [d * s, h * s, wd * s];
        let scatter = move |ycols: &[T]| -> Vec<T> {
            let mut out = vec![T::zero(); cout * odims.iter().product::<usize>()];
            for co in 0..cout {
                for a in 0..s {
                    for b in 0..s {
                        for c in 0..s {
                            let row = ((co * s + a) * s + b) * s + c;
                            let src = &ycols[row * sp..(row + 1) * sp];
                            for z in 0..d {
                                for y in 0..h {
                                    let oz = z * s + a;
                                    let oy = y * s + b;
                                    let base = ((co * odims[0] + oz) * odims[1] + oy) * odims[2];
                                    let srow = &src[(z * h + y) * wd..(z * h + y + 1) * wd];
                                    for (xx, &v) in srow.iter().enumerate() {
                                        out[base + xx * s + c] = v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            out
        };
        let gather = move |g: &[T]| -> Vec<T> {
            let mut cols = vec![T::zero(); outer * sp];
            for co in 0..cout {
                for a in 0..s {
                    for b in 0..s {
                        for c in 0..s {
                            let row = ((co * s + a) * s + b) * s + c;
                            let dst = &mut cols[row * sp..(row + 1) * sp];
                            for z in 0..d {
                                for y in 0..h {
                                    let oz = z * s + a;
                                    let oy = y * s + b;
                                    let base = ((co * odims[0] + oz) * odims[1] + oy) * odims[2];
                                    let drow = &mut dst[(z * h + y) * wd..(z * h + y + 1) * wd];
                                    for (xx, v) in drow.iter_mut().enumerate() {
                                        *v = g[base + xx * s + c];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            cols
        };
        let out = Tensor::from_vec(&[cout, odims[0], odims[1], odims[2]], scatter(&ycols)).unwrap();
        self.tape.push_op(out, &[self.id, weight.id], move |g, need| {
            let gcols = gather(g.data());
            let gx = need[0].then(|| {
                let mut gx = Tensor::zeros(x.shape());
                matmul_into(w.data(), false, &gcols, false, cin, outer, sp, T::one(), T::zero(), gx.data_mut());
                gx
            });
            let gw = need[1].then(|| {
                let mut gw = Tensor::zeros(&ws);
                matmul_into(x.data(), false, &gcols, true, cin, sp, outer, T::one(), T::zero(), gw.data_mut());
                gw
            });
            vec![gx, gw]
        })
    }

    /// Replace patches of a `K×D×H×W` volume by per-modality mask tokens.
    ///
    /// `visible[m][i]` keeps patch `i` (raster order, depth-major) of modality
    /// `m`; otherwise the patch becomes `tokens[m]` reshaped to `P×P×P`.
    pub fn apply_patch_mask(self, tokens: Var<'t, T>, visible: Arc<Vec<Vec<bool>>>, patch: usize) -> Var<'t, T> {
        let (x, tk) = (self.value(), tokens.value());
        let [d, h, w] = spatial_dims(x.shape()).expect("mask input");
        let k = x.shape()[0];
        let p3 = patch * patch * patch;
        assert_eq!(tk.shape(), &[k, p3], "mask token shape");
        let grid = [d / patch, h / patch, w / patch];
        let n = grid.iter().product::<usize>();
        assert!(visible.len() == k && visible.iter().all(|r| r.len() == n), "mask layout");
        // voxel -> (patch index, offset inside patch)
        let locate = move |z: usize, y: usize, xx: usize| {
            let pi = ((z / patch) * grid[1] + y / patch) * grid[2] + xx / patch;
            let off = ((z % patch) * patch + y % patch) * patch + xx % patch;
            (pi, off)
        };
        let mut out = (*x).clone();
        let vol = d * h * w;
        {
            let od = out.data_mut();
            for m in 0..k {
                if visible[m].iter().all(|&v| v) {
                    continue;
                }
                for z in 0..d {
                    for y in 0..h {
                        for xx in 0..w {
                            let (pi, off) = locate(z, y, xx);
                            if !visible[m][pi] {
                                od[m * vol + (z * h + y) * w + xx] = tk.data()[m * p3 + off];
                            }
                        }
                    }
                }
            }
        }
        let tshape = tk.shape().to_vec();
        self.tape.push_op(out, &[self.id, tokens.id], move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut gx = g.clone();
                let gxd = gx.data_mut();
                for m in 0..k {
                    for z in 0..d {
                        for y in 0..h {
                            for xx in 0..w {
                                let (pi, _) = locate(z, y, xx);
                                if !visible[m][pi] {
                                    gxd[m * vol + (z * h + y) * w + xx] = T::zero();
                                }
                            }
                        }
                    }
                }
                gx
            });
            let gt = need[1].then(|| {
                let mut gt = Tensor::zeros(&tshape);
                let gtd = gt.data_mut();
                for m in 0..k {
                    for z in 0..d {
                        for y in 0..h {
                            for xx in 0..w {
                                let (pi, off) = locate(z, y, xx);
                                if !visible[m][pi] {
                                    gtd[m * p3 + off] += gd[m * vol + (z * h + y) * w + xx];
                                }
                            }
                        }
                    }
                }
                gt
            });
            vec![gx, gt]
        })
    }
}
