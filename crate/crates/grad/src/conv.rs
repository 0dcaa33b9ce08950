use rayon::prelude::*;

use crate::real::{gemm, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output columns `[lo, hi)` for kernel offset `kx` at stride 1.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).min(self.wo);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.wo).max(lo);
        (lo, hi)
    }

    /// Unfolds one image `[Cin, H, W]` into `[Cin*kh*kw, Ho*Wo]`, replacing
    /// the contents of `col`.
    fn im2col<T: Real>(&self, x: &[T], col: &mut Vec<T>) {
        col.clear();
        col.reserve(self.k() * self.p());
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            col.extend(std::iter::repeat_n(T::zero(), self.wo));
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        if self.stride == 1 {
                            // ix = ox + kx - pad is contiguous over [lo, hi).
                            col.extend(std::iter::repeat_n(T::zero(), lo));
                            col.extend_from_slice(&src[lo + kx - self.pad..hi + kx - self.pad]);
                            col.extend(std::iter::repeat_n(T::zero(), self.wo - hi));
                        } else {
                            col.extend((0..self.wo).map(|ox| {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    T::zero()
                                } else {
                                    src[ix as usize]
                                }
                            }));
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`], accumulating into `x`.
    fn col2im<T: Real>(&self, col: &[T], x: &mut [T]) {
        let p = self.p();
        for ci in 0..self.cin {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let (lo, hi) = self.valid_cols(kx);
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let line = &src[oy * self.wo..(oy + 1) * self.wo];
                        if self.stride == 1 {
                            dst[lo + kx - self.pad..hi + kx - self.pad]
                                .iter_mut()
                                .zip(&line[lo..hi])
                                .for_each(|(d, &v)| *d += v);
                            continue;
                        }
                        for (ox, &v) in line.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tensor<T> {
    /// 2D cross-correlation of `[N, Cin, H, W]` with `[Cout, Cin, kh, kw]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Tensor<T> {
        assert_eq!(self.rank(), 4, "conv2d input must be NCHW, got {:?}", self.shape());
        assert_eq!(weight.rank(), 4, "conv2d weight must be OIHW");
        assert!(stride >= 1);
        let (n, cin, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (cout, wcin, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
        assert_eq!(cin, wcin, "conv2d channel mismatch: input {cin}, weight {wcin}");
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel larger than padded input");
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[cout], "conv2d bias shape");
        }
        let g = ConvGeom {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let (k, p) = (g.k(), g.p());
        let x = self.data();
        let wt = weight.data();
        let bias_data = bias.map(|b| b.data());
        let mut out = vec![T::zero(); n * cout * p];
        out.par_chunks_mut(cout * p)
            .enumerate()
            .for_each(|(i, dst)| {
                let xi = &x[i * cin * h * w..(i + 1) * cin * h * w];
                if g.is_pointwise() {
                    gemm(cout, k, p, wt, false, xi, false, dst, false);
                } else {
                    let mut col = Vec::new();
                    g.im2col(xi, &mut col);
                    gemm(cout, k, p, wt, false, &col, false, dst, false);
                }
                if let Some(b) = bias_data {
                    for (co, chunk) in dst.chunks_mut(p).enumerate() {
                        chunk.iter_mut().for_each(|v| *v += b[co]);
                    }
                }
            });

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op(
            out,
            &[n, cout, g.ho, g.wo],
            parents,
            Box::new(move |par, _, grad| conv_backward(&g, n, par, grad)),
        )
    }
}

fn conv_backward<T: Real>(
    g: &ConvGeom,
    n: usize,
    parents: &[Tensor<T>],
    grad: &[T],
) -> Vec<Option<Vec<T>>> {
    let (k, p) = (g.k(), g.p());
    let x = parents[0].data();
    let wt = parents[1].data();
    let need_x = parents[0].requires_grad();
    let need_w = parents[1].requires_grad();
    let img = g.cin * g.h * g.w;

    // Per-sample partial weight gradients are summed afterwards in sample
    // order, so the result does not depend on the thread schedule.
    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let gi = &grad[i * g.cout * p..(i + 1) * g.cout * p];
            let xi = &x[i * img..(i + 1) * img];
            // The unfolded input is reused as the column gradient buffer;
            // gemm without accumulation overwrites it.
            let mut col = Vec::new();
            let gw = need_w.then(|| {
                let mut gw = vec![T::zero(); g.cout * k];
                if g.is_pointwise() {
                    gemm(g.cout, p, k, gi, false, xi, true, &mut gw, false);
                } else {
                    g.im2col(xi, &mut col);
                    gemm(g.cout, p, k, gi, false, &col, true, &mut gw, false);
                }
                gw
            });
            let gx = need_x.then(|| {
                if g.is_pointwise() {
                    let mut gx = vec![T::zero(); img];
                    gemm(k, g.cout, p, wt, true, gi, false, &mut gx, false);
                    gx
                } else {
                    let mut gcol = col;
                    gcol.resize(k * p, T::zero());
                    gemm(k, g.cout, p, wt, true, gi, false, &mut gcol, false);
                    let mut gx = vec![T::zero(); img];
                    g.col2im(&gcol, &mut gx);
                    gx
                }
            });
            (gx, gw)
        })
        .collect();

    let mut gx_all = need_x.then(|| Vec::with_capacity(n * img));
    let mut gw_all = need_w.then(|| vec![T::zero(); g.cout * k]);
    for (gx, gw) in per_sample {
        if let (Some(all), Some(gx)) = (gx_all.as_mut(), gx) {
            all.extend_from_slice(&gx);
        }
        if let (Some(all), Some(gw)) = (gw_all.as_mut(), gw) {
            all.iter_mut().zip(&gw).for_each(|(a, b)| *a += *b);
        }
    }
    let mut result = vec![gx_all, gw_all];
    if parents.len() == 3 {
        let gb = parents[2].requires_grad().then(|| {
            let mut gb = vec![T::zero(); g.cout];
            for i in 0..n {
                for (co, acc) in gb.iter_mut().enumerate() {
                    let base = (i * g.cout + co) * p;
                    *acc += grad[base..base + p].iter().copied().sum::<T>();
                }
            }
            gb
        });
        result.push(gb);
    }
    result
}

#[cfg(test)]
mod tests {
    use crate::Tensor;

    fn naive_conv(
        x: &[f64],
        (n, cin, h, w): (usize, usize, usize, usize),
        wt: &[f64],
        (cout, kh, kw): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * cout * ho * wo];
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((b * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * wt[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((b * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + seed) * 0.7371).sin()).collect()
    }

    #[test]
    fn matches_direct_convolution() {
        for &(k, stride, pad) in &[(3, 1, 1), (2, 2, 0), (1, 1, 0), (3, 2, 1)] {
            let x = pseudo(2 * 3 * 6 * 6, 0.3);
            let wt = pseudo(4 * 3 * k * k, 1.9);
            let xt = Tensor::new(x.clone(), &[2, 3, 6, 6]);
            let wtt = Tensor::new(wt.clone(), &[4, 3, k, k]);
            let y = xt.conv2d(&wtt, None, stride, pad);
            let expect = naive_conv(&x, (2, 3, 6, 6), &wt, (4, k, k), stride, pad);
            for (a, b) in y.data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let shape = [1usize, 2, 5, 5];
        let x0 = pseudo(50, 0.1);
        let w0 = pseudo(3 * 2 * 9, 2.2);
        let b0 = vec![0.1, -0.2, 0.3];
        let target = pseudo(75, 4.0);
        let loss = |x: &[f64], w: &[f64], b: &[f64]| {
            let y = naive_conv(x, (1, 2, 5, 5), w, (3, 3, 3), 1, 1);
            y.iter()
                .enumerate()
                .map(|(i, v)| (v + b[i / 25] - target[i]).powi(2))
                .sum::<f64>()
        };
        let x = Tensor::leaf(x0.clone(), &shape);
        let w = Tensor::leaf(w0.clone(), &[3, 2, 3, 3]);
        let b = Tensor::leaf(b0.clone(), &[3]);
        let t = Tensor::new(target.clone(), &[1, 3, 5, 5]);
        let g = x.conv2d(&w, Some(&b), 1, 1).sub(&t).sqr().sum_all().backward();
        let eps = 1e-6;
        let check = |analytic: &[f64], perturb: &dyn Fn(usize, f64) -> f64| {
            for (i, &a) in analytic.iter().enumerate() {
                let fd = (perturb(i, eps) - perturb(i, -eps)) / (2.0 * eps);
                assert!((a - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {a} vs {fd}");
            }
        };
        check(g.get(&x).unwrap(), &|i, e| {
            let mut xx = x0.clone();
            xx[i] += e;
            loss(&xx, &w0, &b0)
        });
        check(g.get(&w).unwrap(), &|i, e| {
            let mut ww = w0.clone();
            ww[i] += e;
            loss(&x0, &ww, &b0)
        });
        check(g.get(&b).unwrap(), &|i, e| {
            let mut bb = b0.clone();
            bb[i] += e;
            loss(&x0, &w0, &bb)
        });
    }
}
