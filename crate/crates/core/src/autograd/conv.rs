//! NCHW convolution and nearest-neighbour upsampling.

use super::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (self.width + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Output columns `[lo, hi)` whose input column `ox*stride + kj - pad` is in bounds.
fn valid_cols(geo: &ConvGeom, ow: usize, kj: usize) -> (usize, usize) {
    let (s, p, w) = (geo.stride, geo.pad, geo.width);
    let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
    // ox*s + kj - p <= w - 1  <=>  ox <= (w - 1 + p - kj) / s
    let hi = if w + p > kj { ((w - 1 + p - kj) / s + 1).min(ow) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfold one `(C, H, W)` image into `(C*k*k, OH*OW)` patch columns.
fn im2col<S: Scalar>(x: &[S], geo: &ConvGeom, cols: &mut [S]) {
    let (oh, ow) = geo.out_hw();
    let k = geo.kernel;
    let plane = oh * ow;
    let s = geo.stride;
    for c in 0..geo.channels {
        let xc = &x[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(geo, ow, kj);
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - geo.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= geo.height as isize {
                        line.fill(S::zero());
                        continue;
                    }
                    line[..lo].fill(S::zero());
                    line[hi..].fill(S::zero());
                    if lo < hi {
                        let start = iy as usize * geo.width + lo * s + kj - geo.pad;
                        let src = &xc[start..];
                        if s == 1 {
                            line[lo..hi].copy_from_slice(&src[..hi - lo]);
                        } else {
                            for (i, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = src[i * s];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into an image gradient.
fn col2im<S: Scalar>(cols: &[S], geo: &ConvGeom, dx: &mut [S]) {
    let (oh, ow) = geo.out_hw();
    let k = geo.kernel;
    let plane = oh * ow;
    let s = geo.stride;
    for c in 0..geo.channels {
        let dxc = &mut dx[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(geo, ow, kj);
                if lo >= hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.height as isize {
                        continue;
                    }
                    let start = iy as usize * geo.width + lo * s + kj - geo.pad;
                    let line = &src[oy * ow + lo..oy * ow + hi];
                    let dst = &mut dxc[start..];
                    if s == 1 {
                        for (d, &v) in dst.iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in line.iter().enumerate() {
                            dst[i * s] += v;
                        }
                    }
                }
            }
        }
    }
}

impl<S: Scalar> Graph<S> {
    /// 2-D convolution. `x: (N, C, H, W)`, `w: (O, C, k, k)`, `b: (O)`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let xs = vx.shape().to_vec();
        let ws = vw.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be OCkk");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d expects square kernels");
        let geo = ConvGeom { channels: xs[1], height: xs[2], width: xs[3], kernel: ws[2], stride, pad };
        let (n, o) = (xs[0], ws[0]);
        let (oh, ow) = geo.out_hw();
        let plane = oh * ow;
        let ckk = geo.col_rows();
        let in_size = geo.channels * geo.height * geo.width;

        let bias = b.map(|b| self.value(b));
        let mut out = vec![S::zero(); n * o * plane];
        // patch columns of every image, kept for the weight gradient
        let mut all_cols = vec![S::zero(); n * ckk * plane];
        for i in 0..n {
            let cols = &mut all_cols[i * ckk * plane..(i + 1) * ckk * plane];
            im2col(&vx.data()[i * in_size..(i + 1) * in_size], &geo, cols);
            let dst = &mut out[i * o * plane..(i + 1) * o * plane];
            S::gemm(
                o,
                ckk,
                plane,
                S::one(),
                vw.data(),
                (ckk as isize, 1),
                cols,
                (plane as isize, 1),
                S::zero(),
                dst,
                (plane as isize, 1),
            );
            if let Some(bias) = &bias {
                for (oc, chunk) in dst.chunks_mut(plane).enumerate() {
                    let bv = bias.data()[oc];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let out = Tensor::new(&[n, o, oh, ow], out);
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        self.push(out, &parents, move |g, needs| {
            let mut gx = needs[0].then(|| vec![S::zero(); n * in_size]);
            let mut gw = needs[1].then(|| vec![S::zero(); o * ckk]);
            let mut dcols = vec![S::zero(); ckk * plane];
            for i in 0..n {
                let gi = &g.data()[i * o * plane..(i + 1) * o * plane];
                if let Some(gw) = gw.as_mut() {
                    let cols = &all_cols[i * ckk * plane..(i + 1) * ckk * plane];
                    // gw (o, ckk) += g_i (o, plane) @ cols^T (plane, ckk)
                    S::gemm(
                        o,
                        plane,
                        ckk,
                        S::one(),
                        gi,
                        (plane as isize, 1),
                        cols,
                        (1, plane as isize),
                        S::one(),
                        gw,
                        (ckk as isize, 1),
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    // dcols (ckk, plane) = w^T (ckk, o) @ g_i (o, plane)
                    S::gemm(
                        ckk,
                        o,
                        plane,
                        S::one(),
                        vw.data(),
                        (1, ckk as isize),
                        gi,
                        (plane as isize, 1),
                        S::zero(),
                        &mut dcols,
                        (plane as isize, 1),
                    );
                    col2im(&dcols, &geo, &mut gx[i * in_size..(i + 1) * in_size]);
                }
            }
            let mut res = vec![gx.map(|d| Tensor::new(&xs, d)), gw.map(|d| Tensor::new(&ws, d))];
            if needs.len() == 3 {
                res.push(needs[2].then(|| {
                    let mut gb = vec![S::zero(); o];
                    for i in 0..n {
                        for (oc, acc) in gb.iter_mut().enumerate() {
                            let start = (i * o + oc) * plane;
                            *acc += g.data()[start..start + plane].iter().copied().sum::<S>();
                        }
                    }
                    Tensor::new(&[o], gb)
                }));
            }
            res
        })
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(&self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        assert_eq!(s.len(), 4, "upsample2x expects NCHW");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![S::zero(); planes * h2 * w2];
        for p in 0..planes {
            let src = &vx.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(&[s[0], s[1], h2, w2], out);
        self.push(out, &[x], move |g, _| {
            let mut d = vec![S::zero(); planes * h * w];
            for p in 0..planes {
                let src = &g.data()[p * h2 * w2..(p + 1) * h2 * w2];
                let dst = &mut d[p * h * w..(p + 1) * h * w];
                for y in 0..h2 {
                    for xx in 0..w2 {
                        dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                    }
                }
            }
            vec![Some(Tensor::new(&s, d))]
        })
    }
}
