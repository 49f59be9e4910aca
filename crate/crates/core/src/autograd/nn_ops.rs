//! Fused neural-network primitives with hand-written backward passes.

use std::rc::Rc;

use super::{Graph, Var};
use crate::error::{Result, SdeError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<S: Scalar> Graph<S> {
    /// Softmax over the last axis. With `causal`, the trailing `(T, T')` block
    /// is lower-triangular masked (query `i` sees keys `j <= i + T' - T`).
    pub fn softmax_last(&self, x: Var, causal: bool) -> Var {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        let cols = *s.last().expect("softmax on scalar");
        let rows_per_block = if causal { s[s.len() - 2] } else { 1 };
        let offset = cols as isize - rows_per_block as isize;
        let mut out = vec![S::zero(); vx.numel()];
        for (r, (src, dst)) in vx.data().chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let visible = if causal {
                let qi = (r % rows_per_block) as isize;
                ((qi + offset + 1).max(0) as usize).min(cols)
            } else {
                cols
            };
            if visible == 0 {
                continue;
            }
            let m = src[..visible].iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for (d, &v) in dst[..visible].iter_mut().zip(&src[..visible]) {
                *d = (v - m).exp();
                z += *d;
            }
            dst[..visible].iter_mut().for_each(|d| *d /= z);
        }
        let y = Rc::new(Tensor::new(&s, out));
        let y_keep = Rc::clone(&y);
        self.push((*y).clone(), &[x], move |g, _| {
            let mut d = vec![S::zero(); g.numel()];
            for ((gy, yy), dd) in g.data().chunks(cols).zip(y_keep.data().chunks(cols)).zip(d.chunks_mut(cols)) {
                let dot: S = gy.iter().zip(yy).map(|(&a, &b)| a * b).sum();
                for ((o, &a), &b) in dd.iter_mut().zip(gy).zip(yy) {
                    *o = b * (a - dot);
                }
            }
            vec![Some(Tensor::new(&s, d))]
        })
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let s = vx.shape().to_vec();
        let d = *s.last().expect("layer_norm on scalar");
        assert_eq!(vg.numel(), d, "layer_norm gamma size");
        let eps = S::cast(eps);
        let inv_d = S::one() / S::cast(d);
        let rows = vx.numel() / d;
        let mut xhat = vec![S::zero(); vx.numel()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); vx.numel()];
        for r in 0..rows {
            let src = &vx.data()[r * d..(r + 1) * d];
            let mean = src.iter().copied().sum::<S>() * inv_d;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (src[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::new(&s, out);
        self.push(out, &[x, gamma, beta], move |g, needs| {
            let mut dx = needs[0].then(|| vec![S::zero(); g.numel()]);
            let mut dg = vec![S::zero(); d];
            let mut db = vec![S::zero(); d];
            for r in 0..rows {
                let gr = &g.data()[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                let mut mean_dh = S::zero();
                let mut mean_dh_h = S::zero();
                for j in 0..d {
                    dg[j] += gr[j] * hr[j];
                    db[j] += gr[j];
                    let dh = gr[j] * vg.data()[j];
                    mean_dh += dh;
                    mean_dh_h += dh * hr[j];
                }
                mean_dh *= inv_d;
                mean_dh_h *= inv_d;
                if let Some(dx) = dx.as_mut() {
                    for j in 0..d {
                        let dh = gr[j] * vg.data()[j];
                        dx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            }
            vec![
                dx.map(|v| Tensor::new(&s, v)),
                needs[1].then(|| Tensor::new(&[d], dg)),
                needs[2].then(|| Tensor::new(&[d], db)),
            ]
        })
    }

    /// `w / σ(w)` with `w` viewed as `(rows, rest)` and σ its largest singular
    /// value, estimated by `iters` power iterations from a fixed start vector.
    /// The singular vectors are constants for the backward pass.
    pub fn spectral_normalize(&self, w: Var, iters: usize) -> Var {
        let vw = self.value(w);
        let shape = vw.shape().to_vec();
        let rows = shape[0];
        let cols = vw.numel() / rows;
        let data = vw.data();
        let unit = |x: &mut Vec<S>| {
            let n = x.iter().map(|&v| v * v).sum::<S>().sqrt().max(S::cast(1e-12));
            x.iter_mut().for_each(|v| *v /= n);
        };
        let mut v = vec![S::one(); cols];
        unit(&mut v);
        let mut u = vec![S::zero(); rows];
        for _ in 0..iters.max(1) {
            for (r, ur) in u.iter_mut().enumerate() {
                *ur = data[r * cols..(r + 1) * cols].iter().zip(&v).map(|(&a, &b)| a * b).sum();
            }
            unit(&mut u);
            v.iter_mut().for_each(|x| *x = S::zero());
            for (r, &ur) in u.iter().enumerate() {
                for (x, &a) in v.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
                    *x += ur * a;
                }
            }
            unit(&mut v);
        }
        let sigma: S = (0..rows)
            .map(|r| u[r] * data[r * cols..(r + 1) * cols].iter().zip(&v).map(|(&a, &b)| a * b).sum::<S>())
            .sum::<S>()
            .max(S::cast(1e-12));
        let out = vw.map(|x| x / sigma);
        self.push(out, &[w], move |g, _| {
            // d(w/σ) = dw/σ − (⟨g, w⟩/σ²) u vᵀ
            let gw: S = g.data().iter().zip(vw.data()).map(|(&a, &b)| a * b).sum();
            let k = gw / (sigma * sigma);
            let mut dw = g.data().iter().map(|&x| x / sigma).collect::<Vec<_>>();
            for r in 0..rows {
                for c in 0..cols {
                    dw[r * cols + c] -= k * u[r] * v[c];
                }
            }
            vec![Some(Tensor::new(&shape, dw))]
        })
    }

    /// Row-wise cosine similarity of two `(m, d)` tensors, `a·b / (max(|a|, eps) max(|b|, eps))`.
    pub fn cosine_rows(&self, a: Var, b: Var, eps: f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "cosine_rows shape mismatch");
        assert_eq!(va.rank(), 2, "cosine_rows expects (m, d)");
        let (m, d) = (va.dim(0), va.dim(1));
        let eps = S::cast(eps);
        let mut stats = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let (ra, rb) = (va.row(i), vb.row(i));
            let dot: S = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
            let na = ra.iter().map(|&x| x * x).sum::<S>().sqrt();
            let nb = rb.iter().map(|&x| x * x).sum::<S>().sqrt();
            let (ma, mb) = (na.max(eps), nb.max(eps));
            let den = ma * mb;
            out.push(dot / den);
            stats.push((dot, na, nb, den));
        }
        let out = Tensor::new(&[m], out);
        self.push(out, &[a, b], move |g, needs| {
            let mut da = needs[0].then(|| vec![S::zero(); m * d]);
            let mut db = needs[1].then(|| vec![S::zero(); m * d]);
            for i in 0..m {
                let (dot, na, nb, den) = stats[i];
                let gi = g.data()[i];
                let (ra, rb) = (va.row(i), vb.row(i));
                let coef = dot / (den * den);
                if let Some(da) = da.as_mut() {
                    let ka = if na > eps { coef * nb.max(eps) / na } else { S::zero() };
                    for j in 0..d {
                        da[i * d + j] = gi * (rb[j] / den - ka * ra[j]);
                    }
                }
                if let Some(db) = db.as_mut() {
                    let kb = if nb > eps { coef * na.max(eps) / nb } else { S::zero() };
                    for j in 0..d {
                        db[i * d + j] = gi * (ra[j] / den - kb * rb[j]);
                    }
                }
            }
            vec![da.map(|v| Tensor::new(&[m, d], v)), db.map(|v| Tensor::new(&[m, d], v))]
        })
    }

    /// Scale every channel vector of an NCHW tensor to unit length.
    pub fn channel_normalize(&self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        assert_eq!(s.len(), 4, "channel_normalize expects NCHW");
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let eps = S::cast(eps);
        let mut norms = vec![S::zero(); n * plane];
        let mut out = vec![S::zero(); vx.numel()];
        for i in 0..n {
            for p in 0..plane {
                let r = (0..c)
                    .map(|ch| {
                        let v = vx.data()[(i * c + ch) * plane + p];
                        v * v
                    })
                    .sum::<S>()
                    .sqrt();
                norms[i * plane + p] = r;
                let den = r + eps;
                for ch in 0..c {
                    let idx = (i * c + ch) * plane + p;
                    out[idx] = vx.data()[idx] / den;
                }
            }
        }
        let out = Tensor::new(&s, out);
        self.push(out, &[x], move |g, _| {
            let mut d = vec![S::zero(); g.numel()];
            for i in 0..n {
                for p in 0..plane {
                    let r = norms[i * plane + p];
                    let den = r + eps;
                    let vg: S = (0..c)
                        .map(|ch| {
                            let idx = (i * c + ch) * plane + p;
                            vx.data()[idx] * g.data()[idx]
                        })
                        .sum();
                    let k = if r > S::zero() { vg / (den * den * r) } else { S::zero() };
                    for ch in 0..c {
                        let idx = (i * c + ch) * plane + p;
                        d[idx] = g.data()[idx] / den - vx.data()[idx] * k;
                    }
                }
            }
            vec![Some(Tensor::new(&s, d))]
        })
    }

    /// Mean token cross-entropy over the rows of `logits` whose mask is set.
    pub fn masked_cross_entropy(&self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rank() != 2 || vl.dim(0) != targets.len() || targets.len() != mask.len() {
            return Err(SdeError::contract(format!(
                "cross-entropy: logits {:?}, {} targets, {} mask entries",
                vl.shape(),
                targets.len(),
                mask.len()
            )));
        }
        let (m, v) = (vl.dim(0), vl.dim(1));
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(SdeError::EmptyTarget);
        }
        let mut probs = vec![S::zero(); m * v];
        let mut total = S::zero();
        for i in 0..m {
            if !mask[i] {
                continue;
            }
            let t = targets[i];
            if t >= v {
                return Err(SdeError::invalid(format!("target id {t} outside vocabulary of {v}")));
            }
            let row = vl.row(i);
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|&x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[t];
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let inv = S::one() / S::cast(count);
        let out = Tensor::scalar(total * inv);
        let targets = targets.to_vec();
        let mask = mask.to_vec();
        Ok(self.push(out, &[logits], move |g, _| {
            let k = g.item() * inv;
            let mut d = probs.clone();
            for i in 0..m {
                let row = &mut d[i * v..(i + 1) * v];
                if !mask[i] {
                    row.fill(S::zero());
                    continue;
                }
                row[targets[i]] -= S::one();
                row.iter_mut().for_each(|x| *x *= k);
            }
            vec![Some(Tensor::new(&[m, v], d))]
        }))
    }
}
