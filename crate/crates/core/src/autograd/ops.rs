//! Elementwise, reduction, shape and matrix operations.

use std::rc::Rc;

use super::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

impl<S: Scalar> Graph<S> {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = va.zip_map(&vb, |x, y| x + y);
        self.push(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let out = va.zip_map(&vb, |x, y| x - y);
        self.push(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = va.zip_map(&vb, |x, y| x * y);
        self.push(out, &[a, b], move |g, needs| {
            vec![needs[0].then(|| g.zip_map(&vb, |gv, y| gv * y)), needs[1].then(|| g.zip_map(&va, |gv, x| gv * x))]
        })
    }

    pub fn square(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|x| x * x);
        let two = S::cast(2.0);
        self.push(out, &[a], move |g, _| vec![Some(g.zip_map(&va, |gv, x| two * gv * x))])
    }

    pub fn scale(&self, a: Var, k: S) -> Var {
        let out = self.value(a).scale(k);
        self.push(out, &[a], move |g, _| vec![Some(g.scale(k))])
    }

    pub fn add_scalar(&self, a: Var, k: S) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.push(out, &[a], |g, _| vec![Some(g.clone())])
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -S::one())
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s (bias, positional tables).
    pub fn add_suffix(&self, x: Var, y: Var) -> Var {
        let (vx, vy) = (self.value(x), self.value(y));
        let (xs, ys) = (vx.shape().to_vec(), vy.shape().to_vec());
        assert!(
            ys.len() <= xs.len() && xs[xs.len() - ys.len()..] == ys[..],
            "add_suffix: {ys:?} is not a suffix of {xs:?}"
        );
        let inner = vy.numel();
        let mut out = vx.data().to_vec();
        for chunk in out.chunks_mut(inner) {
            for (o, &b) in chunk.iter_mut().zip(vy.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(&xs, out);
        self.push(out, &[x, y], move |g, needs| {
            let gy = needs[1].then(|| {
                let mut acc = vec![S::zero(); inner];
                for chunk in g.data().chunks(inner) {
                    for (a, &v) in acc.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                Tensor::new(&ys, acc)
            });
            vec![Some(g.clone()), gy]
        })
    }

    fn unary(&self, a: Var, f: impl Fn(S) -> S, df: impl Fn(S) -> S + 'static) -> Var {
        let va = self.value(a);
        let out = va.map(f);
        self.push(out, &[a], move |g, _| vec![Some(g.zip_map(&va, |gv, x| gv * df(x)))])
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(S::zero()), |x| if x > S::zero() { S::one() } else { S::zero() })
    }

    pub fn leaky_relu(&self, a: Var, slope: S) -> Var {
        self.unary(
            a,
            move |x| if x > S::zero() { x } else { slope * x },
            move |x| if x > S::zero() { S::one() } else { slope },
        )
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x / (S::one() + (-x).exp()),
            |x| {
                let s = S::one() / (S::one() + (-x).exp());
                s * (S::one() + x * (S::one() - s))
            },
        )
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self, a: Var) -> Var {
        let c = S::cast((2.0 / std::f64::consts::PI).sqrt());
        let k = S::cast(0.044715);
        let half = S::cast(0.5);
        let three = S::cast(3.0);
        self.unary(
            a,
            move |x| half * x * (S::one() + (c * (x + k * x * x * x)).tanh()),
            move |x| {
                let inner = c * (x + k * x * x * x);
                let t = inner.tanh();
                let dinner = c * (S::one() + three * k * x * x);
                half * (S::one() + t) + half * x * (S::one() - t * t) * dinner
            },
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| S::one() / (S::one() + (-x).exp()),
            |x| {
                let s = S::one() / (S::one() + (-x).exp());
                s * (S::one() - s)
            },
        )
    }

    /// Clamp to `[lo, hi]`; the gradient is passed through inside the interval only.
    pub fn clamp(&self, a: Var, lo: S, hi: S) -> Var {
        self.unary(a, move |x| x.max(lo).min(hi), move |x| if x >= lo && x <= hi { S::one() } else { S::zero() })
    }

    pub fn sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let out = Tensor::scalar(va.sum());
        self.push(out, &[a], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let n = S::cast(va.numel().max(1));
        let out = Tensor::scalar(va.sum() / n);
        self.push(out, &[a], move |g, _| vec![Some(Tensor::full(&shape, g.item() / n))])
    }

    /// Mean over the middle axis of an `(a, b, c)` tensor, giving `(a, c)`.
    pub fn mean_axis1(&self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        assert_eq!(s.len(), 3, "mean_axis1 expects rank 3");
        let (a, b, c) = (s[0], s[1], s[2]);
        let inv = S::one() / S::cast(b);
        let mut out = vec![S::zero(); a * c];
        for i in 0..a {
            for j in 0..b {
                let row = &vx.data()[(i * b + j) * c..(i * b + j + 1) * c];
                for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *o += v * inv;
                }
            }
        }
        let out = Tensor::new(&[a, c], out);
        self.push(out, &[x], move |g, _| {
            let mut gx = vec![S::zero(); a * b * c];
            for i in 0..a {
                for j in 0..b {
                    for k in 0..c {
                        gx[(i * b + j) * c + k] = g.data()[i * c + k] * inv;
                    }
                }
            }
            vec![Some(Tensor::new(&[a, b, c], gx))]
        })
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let old = va.shape().to_vec();
        assert_eq!(numel(shape), va.numel(), "reshape {old:?} -> {shape:?}");
        let out = va.reshaped(shape);
        self.push(out, &[a], move |g, _| vec![Some(g.reshaped(&old))])
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let out = self.value(a).permute(axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(out, &[a], move |g, _| vec![Some(g.permute(&inverse))])
    }

    /// `(m, k) @ (k, n)`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.matmul(&vb);
        self.push(out, &[a, b], move |g, needs| {
            let (m, k) = (va.dim(0), va.dim(1));
            let n = vb.dim(1);
            let ga = needs[0].then(|| {
                // g (m,n) @ b^T (n,k)
                let mut d = vec![S::zero(); m * k];
                S::gemm(
                    m,
                    n,
                    k,
                    S::one(),
                    g.data(),
                    (n as isize, 1),
                    vb.data(),
                    (1, n as isize),
                    S::zero(),
                    &mut d,
                    (k as isize, 1),
                );
                Tensor::new(&[m, k], d)
            });
            let gb = needs[1].then(|| {
                // a^T (k,m) @ g (m,n)
                let mut d = vec![S::zero(); k * n];
                S::gemm(
                    k,
                    m,
                    n,
                    S::one(),
                    va.data(),
                    (1, k as isize),
                    g.data(),
                    (n as isize, 1),
                    S::zero(),
                    &mut d,
                    (n as isize, 1),
                );
                Tensor::new(&[k, n], d)
            });
            vec![ga, gb]
        })
    }

    /// `x @ w + b` over the last axis of `x`, for any leading shape.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x);
        let in_dim = *xs.last().expect("linear on scalar");
        let rows = numel(&xs) / in_dim;
        let x2 = self.reshape(x, &[rows, in_dim]);
        let mut y = self.matmul(x2, w);
        if let Some(b) = b {
            y = self.add_suffix(y, b);
        }
        let out_dim = self.shape(w)[1];
        let mut ys = xs;
        *ys.last_mut().unwrap() = out_dim;
        self.reshape(y, &ys)
    }

    /// Batched product `(b, m, k) @ (b, k, n)`, or `(b, m, k) @ (b, n, k)^T` when `trans_b`.
    pub fn bmm(&self, a: Var, b: Var, trans_b: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (bs, m, k) = (va.dim(0), va.dim(1), va.dim(2));
        assert_eq!(vb.dim(0), bs, "bmm batch mismatch");
        let n = if trans_b { vb.dim(1) } else { vb.dim(2) };
        let kb = if trans_b { vb.dim(2) } else { vb.dim(1) };
        assert_eq!(k, kb, "bmm inner mismatch");
        // strides of the (k, n) operand view
        let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![S::zero(); bs * m * n];
        for i in 0..bs {
            S::gemm(
                m,
                k,
                n,
                S::one(),
                &va.data()[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &vb.data()[i * k * n..(i + 1) * k * n],
                b_strides,
                S::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
            );
        }
        let out = Tensor::new(&[bs, m, n], out);
        let b_shape = vb.shape().to_vec();
        self.push(out, &[a, b], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut d = vec![S::zero(); bs * m * k];
                for i in 0..bs {
                    // g_i (m,n) @ B_i^T (n,k); B_i is the (k,n) view
                    let bt = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                    S::gemm(
                        m,
                        n,
                        k,
                        S::one(),
                        &g.data()[i * m * n..(i + 1) * m * n],
                        (n as isize, 1),
                        &vb.data()[i * k * n..(i + 1) * k * n],
                        bt,
                        S::zero(),
                        &mut d[i * m * k..(i + 1) * m * k],
                        (k as isize, 1),
                    );
                }
                Tensor::new(&[bs, m, k], d)
            });
            let gb = needs[1].then(|| {
                let mut d = vec![S::zero(); bs * k * n];
                for i in 0..bs {
                    let ai = &va.data()[i * m * k..(i + 1) * m * k];
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    let di = &mut d[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        // dB (n,k) = g^T (n,m) @ A (m,k)
                        S::gemm(
                            n,
                            m,
                            k,
                            S::one(),
                            gi,
                            (1, n as isize),
                            ai,
                            (k as isize, 1),
                            S::zero(),
                            di,
                            (k as isize, 1),
                        );
                    } else {
                        // dB (k,n) = A^T (k,m) @ g (m,n)
                        S::gemm(
                            k,
                            m,
                            n,
                            S::one(),
                            ai,
                            (1, k as isize),
                            gi,
                            (n as isize, 1),
                            S::zero(),
                            di,
                            (n as isize, 1),
                        );
                    }
                }
                Tensor::new(&b_shape, d)
            });
            vec![ga, gb]
        })
    }

    /// Rows of `table` selected by `idx`; gradients scatter-add back into the table.
    pub fn gather_rows(&self, table: Var, idx: &[usize]) -> Var {
        let vt = self.value(table);
        let (rows, cols) = (vt.dim(0), vt.dim(1));
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!(i < rows, "gather_rows index {i} out of range {rows}");
            out.extend_from_slice(vt.row(i));
        }
        let out = Tensor::new(&[idx.len(), cols], out);
        let idx: Rc<[usize]> = idx.into();
        self.push(out, &[table], move |g, _| {
            let mut d = vec![S::zero(); rows * cols];
            for (r, &i) in idx.iter().enumerate() {
                for (a, &v) in d[i * cols..(i + 1) * cols].iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                    *a += v;
                }
            }
            vec![Some(Tensor::new(&[rows, cols], d))]
        })
    }

    /// Forward value of `quantized`; the incoming gradient passes unchanged to
    /// `z` and, when it is tracked, to `quantized` as well.
    pub fn straight_through(&self, z: Var, quantized: Var) -> Var {
        let vq = self.value(quantized);
        assert_eq!(self.shape(z), vq.shape().to_vec(), "straight_through shape mismatch");
        let out = (*vq).clone();
        self.push(out, &[z, quantized], |g, needs| vec![Some(g.clone()), needs[1].then(|| g.clone())])
    }
}
