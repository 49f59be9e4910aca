use crate::error::SdeError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

/// Compare the tape gradient of `f` at every input coordinate against central
/// differences with step 1e-6.
fn check<F>(inputs: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&Graph<f64>, &[Var]) -> Var,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&g, &vars);
    // project onto a fixed weighting so vector outputs are scalar
    let w = weights(&g.shape(out));
    let wv = g.constant(w.clone());
    let loss = g.sum(g.mul(out, wv));
    let grads = g.backward(loss);

    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let g = Graph::no_grad();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&g, &vars);
        g.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let tol = 1e-6 * (1.0 + fd.abs().max(a.abs()));
            assert!((fd - a).abs() < tol, "input {k} coord {i}: analytic {a} vs fd {fd}");
        }
    }
}

fn weights(shape: &[usize]) -> Tensor<f64> {
    let n = crate::tensor::numel(shape);
    Tensor::new(shape, (0..n).map(|i| ((i as f64) * 0.731).sin() + 0.3).collect())
}

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

#[test]
fn elementwise_ops() {
    check(vec![rnd(&[3, 4], 1), rnd(&[3, 4], 2)], |g, v| {
        let a = g.add(v[0], v[1]);
        let b = g.mul(a, v[1]);
        let c = g.sub(b, g.square(v[0]));
        g.add_scalar(g.scale(c, 0.5), 1.0)
    });
}

#[test]
fn activations() {
    check(vec![rnd(&[10], 3)], |g, v| g.silu(v[0]));
    check(vec![rnd(&[10], 4)], |g, v| g.gelu(v[0]));
    check(vec![rnd(&[10], 5)], |g, v| g.sigmoid(v[0]));
    check(vec![rnd(&[10], 6)], |g, v| g.leaky_relu(v[0], 0.2));
}

#[test]
fn reductions_and_shapes() {
    check(vec![rnd(&[2, 3, 4], 7)], |g, v| {
        let p = g.permute(v[0], &[2, 0, 1]);
        let r = g.reshape(p, &[4, 6]);
        g.mean(g.square(r))
    });
    check(vec![rnd(&[2, 3, 4], 8)], |g, v| g.mean_axis1(v[0]));
    check(vec![rnd(&[5, 3], 9), rnd(&[3], 10)], |g, v| g.add_suffix(v[0], v[1]));
}

#[test]
fn matrix_products() {
    check(vec![rnd(&[3, 4], 11), rnd(&[4, 2], 12)], |g, v| g.matmul(v[0], v[1]));
    check(vec![rnd(&[2, 3, 4], 13), rnd(&[2, 4, 5], 14)], |g, v| g.bmm(v[0], v[1], false));
    check(vec![rnd(&[2, 3, 4], 15), rnd(&[2, 5, 4], 16)], |g, v| g.bmm(v[0], v[1], true));
    check(vec![rnd(&[2, 3, 4], 17), rnd(&[4, 2], 18), rnd(&[2], 19)], |g, v| g.linear(v[0], v[1], Some(v[2])));
}

#[test]
fn conv_and_upsample() {
    check(vec![rnd(&[2, 2, 5, 5], 20), rnd(&[3, 2, 3, 3], 21), rnd(&[3], 22)], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 2, 1)
    });
    check(vec![rnd(&[1, 2, 4, 4], 23), rnd(&[2, 2, 4, 4], 24)], |g, v| g.conv2d(v[0], v[1], None, 2, 1));
    check(vec![rnd(&[1, 2, 3, 3], 25)], |g, v| g.upsample2x(v[0]));
    check(vec![rnd(&[1, 1, 6, 5], 38), rnd(&[2, 1, 3, 3], 39)], |g, v| g.conv2d(v[0], v[1], None, 1, 2));
    check(vec![rnd(&[1, 3, 4, 4], 40)], |g, v| g.clamp(v[0], -0.5, 0.7));
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, k) = (w.dim(0), w.dim(2));
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (y * stride + ki) as isize - pad as isize;
                                let ix = (xx * stride + kj) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oc * c + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out)
}

#[test]
fn conv_matches_direct_sum() {
    let mut seed = 100;
    for &(k, stride, pad) in &[(1, 1, 0), (3, 1, 1), (3, 2, 1), (4, 2, 1), (3, 2, 0), (5, 1, 2), (2, 3, 1)] {
        for &(h, w) in &[(7, 7), (8, 6), (5, 9)] {
            seed += 1;
            let x = rnd(&[2, 3, h, w], seed);
            let wt = rnd(&[4, 3, k, k], seed + 1000);
            let g = Graph::no_grad();
            let out = g.conv2d(g.constant(x.clone()), g.constant(wt.clone()), None, stride, pad);
            let expect = naive_conv(&x, &wt, stride, pad);
            let got = g.value(out);
            assert_eq!(got.shape(), expect.shape());
            for (a, b) in got.data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12, "k{k} s{stride} p{pad} {h}x{w}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn fused_nn_ops() {
    check(vec![rnd(&[2, 3, 3], 26)], |g, v| g.softmax_last(v[0], true));
    check(vec![rnd(&[4, 5], 27)], |g, v| g.softmax_last(v[0], false));
    check(vec![rnd(&[4, 6], 28), rnd(&[6], 29), rnd(&[6], 30)], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    check(vec![rnd(&[4, 5], 31), rnd(&[4, 5], 32)], |g, v| g.cosine_rows(v[0], v[1], 1e-8));
    check(vec![rnd(&[2, 3, 2, 2], 33)], |g, v| g.channel_normalize(v[0], 1e-10));
    check(vec![rnd(&[3, 2, 2, 2], 36)], |g, v| g.spectral_normalize(v[0], 200));
    check(vec![rnd(&[4, 6], 34)], |g, v| {
        g.masked_cross_entropy(v[0], &[1, 5, 0, 2], &[true, false, true, true]).unwrap()
    });
}

#[test]
fn gather_scatters_back() {
    check(vec![rnd(&[4, 3], 35)], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3]));
}

#[test]
fn straight_through_is_identity_backward() {
    let g = Graph::<f64>::new();
    let z = g.leaf(rnd(&[3, 2], 36), true);
    let zq = g.constant(rnd(&[3, 2], 37));
    let out = g.straight_through(z, zq);
    assert_eq!(*g.value(out), *g.value(zq));
    let grads = g.backward(g.sum(out));
    assert!(grads.get(z).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(grads.get(zq).is_none());
}

#[test]
fn causal_softmax_masks_future() {
    let g = Graph::<f64>::no_grad();
    let x = g.constant(Tensor::zeros(&[1, 3, 3]));
    let y = g.value(g.softmax_last(x, true));
    assert_eq!(y.data(), &[1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
}

#[test]
fn empty_mask_is_an_error() {
    let g = Graph::<f64>::new();
    let l = g.leaf(Tensor::zeros(&[2, 3]), true);
    assert!(matches!(g.masked_cross_entropy(l, &[0, 1], &[false, false]), Err(SdeError::EmptyTarget)));
}

#[test]
fn no_grad_graph_builds_no_closures() {
    let g = Graph::<f32>::no_grad();
    let a = g.leaf(Tensor::full(&[2], 1.0), true);
    let b = g.square(a);
    assert!(!g.requires_grad(b));
}

#[test]
fn store_hash_tracks_values() {
    let mut store = ParamStore::<f32>::new();
    let id = store.add("w", Tensor::zeros(&[2]));
    let before = store.content_hash();
    store.get_mut(id).data_mut()[0] = 1.0;
    assert_ne!(before, store.content_hash());
}

#[test]
fn spectral_normalize_has_unit_top_singular_value() {
    let g = Graph::<f64>::no_grad();
    // diagonal-like matrix with known singular values 5, 2, 1
    let w = Tensor::from_vec(&[3, 4], vec![5.0, 0.0, 0.0, 0.0, 0.0, -2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let out = g.spectral_normalize(g.constant(w), 50);
    let got = g.value(out);
    assert!((got.data()[0] - 1.0).abs() < 1e-12);
    assert!((got.data()[5] + 0.4).abs() < 1e-12);
}
