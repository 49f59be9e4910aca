//! Parameterised layers built on the autograd graph.

use rand::Rng;

use crate::autograd::{Bound, Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn fan_in_uniform<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(&[in_dim, out_dim], in_dim, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self { weight, bias, in_dim, out_dim }
    }

    /// Weight drawn from N(0, std²).
    pub fn normal<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[in_dim, out_dim], std, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<S>, p: &Bound, x: Var) -> Var {
        g.linear(x, p[self.weight], self.bias.map(|b| p[b]))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self { weight, bias, stride, pad }
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<S>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p[self.weight], Some(p[self.bias]), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], S::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<S>, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p[self.gamma], p[self.beta], 1e-5)
    }
}

/// Multi-head self-attention over `(batch, tokens, width)`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub causal: bool,
}

impl SelfAttention {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        width: usize,
        heads: usize,
        causal: bool,
        rng: &mut R,
    ) -> Self {
        assert_eq!(width % heads, 0, "width must divide into heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, true, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, true, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, true, rng),
            proj: Linear::new(store, &format!("{name}.proj"), width, width, true, rng),
            heads,
            causal,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<S>, p: &Bound, x: Var) -> Var {
        let s = g.shape(x);
        let (b, t, w) = (s[0], s[1], s[2]);
        let hd = w / self.heads;
        let split = |v: Var| {
            let v = g.reshape(v, &[b, t, self.heads, hd]);
            let v = g.permute(v, &[0, 2, 1, 3]);
            g.reshape(v, &[b * self.heads, t, hd])
        };
        let q = split(self.q.forward(g, p, x));
        let k = split(self.k.forward(g, p, x));
        let v = split(self.v.forward(g, p, x));
        let scores = g.scale(g.bmm(q, k, true), S::one() / S::cast(hd).sqrt());
        let attn = g.softmax_last(scores, self.causal);
        let out = g.bmm(attn, v, false);
        let out = g.reshape(out, &[b, self.heads, t, hd]);
        let out = g.permute(out, &[0, 2, 1, 3]);
        let out = g.reshape(out, &[b, t, w]);
        self.proj.forward(g, p, out)
    }
}

/// Pre-norm transformer block with a GELU MLP.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        causal: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            attn: SelfAttention::new(store, &format!("{name}.attn"), width, heads, causal, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            fc1: Linear::new(store, &format!("{name}.fc1"), width, width * mlp_ratio, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), width * mlp_ratio, width, true, rng),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<S>, p: &Bound, x: Var) -> Var {
        let h = self.attn.forward(g, p, self.ln1.forward(g, p, x));
        let x = g.add(x, h);
        let h = self.fc2.forward(g, p, g.gelu(self.fc1.forward(g, p, self.ln2.forward(g, p, x))));
        g.add(x, h)
    }
}
