//! Perceptual distance from a frozen conv trunk, and a patch discriminator
//! trained with hinge losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Bound, Graph, ParamStore, Var};
use crate::data::{batch_nchw, ImageTensor};
use crate::error::{Result, SdeError};
use crate::nn::Conv2d;
use crate::scalar::Scalar;
use crate::semantic::{ConvTrunk, FrozenNetProvider};

/// LPIPS-style distance: per-layer channel-normalised features, squared
/// distance summed over channels, averaged over positions, weighted per layer.
#[derive(Debug, Clone)]
pub struct PerceptualNet<S> {
    store: ParamStore<S>,
    trunk: ConvTrunk,
    weights: Vec<f64>,
}

impl<S: Scalar> PerceptualNet<S> {
    pub fn from_teacher(teacher: &FrozenNetProvider<S>) -> Self {
        let trunk = teacher.trunk().clone();
        let n = trunk.layers.len();
        Self { store: teacher.store().clone(), trunk, weights: vec![1.0 / n as f64; n] }
    }

    /// Seeded random trunk, for when the teacher has no convolutional trunk.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let trunk = ConvTrunk::new(&mut store, "trunk", &mut rng);
        let n = trunk.layers.len();
        Self { store, trunk, weights: vec![1.0 / n as f64; n] }
    }

    /// Rebuild around stored trunk weights (e.g. from a checkpoint).
    pub fn from_store(store: ParamStore<S>) -> Result<Self> {
        let template = Self::random(0);
        crate::tokenizer::check_layout(&template.store, &store)?;
        Ok(Self { store, ..template })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn param_hash(&self) -> String {
        self.store.content_hash()
    }

    /// Bind the frozen weights as constants.
    pub fn bind(&self, g: &Graph<S>) -> Bound {
        g.bind(&self.store, false)
    }

    pub fn trunk_features(&self, g: &Graph<S>, p: &Bound, x: Var) -> Vec<Var> {
        self.trunk.features(g, p, x)
    }

    pub fn loss_on_graph(&self, g: &Graph<S>, p: &Bound, x: Var, y: Var) -> Var {
        let fx = self.trunk.features(g, p, x);
        let fy = self.trunk.features(g, p, y);
        let mut total: Option<Var> = None;
        for ((a, b), &w) in fx.into_iter().zip(fy).zip(&self.weights) {
            let channels = g.shape(a)[1];
            let d = g.sub(g.channel_normalize(a, 1e-10), g.channel_normalize(b, 1e-10));
            let term = g.scale(g.mean(g.square(d)), S::cast(w * channels as f64));
            total = Some(match total {
                Some(t) => g.add(t, term),
                None => term,
            });
        }
        total.expect("perceptual trunk has layers")
    }

    pub fn loss(&self, x: &ImageTensor<S>, y: &ImageTensor<S>) -> Result<S> {
        if (x.height(), x.width()) != (y.height(), y.width()) {
            return Err(SdeError::contract("perceptual loss needs images of equal shape"));
        }
        let g = Graph::no_grad();
        let p = self.bind(&g);
        let a = g.constant(batch_nchw(&[x])?);
        let b = g.constant(batch_nchw(&[y])?);
        Ok(g.item(self.loss_on_graph(&g, &p, a, b)))
    }
}

/// Stride-2 4×4 convolutions with LeakyReLU, then a 3×3 conv to one logit per patch.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator<S> {
    pub store: ParamStore<S>,
    convs: Vec<Conv2d>,
    out: Conv2d,
}

/// Power iterations per forward pass for the discriminator's spectral norm.
const SPECTRAL_ITERS: usize = 8;

impl<S: Scalar> PatchDiscriminator<S> {
    pub fn new(base_channels: usize, layers: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::with_capacity(layers);
        let mut in_ch = 3;
        for i in 0..layers {
            let out = base_channels << i;
            convs.push(Conv2d::new(&mut store, &format!("conv{i}"), in_ch, out, 4, 2, 1, &mut rng));
            in_ch = out;
        }
        let out = Conv2d::new(&mut store, "out", in_ch, 1, 3, 1, 1, &mut rng);
        Self { store, convs, out }
    }

    pub fn from_store(base_channels: usize, layers: usize, store: ParamStore<S>) -> Result<Self> {
        let template = Self::new(base_channels, layers, 0);
        crate::tokenizer::check_layout(&template.store, &store)?;
        Ok(Self { store, ..template })
    }

    pub fn downsample(&self) -> usize {
        1 << self.convs.len()
    }

    /// Patch logits. Every conv weight is spectrally normalized, which keeps the
    /// logits and the generator gradient bounded.
    pub fn forward(&self, g: &Graph<S>, p: &Bound, x: Var) -> Var {
        let slope = S::cast(0.2);
        let conv = |c: &Conv2d, h: Var| {
            g.conv2d(h, g.spectral_normalize(p[c.weight], SPECTRAL_ITERS), Some(p[c.bias]), c.stride, c.pad)
        };
        let mut h = x;
        for c in &self.convs {
            h = g.leaky_relu(conv(c, h), slope);
        }
        conv(&self.out, h)
    }
}

/// `mean relu(1 - D(real)) + mean relu(1 + D(fake))`.
pub fn hinge_disc_loss<S: Scalar>(g: &Graph<S>, real_logits: Var, fake_logits: Var) -> Var {
    let one = S::one();
    let r = g.mean(g.relu(g.add_scalar(g.neg(real_logits), one)));
    let f = g.mean(g.relu(g.add_scalar(fake_logits, one)));
    g.add(r, f)
}

/// `-mean D(fake)`.
pub fn hinge_gen_loss<S: Scalar>(g: &Graph<S>, fake_logits: Var) -> Var {
    g.neg(g.mean(fake_logits))
}

/// Both hinge losses. The discriminator term sees `fake` detached, so it never
/// sends gradient to the generator.
pub fn gan_losses<S: Scalar>(
    disc: &PatchDiscriminator<S>,
    g: &Graph<S>,
    p: &Bound,
    real: Var,
    fake: Var,
) -> Result<(Var, Var)> {
    if g.shape(real) != g.shape(fake) {
        return Err(SdeError::contract("real and fake batches differ in shape"));
    }
    let d_real = disc.forward(g, p, real);
    let d_fake_detached = disc.forward(g, p, g.detach(fake));
    let d_fake = disc.forward(g, p, fake);
    Ok((hinge_disc_loss(g, d_real, d_fake_detached), hinge_gen_loss(g, d_fake)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn hinge_closed_forms() {
        let g = Graph::<f64>::new();
        let real = g.constant(Tensor::full(&[2, 1, 2, 2], 1.0));
        let fake = g.constant(Tensor::full(&[2, 1, 2, 2], -1.0));
        assert_eq!(g.item(hinge_disc_loss(&g, real, fake)), 0.0);
        let zero = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert_eq!(g.item(hinge_disc_loss(&g, zero, zero)), 2.0);
        assert_eq!(g.item(hinge_gen_loss(&g, zero)), 0.0);
    }

    #[test]
    fn perceptual_identity_and_symmetry() {
        let net = PerceptualNet::<f64>::random(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = ImageTensor::random(16, 16, &mut rng);
        let y = ImageTensor::random(16, 16, &mut rng);
        assert_eq!(net.loss(&x, &x).unwrap(), 0.0);
        assert_eq!(net.loss(&x, &y).unwrap(), net.loss(&y, &x).unwrap());
        assert!(net.loss(&x, &y).unwrap() > 0.0);
        assert!(net.loss(&x, &ImageTensor::random(8, 8, &mut rng)).is_err());
    }

    #[test]
    fn patch_map_shape() {
        let d = PatchDiscriminator::<f32>::new(8, 3, 0);
        let g = Graph::no_grad();
        let p = g.bind(&d.store, false);
        let x = g.constant(Tensor::zeros(&[2, 3, 16, 16]));
        assert_eq!(g.shape(d.forward(&g, &p, x)), vec![2, 1, 2, 2]);
    }

    #[test]
    fn gen_gradient_is_nonzero_and_disc_term_is_detached() {
        let d = PatchDiscriminator::<f64>::new(4, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Graph::new();
        let p = g.bind(&d.store, false);
        let real = g.constant(Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng));
        let fake = g.leaf(Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng), true);
        let (l_disc, l_gen) = gan_losses(&d, &g, &p, real, fake).unwrap();
        let gg = g.backward(l_gen);
        assert!(gg.get(fake).unwrap().sq_norm() > 0.0);
        let gd = g.backward(l_disc);
        assert!(gd.get(fake).is_none_or(|t| t.sq_norm() == 0.0));
    }
}
