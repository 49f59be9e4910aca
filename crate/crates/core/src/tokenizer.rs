//! The semantic discrete encoding tokenizer: conv encoder, additive fusion of
//! teacher features, vector quantisation, a transformer semantic decoder
//! trained with cosine distillation, and a conv image decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{hinge_disc_loss, hinge_gen_loss, PatchDiscriminator, PerceptualNet};
use crate::autograd::{Bound, Graph, ParamId, ParamStore, Var};
use crate::data::{batch_nchw, ImageTensor, Sample};
use crate::error::{Result, SdeError};
use crate::nn::{Conv2d, LayerNorm, Linear, TransformerBlock};
use crate::optim::{AdamW, CosineSchedule, OptimizerConfig};
use crate::scalar::Scalar;
use crate::semantic::{stack_targets, SemanticProvider, SemanticTarget};
use crate::tensor::Tensor;
use crate::vq::{
    code_histogram, nearest_rows, quantize_on_tape, restart_dead_codes, CodeGrid, Codebook, FeatureGrid, QuantAnchor,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SdeConfig {
    /// Codebook entries K.
    pub codebook_size: usize,
    /// Code vector dimension d.
    pub code_dim: usize,
    /// Encoder downsample factor f (a power of two).
    pub downsample: usize,
    pub beta: f64,
    pub w_sem: f64,
    pub lambda_g: f64,
    pub disc_start: usize,
    pub d_sem: usize,
    pub image_size: usize,
    /// Encoder output width, shared with the fused teacher projection.
    pub d_enc: usize,
    /// Add projected teacher features before quantisation.
    pub fusion: bool,
    pub enc_base: usize,
    pub dec_base: usize,
    pub semdec_width: usize,
    pub semdec_layers: usize,
    pub semdec_heads: usize,
    pub disc_channels: usize,
    pub disc_layers: usize,
    pub restart_dead_codes: bool,
    pub restart_every: usize,
}

impl Default for SdeConfig {
    fn default() -> Self {
        Self {
            codebook_size: 512,
            code_dim: 8,
            downsample: 8,
            beta: 0.25,
            w_sem: 1.0,
            lambda_g: 0.5,
            disc_start: 400,
            d_sem: 64,
            image_size: 64,
            d_enc: 64,
            fusion: true,
            enc_base: 32,
            dec_base: 16,
            semdec_width: 128,
            semdec_layers: 2,
            semdec_heads: 4,
            disc_channels: 16,
            disc_layers: 3,
            restart_dead_codes: false,
            restart_every: 100,
        }
    }
}

impl SdeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("codebook_size", self.codebook_size),
            ("code_dim", self.code_dim),
            ("downsample", self.downsample),
            ("d_sem", self.d_sem),
            ("image_size", self.image_size),
            ("d_enc", self.d_enc),
            ("enc_base", self.enc_base),
            ("dec_base", self.dec_base),
            ("semdec_width", self.semdec_width),
            ("semdec_heads", self.semdec_heads),
            ("disc_channels", self.disc_channels),
            ("disc_layers", self.disc_layers),
            ("restart_every", self.restart_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(SdeError::config(format!("tokenizer.{name} must be positive")));
        }
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return Err(SdeError::config("tokenizer.downsample must be a power of two ≥ 2"));
        }
        if !self.image_size.is_multiple_of(self.downsample) {
            return Err(SdeError::config("tokenizer.image_size must be divisible by downsample"));
        }
        if !self.image_size.is_multiple_of(1 << self.disc_layers) {
            return Err(SdeError::config("tokenizer.image_size too small for the discriminator"));
        }
        if !self.semdec_width.is_multiple_of(self.semdec_heads) {
            return Err(SdeError::config("tokenizer.semdec_width must divide into semdec_heads"));
        }
        for (name, v) in [("beta", self.beta), ("w_sem", self.w_sem), ("lambda_g", self.lambda_g)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SdeError::config(format!("tokenizer.{name} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }

    /// Code grid side length.
    pub fn grid(&self) -> usize {
        self.image_size / self.downsample
    }

    pub fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    /// The ablation baseline: no semantic loss and no fusion.
    pub fn plain_vq(&self) -> Self {
        Self { w_sem: 0.0, fusion: false, ..self.clone() }
    }
}

/// Loss terms of one forward pass.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossReport {
    pub l_sem: f64,
    pub l_l2: f64,
    pub l_perceptual: f64,
    pub l_gen: f64,
    pub l_vq: f64,
    pub l_total: f64,
    pub lambda_g: f64,
    pub w_sem: f64,
    pub codebook_loss: f64,
    pub commitment_loss: f64,
}

impl LossReport {
    /// `l_total` minus its recomposition from the other terms.
    pub fn identity_residual(&self) -> f64 {
        self.l_total
            - (self.w_sem * self.l_sem + self.l_l2 + self.l_perceptual + self.lambda_g * self.l_gen + self.l_vq)
    }
}

#[derive(Debug, Clone)]
pub struct SemanticDecoder {
    pub input: Linear,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln: LayerNorm,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct ImageDecoder {
    pub input: Conv2d,
    pub stages: Vec<Conv2d>,
    pub output: Conv2d,
}

/// Tokenizer parameters (everything that trains from the total loss).
#[derive(Debug, Clone)]
pub struct SdeModel<S> {
    pub cfg: SdeConfig,
    pub store: ParamStore<S>,
    pub encoder: Vec<Conv2d>,
    pub psem: Linear,
    pub to_code: Linear,
    pub codebook: ParamId,
    pub semdec: SemanticDecoder,
    pub decoder: ImageDecoder,
}

/// Images and matching teacher targets for one step.
#[derive(Debug, Clone)]
pub struct Batch<S> {
    /// `(B, 3, H, W)`.
    pub images: Tensor<S>,
    /// `(B*h*w, d_sem)`.
    pub targets: Tensor<S>,
}

impl<S: Scalar> Batch<S> {
    pub fn new(images: &[&ImageTensor<S>], targets: &[&SemanticTarget<S>]) -> Result<Self> {
        if images.is_empty() || images.len() != targets.len() {
            return Err(SdeError::invalid("batch needs one target per image and at least one image"));
        }
        Ok(Self { images: batch_nchw(images)?, targets: stack_targets(targets)? })
    }

    pub fn from_samples(samples: &[&Sample<S>], provider: &dyn SemanticProvider<S>) -> Result<Self> {
        let targets = samples.iter().map(|s| provider.provide(&s.image, (*s).into())).collect::<Result<Vec<_>>>()?;
        let images: Vec<&ImageTensor<S>> = samples.iter().map(|s| &s.image).collect();
        Self::new(&images, &targets.iter().collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.images.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Frozen networks the loss needs besides the tokenizer itself.
pub struct LossContext<'a, S> {
    pub disc: &'a PatchDiscriminator<S>,
    pub perceptual: &'a PerceptualNet<S>,
}

/// Loss terms as tape variables, for per-term gradients.
#[derive(Debug, Clone, Copy)]
pub struct TermVars {
    pub l_sem: Var,
    pub l_l2: Var,
    pub l_perceptual: Var,
    pub l_gen: Option<Var>,
    pub l_vq: Var,
}

/// Everything recorded by one forward pass.
pub struct Forward {
    pub params: Bound,
    pub total: Var,
    pub terms: TermVars,
    pub recon: Var,
    pub codes: Vec<usize>,
    pub z: Var,
}

/// One optional gradient per parameter, in store order.
pub type ParamGrads<S> = Vec<Option<Tensor<S>>>;

/// `mean(1 - cos)` over rows, with cosine clamped to `[-1, 1]`.
pub fn semantic_loss_rows<S: Scalar>(g: &Graph<S>, decoded: Var, target: Var) -> Var {
    let cos = g.clamp(g.cosine_rows(decoded, target, 1e-8), -S::one(), S::one());
    g.add_scalar(g.neg(g.mean(cos)), S::one())
}

impl<S: Scalar> SdeModel<S> {
    pub fn new(cfg: &SdeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let n = cfg.stages();
        let mut encoder = Vec::with_capacity(n);
        let mut ch = 3;
        for i in 0..n {
            let out = if i + 1 == n { cfg.d_enc } else { cfg.enc_base << i };
            encoder.push(Conv2d::new(&mut store, &format!("enc.conv{i}"), ch, out, 3, 2, 1, &mut rng));
            ch = out;
        }
        let psem = Linear::new(&mut store, "psem", cfg.d_sem, cfg.d_enc, true, &mut rng);
        let to_code = Linear::new(&mut store, "to_code", cfg.d_enc, cfg.code_dim, true, &mut rng);
        let codebook =
            store.add("codebook", Codebook::init_uniform(cfg.codebook_size, cfg.code_dim, &mut rng).into_entries());

        let w = cfg.semdec_width;
        let grid = cfg.grid();
        let semdec = SemanticDecoder {
            input: Linear::new(&mut store, "semdec.input", cfg.code_dim, w, true, &mut rng),
            pos: store.add("semdec.pos", Tensor::randn(&[grid * grid, w], 0.02, &mut rng)),
            blocks: (0..cfg.semdec_layers)
                .map(|i| {
                    TransformerBlock::new(
                        &mut store,
                        &format!("semdec.block{i}"),
                        w,
                        cfg.semdec_heads,
                        4,
                        false,
                        &mut rng,
                    )
                })
                .collect(),
            ln: LayerNorm::new(&mut store, "semdec.ln", w),
            head: Linear::new(&mut store, "semdec.head", w, cfg.d_sem, true, &mut rng),
        };

        let input = Conv2d::new(&mut store, "dec.input", cfg.code_dim, cfg.d_enc, 1, 1, 0, &mut rng);
        let mut stages = Vec::with_capacity(n);
        let mut ch = cfg.d_enc;
        for i in 0..n {
            let out = cfg.dec_base << (n - 1 - i);
            stages.push(Conv2d::new(&mut store, &format!("dec.conv{i}"), ch, out, 3, 1, 1, &mut rng));
            ch = out;
        }
        let output = Conv2d::new(&mut store, "dec.output", ch, 3, 3, 1, 1, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            psem,
            to_code,
            codebook,
            semdec,
            decoder: ImageDecoder { input, stages, output },
        })
    }

    /// Rebuild around stored parameters; names and shapes must match the config.
    pub fn from_store(cfg: &SdeConfig, store: ParamStore<S>) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        check_layout(&model.store, &store)?;
        model.store = store;
        Ok(model)
    }

    pub fn codebook(&self) -> Codebook<S> {
        Codebook::new(self.store.get(self.codebook).clone()).expect("codebook parameter stays K×d")
    }

    /// Encoder features as `(B*h*w, d_enc)` rows.
    pub fn encode_rows(&self, g: &Graph<S>, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for (i, conv) in self.encoder.iter().enumerate() {
            h = conv.forward(g, p, h);
            if i + 1 < self.encoder.len() {
                h = g.silu(h);
            }
        }
        let s = g.shape(h);
        let rows = g.permute(h, &[0, 2, 3, 1]);
        g.reshape(rows, &[s[0] * s[2] * s[3], s[1]])
    }

    /// `to_code(Enc(x) + P_sem(T))`, or `to_code(Enc(x))` with fusion off.
    pub fn fused_rows(&self, g: &Graph<S>, p: &Bound, x: Var, targets: Var) -> Result<Var> {
        let feats = self.encode_rows(g, p, x);
        let (m, tm) = (g.shape(feats)[0], g.shape(targets));
        if tm != [m, self.cfg.d_sem] {
            return Err(SdeError::contract(format!(
                "teacher grid {tm:?} does not match encoder grid of {m} positions × d_sem {}",
                self.cfg.d_sem
            )));
        }
        let fused = if self.cfg.fusion { g.add(feats, self.psem.forward(g, p, targets)) } else { feats };
        Ok(self.to_code.forward(g, p, fused))
    }

    /// Image decoder over `(B*h*w, d)` rows, giving `(B, 3, H, W)` in (0, 1).
    pub fn decode_rows(&self, g: &Graph<S>, p: &Bound, zq: Var, batch: usize) -> Var {
        let grid = self.cfg.grid();
        let x = g.reshape(zq, &[batch, grid, grid, self.cfg.code_dim]);
        let x = g.permute(x, &[0, 3, 1, 2]);
        let mut h = g.silu(self.decoder.input.forward(g, p, x));
        for conv in &self.decoder.stages {
            h = g.silu(conv.forward(g, p, g.upsample2x(h)));
        }
        g.sigmoid(self.decoder.output.forward(g, p, h))
    }

    /// Semantic decoder over `(B*h*w, d)` rows, giving `(B*h*w, d_sem)`.
    pub fn decode_semantic(&self, g: &Graph<S>, p: &Bound, zq: Var, batch: usize) -> Var {
        let n = self.cfg.grid() * self.cfg.grid();
        let h = self.semdec.input.forward(g, p, zq);
        let h = g.reshape(h, &[batch, n, self.cfg.semdec_width]);
        let mut h = g.add_suffix(h, p[self.semdec.pos]);
        for block in &self.semdec.blocks {
            h = block.forward(g, p, h);
        }
        let h = self.semdec.head.forward(g, p, self.semdec.ln.forward(g, p, h));
        g.reshape(h, &[batch * n, self.cfg.d_sem])
    }

    /// Full loss on a graph. With `anchor`, the quantiser uses the frozen
    /// codes and stop-gradient values it holds (see [`quantize_on_tape`]).
    pub fn forward(
        &self,
        g: &Graph<S>,
        trainable: bool,
        batch: &Batch<S>,
        ctx: &LossContext<'_, S>,
        step: usize,
        anchor: Option<&QuantAnchor<S>>,
    ) -> Result<(Forward, LossReport, QuantAnchor<S>)> {
        let cfg = &self.cfg;
        let p = g.bind(&self.store, trainable);
        let b = batch.len();
        let x = g.constant(batch.images.clone());
        let t = g.constant(batch.targets.clone());
        let z = self.fused_rows(g, &p, x, t)?;
        let q = quantize_on_tape(g, z, p[self.codebook], anchor)?;

        let recon = self.decode_rows(g, &p, q.image_input, b);
        let l_l2 = g.mean(g.square(g.sub(recon, x)));
        let pp = ctx.perceptual.bind(g);
        let l_p = ctx.perceptual.loss_on_graph(g, &pp, x, recon);

        let decoded = self.decode_semantic(g, &p, q.semantic_input, b);
        let l_sem = semantic_loss_rows(g, decoded, t);

        let beta = S::cast(cfg.beta);
        let l_vq = g.add(q.codebook_loss, g.scale(q.commitment_loss, beta));

        let gan_on = step >= cfg.disc_start;
        let lambda_g = if gan_on { cfg.lambda_g } else { 0.0 };
        let l_gen = if gan_on {
            let pd = g.bind(&ctx.disc.store, false);
            Some(hinge_gen_loss(g, ctx.disc.forward(g, &pd, recon)))
        } else {
            None
        };

        let mut total = g.add(g.scale(l_sem, S::cast(cfg.w_sem)), g.add(l_l2, l_p));
        if let Some(l_gen) = l_gen {
            total = g.add(total, g.scale(l_gen, S::cast(lambda_g)));
        }
        let total = g.add(total, l_vq);

        let val = |v: Var| g.item(v).f64();
        let report = LossReport {
            l_sem: val(l_sem),
            l_l2: val(l_l2),
            l_perceptual: val(l_p),
            l_gen: l_gen.map(val).unwrap_or(0.0),
            l_vq: val(l_vq),
            l_total: val(total),
            lambda_g,
            w_sem: cfg.w_sem,
            codebook_loss: val(q.codebook_loss),
            commitment_loss: val(q.commitment_loss),
        };
        for (name, v) in [
            ("l_sem", report.l_sem),
            ("l_l2", report.l_l2),
            ("l_perceptual", report.l_perceptual),
            ("l_gen", report.l_gen),
            ("l_vq", report.l_vq),
            ("l_total", report.l_total),
        ] {
            if !v.is_finite() {
                return Err(SdeError::divergence(name));
            }
        }
        let terms = TermVars { l_sem, l_l2, l_perceptual: l_p, l_gen, l_vq };
        Ok((Forward { params: p, total, terms, recon, codes: q.codes, z }, report, q.anchor))
    }

    /// Loss report without recording gradients.
    pub fn total_loss(&self, batch: &Batch<S>, ctx: &LossContext<'_, S>, step: usize) -> Result<LossReport> {
        let g = Graph::no_grad();
        Ok(self.forward(&g, false, batch, ctx, step, None)?.1)
    }

    /// Loss, parameter gradients and the quantiser anchor of this pass.
    pub fn loss_and_grads(
        &self,
        batch: &Batch<S>,
        ctx: &LossContext<'_, S>,
        step: usize,
        anchor: Option<&QuantAnchor<S>>,
    ) -> Result<(LossReport, ParamGrads<S>, QuantAnchor<S>)> {
        let g = Graph::new();
        let (fwd, report, anchor) = self.forward(&g, true, batch, ctx, step, anchor)?;
        let grads = g.backward(fwd.total).for_params(&fwd.params);
        Ok((report, grads, anchor))
    }

    fn check_target(&self, target: &SemanticTarget<S>) -> Result<()> {
        let grid = self.cfg.grid();
        if (target.h, target.w) != (grid, grid) || target.d_sem != self.cfg.d_sem {
            return Err(SdeError::contract(format!(
                "target {}×{}×{} does not match tokenizer grid {grid}×{grid}×{}",
                target.h, target.w, target.d_sem, self.cfg.d_sem
            )));
        }
        Ok(())
    }

    fn check_image(&self, image: &ImageTensor<S>) -> Result<()> {
        let s = self.cfg.image_size;
        if (image.height(), image.width()) != (s, s) {
            return Err(SdeError::contract(format!(
                "image {}×{} does not match configured size {s}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Pre-quantisation features `z'` for each image.
    pub fn encode_fused_batch(
        &self,
        images: &[&ImageTensor<S>],
        targets: &[&SemanticTarget<S>],
    ) -> Result<Vec<FeatureGrid<S>>> {
        for (img, t) in images.iter().zip(targets) {
            self.check_image(img)?;
            self.check_target(t)?;
        }
        let batch = Batch::new(images, targets)?;
        let g = Graph::no_grad();
        let p = g.bind(&self.store, false);
        let z = self.fused_rows(&g, &p, g.constant(batch.images), g.constant(batch.targets))?;
        let z = g.value(z);
        let grid = self.cfg.grid();
        let per = grid * grid * self.cfg.code_dim;
        z.data().chunks(per).map(|c| FeatureGrid::new(grid, grid, self.cfg.code_dim, c.to_vec())).collect()
    }

    pub fn encode_fused(&self, image: &ImageTensor<S>, target: &SemanticTarget<S>) -> Result<FeatureGrid<S>> {
        Ok(self.encode_fused_batch(&[image], &[target])?.remove(0))
    }

    pub fn tokenize_batch(&self, images: &[&ImageTensor<S>], targets: &[&SemanticTarget<S>]) -> Result<Vec<CodeGrid>> {
        let cb = self.codebook();
        let grid = self.cfg.grid();
        self.encode_fused_batch(images, targets)?
            .into_iter()
            .map(|z| {
                if !z.is_finite() {
                    return Err(SdeError::invalid("encoder produced non-finite features"));
                }
                let codes = nearest_rows(&z.values, &cb).into_iter().map(|c| c as u32).collect();
                CodeGrid::new(grid, grid, codes)
            })
            .collect()
    }

    pub fn tokenize(&self, image: &ImageTensor<S>, target: &SemanticTarget<S>) -> Result<CodeGrid> {
        Ok(self.tokenize_batch(&[image], &[target])?.remove(0))
    }

    /// Codebook rows of a code grid, `(h*w, d)`.
    pub fn lookup(&self, codes: &CodeGrid) -> Result<Tensor<S>> {
        codes.check_range(self.cfg.codebook_size)?;
        let cb = self.store.get(self.codebook);
        let mut data = Vec::with_capacity(codes.len() * self.cfg.code_dim);
        for &c in &codes.codes {
            data.extend_from_slice(cb.row(c as usize));
        }
        Tensor::from_vec(&[codes.len(), self.cfg.code_dim], data)
    }

    pub fn reconstruct_batch(&self, codes: &[&CodeGrid]) -> Result<Vec<ImageTensor<S>>> {
        let grid = self.cfg.grid();
        let mut rows = Vec::new();
        for c in codes {
            if (c.h, c.w) != (grid, grid) {
                return Err(SdeError::contract(format!("code grid {}×{} is not {grid}×{grid}", c.h, c.w)));
            }
            rows.extend(self.lookup(c)?.into_data());
        }
        if codes.is_empty() {
            return Ok(Vec::new());
        }
        let g = Graph::no_grad();
        let p = g.bind(&self.store, false);
        let zq = g.constant(Tensor::from_vec(&[codes.len() * grid * grid, self.cfg.code_dim], rows)?);
        let out = g.value(self.decode_rows(&g, &p, zq, codes.len()));
        let s = self.cfg.image_size;
        out.data().chunks(3 * s * s).map(|chw| ImageTensor::from_chw_clamped(s, s, chw)).collect()
    }

    pub fn reconstruct(&self, codes: &CodeGrid) -> Result<ImageTensor<S>> {
        Ok(self.reconstruct_batch(&[codes])?.remove(0))
    }

    /// `mean(1 - cos(Dec_s(zq), T))` for one quantised grid.
    pub fn semantic_loss(&self, zq: &FeatureGrid<S>, target: &SemanticTarget<S>) -> Result<S> {
        self.check_target(target)?;
        let grid = self.cfg.grid();
        if (zq.h, zq.w, zq.d) != (grid, grid, self.cfg.code_dim) {
            return Err(SdeError::contract("quantised grid does not match the tokenizer"));
        }
        let g = Graph::no_grad();
        let p = g.bind(&self.store, false);
        let decoded = self.decode_semantic(&g, &p, g.constant(zq.to_rows()), 1);
        Ok(g.item(semantic_loss_rows(&g, decoded, g.constant(target.to_rows()))))
    }
}

pub(crate) fn check_layout<S: Scalar>(template: &ParamStore<S>, store: &ParamStore<S>) -> Result<()> {
    if template.len() != store.len() {
        return Err(SdeError::format(format!("expected {} parameters, archive holds {}", template.len(), store.len())));
    }
    for ((a, ta), (b, tb)) in template.iter().zip(store.iter()) {
        if a != b || ta.shape() != tb.shape() {
            return Err(SdeError::format(format!(
                "parameter {b} {:?} does not match expected {a} {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
    }
    Ok(())
}

/// Tokenizer, discriminator and their optimiser states.
pub struct Trainer<S> {
    pub model: SdeModel<S>,
    pub disc: PatchDiscriminator<S>,
    pub perceptual: PerceptualNet<S>,
    pub opt: AdamW<S>,
    pub disc_opt: AdamW<S>,
    pub schedule: CosineSchedule,
    pub step: usize,
    code_counts: Vec<u64>,
    seed: u64,
}

/// Outcome of one training step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub losses: LossReport,
    pub l_disc: Option<f64>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: SdeModel<S>, perceptual: PerceptualNet<S>, opt_cfg: &OptimizerConfig, seed: u64) -> Result<Self> {
        opt_cfg.validate()?;
        let disc = PatchDiscriminator::new(model.cfg.disc_channels, model.cfg.disc_layers, seed ^ 0xD15C);
        let opt = AdamW::new(opt_cfg, &model.store);
        let disc_opt = AdamW::new(opt_cfg, &disc.store);
        let code_counts = vec![0; model.cfg.codebook_size];
        Ok(Self { model, disc, perceptual, opt, disc_opt, schedule: opt_cfg.schedule(), step: 0, code_counts, seed })
    }

    pub fn context(&self) -> LossContext<'_, S> {
        LossContext { disc: &self.disc, perceptual: &self.perceptual }
    }

    /// One tokenizer update from the total loss, then (once the adversarial
    /// phase has started) one discriminator update against the same
    /// reconstructions.
    pub fn train_step(&mut self, batch: &Batch<S>) -> Result<StepReport> {
        let step = self.step;
        let lr = self.schedule.lr_at(step);
        let g = Graph::new();
        let ctx = LossContext { disc: &self.disc, perceptual: &self.perceptual };
        let (fwd, losses, _) = self.model.forward(&g, true, batch, &ctx, step, None)?;
        let grads = g.backward(fwd.total).for_params(&fwd.params);
        let fake = (*g.value(fwd.recon)).clone();
        let z = (*g.value(fwd.z)).clone();
        for &c in &fwd.codes {
            self.code_counts[c] += 1;
        }
        drop(g);
        self.opt.update(&mut self.model.store, &grads, lr)?;

        let l_disc = if step >= self.model.cfg.disc_start {
            let g = Graph::new();
            let pd = g.bind(&self.disc.store, true);
            let real = self.disc.forward(&g, &pd, g.constant(batch.images.clone()));
            let fake = self.disc.forward(&g, &pd, g.constant(fake));
            let loss = hinge_disc_loss(&g, real, fake);
            let value = g.item(loss).f64();
            if !value.is_finite() {
                return Err(SdeError::divergence("l_disc"));
            }
            let grads = g.backward(loss).for_params(&pd);
            self.disc_opt.update(&mut self.disc.store, &grads, lr)?;
            Some(value)
        } else {
            None
        };

        if self.model.cfg.restart_dead_codes && (step + 1).is_multiple_of(self.model.cfg.restart_every) {
            let id = self.model.codebook;
            let counts = std::mem::replace(&mut self.code_counts, vec![0; self.model.cfg.codebook_size]);
            // seeded per step so a resumed run restarts the same codes
            let mut rng =
                ChaCha8Rng::seed_from_u64(self.seed ^ 0x5EED ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            restart_dead_codes(self.model.store.get_mut(id), &counts, &z, &mut rng);
        }
        if !self.model.store.all_finite() {
            return Err(SdeError::divergence("tokenizer parameters"));
        }
        self.step += 1;
        Ok(StepReport { step, lr, losses, l_disc })
    }

    /// Usage histogram since the last restart window began.
    pub fn code_counts(&self) -> &[u64] {
        &self.code_counts
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Restore the usage window of a resumed run.
    pub fn set_code_counts(&mut self, counts: Vec<u64>) -> Result<()> {
        if counts.len() != self.model.cfg.codebook_size {
            return Err(SdeError::contract("code count length differs from the codebook size"));
        }
        self.code_counts = counts;
        Ok(())
    }
}

/// Histogram of codes over many grids.
pub fn grid_histogram(grids: &[CodeGrid], size: usize) -> Result<Vec<u64>> {
    code_histogram(grids.iter().flat_map(|g| g.codes.iter().copied()), size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ToyDataset;
    use crate::semantic::ClassEmbeddingProvider;

    pub(crate) fn tiny_config() -> SdeConfig {
        SdeConfig {
            codebook_size: 8,
            code_dim: 4,
            downsample: 8,
            d_sem: 6,
            image_size: 16,
            d_enc: 8,
            enc_base: 4,
            dec_base: 4,
            semdec_width: 8,
            semdec_layers: 1,
            semdec_heads: 2,
            disc_channels: 4,
            disc_layers: 2,
            disc_start: 0,
            ..Default::default()
        }
    }

    #[test]
    fn shapes_and_grid() {
        let cfg = tiny_config();
        let model = SdeModel::<f32>::new(&cfg, 0).unwrap();
        let provider = ClassEmbeddingProvider::new(10, cfg.d_sem, (2, 2), 1);
        let s: Sample<f32> = ToyDataset::new(16, 0).sample(0);
        let t = provider.provide(&s.image, (&s).into()).unwrap();
        let codes = model.tokenize(&s.image, &t).unwrap();
        assert_eq!((codes.h, codes.w), (2, 2));
        let img = model.reconstruct(&codes).unwrap();
        assert_eq!((img.height(), img.width()), (16, 16));
        let bad = CodeGrid::new(2, 2, vec![0, 1, 2, 8]).unwrap();
        assert!(matches!(model.reconstruct(&bad), Err(SdeError::InvalidInput(_))));
        let wrong = ClassEmbeddingProvider::new(10, cfg.d_sem, (3, 3), 1).provide(&s.image, (&s).into()).unwrap();
        assert!(matches!(model.tokenize(&s.image, &wrong), Err(SdeError::Contract(_))));
    }

    #[test]
    fn config_validation() {
        assert!(SdeConfig::default().validate().is_ok());
        assert!(SdeConfig { downsample: 6, ..Default::default() }.validate().is_err());
        assert!(SdeConfig { lambda_g: -1.0, ..Default::default() }.validate().is_err());
        assert!(SdeConfig { image_size: 60, ..Default::default() }.validate().is_err());
    }
}
