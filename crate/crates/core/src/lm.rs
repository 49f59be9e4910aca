//! Unified vocabulary over text bytes, framing tokens and visual codes;
//! sequence assembly with target-only loss masks; the autoregressive
//! transformer with its masked next-token loss and constrained image
//! generation.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Graph, ParamId, ParamStore, Var};
use crate::error::{Result, SdeError};
use crate::nn::{LayerNorm, Linear, TransformerBlock};
use crate::optim::{AdamW, CosineSchedule, OptimizerConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Token id layout: `[0, N)` text, then bos, eos, pad, soi, eoi, then `K` visual ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub text_size: u32,
    pub codebook_size: u32,
}

impl VocabLayout {
    pub fn new(text_size: u32, codebook_size: u32) -> Result<Self> {
        if text_size == 0 || codebook_size == 0 {
            return Err(SdeError::config("vocabulary sizes must be positive"));
        }
        text_size
            .checked_add(5)
            .and_then(|v| v.checked_add(codebook_size))
            .ok_or_else(|| SdeError::config("vocabulary does not fit in u32"))?;
        Ok(Self { text_size, codebook_size })
    }

    pub fn bos(&self) -> u32 {
        self.text_size
    }

    pub fn eos(&self) -> u32 {
        self.text_size + 1
    }

    pub fn pad(&self) -> u32 {
        self.text_size + 2
    }

    pub fn soi(&self) -> u32 {
        self.text_size + 3
    }

    pub fn eoi(&self) -> u32 {
        self.text_size + 4
    }

    pub fn visual_base(&self) -> u32 {
        self.text_size + 5
    }

    pub fn total(&self) -> u32 {
        self.text_size + 5 + self.codebook_size
    }

    pub fn visual_id(&self, code: u32) -> Result<u32> {
        if code >= self.codebook_size {
            return Err(SdeError::invalid(format!("code {code} outside codebook of {}", self.codebook_size)));
        }
        Ok(self.visual_base() + code)
    }

    pub fn code_of(&self, id: u32) -> Option<u32> {
        self.is_visual(id).then(|| id - self.visual_base())
    }

    pub fn is_visual(&self, id: u32) -> bool {
        id >= self.visual_base() && id < self.total()
    }

    pub fn is_text(&self, id: u32) -> bool {
        id < self.text_size
    }
}

/// UTF-8 bytes as token ids.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const VOCAB: u32 = 256;

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    /// Text ids back to a string; other ids are skipped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

pub const GENERATION_INSTRUCTIONS: [&str; 8] = [
    "Please generate an image.",
    "Show me a photo.",
    "Draw a picture.",
    "Create an image of the following.",
    "Render this description as an image.",
    "Paint what is described.",
    "Produce a picture for this caption.",
    "Make an image.",
];

pub fn pick_instruction<R: Rng + ?Sized>(rng: &mut R) -> &'static str {
    GENERATION_INSTRUCTIONS[rng.random_range(0..GENERATION_INSTRUCTIONS.len())]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SequenceKind {
    Understanding,
    Generation,
}

impl SequenceKind {
    pub fn tag(self) -> u32 {
        match self {
            SequenceKind::Understanding => 0,
            SequenceKind::Generation => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(SequenceKind::Understanding),
            1 => Ok(SequenceKind::Generation),
            t => Err(SdeError::format(format!("unknown sequence kind {t}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceSample {
    pub ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub kind: SequenceKind,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Codes inside the first soi..eoi span.
    pub fn image_codes(&self, layout: &VocabLayout) -> Option<Vec<u32>> {
        let start = self.ids.iter().position(|&t| t == layout.soi())?;
        let end = start + 1 + self.ids[start + 1..].iter().position(|&t| t == layout.eoi())?;
        self.ids[start + 1..end].iter().map(|&t| layout.code_of(t)).collect()
    }
}

fn check_text(ids: &[u32], layout: &VocabLayout) -> Result<()> {
    match ids.iter().find(|&&t| !layout.is_text(t)) {
        Some(t) => Err(SdeError::invalid(format!("id {t} is not a text id"))),
        None => Ok(()),
    }
}

fn push_image(ids: &mut Vec<u32>, codes: &[u32], layout: &VocabLayout) -> Result<()> {
    ids.push(layout.soi());
    for &c in codes {
        ids.push(layout.visual_id(c)?);
    }
    ids.push(layout.eoi());
    Ok(())
}

/// `[bos] text [soi] codes [eoi] response [eos]`, loss on the response and eos.
pub fn assemble_understanding(
    text: &[u32],
    codes: &[u32],
    response: &[u32],
    layout: &VocabLayout,
) -> Result<SequenceSample> {
    check_text(text, layout)?;
    check_text(response, layout)?;
    let mut ids = vec![layout.bos()];
    ids.extend_from_slice(text);
    push_image(&mut ids, codes, layout)?;
    let prompt = ids.len();
    ids.extend_from_slice(response);
    ids.push(layout.eos());
    let loss_mask = (0..ids.len()).map(|i| i >= prompt).collect();
    Ok(SequenceSample { ids, loss_mask, kind: SequenceKind::Understanding })
}

/// `[bos] system caption [soi] codes [eoi] [eos]`, loss on the image span and eos.
pub fn assemble_generation(
    system: &[u32],
    caption: &[u32],
    codes: &[u32],
    layout: &VocabLayout,
) -> Result<SequenceSample> {
    check_text(system, layout)?;
    check_text(caption, layout)?;
    let mut ids = vec![layout.bos()];
    ids.extend_from_slice(system);
    ids.extend_from_slice(caption);
    let prompt = ids.len();
    push_image(&mut ids, codes, layout)?;
    ids.push(layout.eos());
    let loss_mask = (0..ids.len()).map(|i| i >= prompt).collect();
    Ok(SequenceSample { ids, loss_mask, kind: SequenceKind::Generation })
}

/// Reject anything but a well-framed sequence holding one `grid_len` image.
pub fn validate_sequence(s: &SequenceSample, layout: &VocabLayout, grid_len: usize) -> Result<()> {
    let bad = |msg: String| Err(SdeError::invalid(msg));
    if s.ids.len() != s.loss_mask.len() {
        return bad(format!("{} ids but {} mask entries", s.ids.len(), s.loss_mask.len()));
    }
    if s.ids.first() != Some(&layout.bos()) || s.ids.last() != Some(&layout.eos()) {
        return bad("sequence must start with bos and end with eos".into());
    }
    if let Some(t) = s.ids.iter().find(|&&t| t >= layout.total()) {
        return bad(format!("id {t} outside vocabulary of {}", layout.total()));
    }
    let inner = &s.ids[1..s.ids.len() - 1];
    if inner.iter().any(|&t| t == layout.bos() || t == layout.eos() || t == layout.pad()) {
        return bad("bos, eos or pad inside the sequence body".into());
    }
    let soi: Vec<usize> = s.ids.iter().enumerate().filter(|(_, &t)| t == layout.soi()).map(|(i, _)| i).collect();
    let eoi: Vec<usize> = s.ids.iter().enumerate().filter(|(_, &t)| t == layout.eoi()).map(|(i, _)| i).collect();
    if soi.len() != 1 || eoi.len() != 1 || eoi[0] < soi[0] {
        return bad(format!("expected one soi..eoi span, found {} soi and {} eoi", soi.len(), eoi.len()));
    }
    let (a, b) = (soi[0], eoi[0]);
    let span = &s.ids[a + 1..b];
    if span.len() != grid_len {
        return bad(format!("image span holds {} ids, expected {grid_len}", span.len()));
    }
    if let Some(t) = span.iter().find(|&&t| !layout.is_visual(t)) {
        return bad(format!("non-visual id {t} inside the image span"));
    }
    if s.ids[..a].iter().chain(&s.ids[b + 1..]).any(|&t| layout.is_visual(t)) {
        return bad("visual id outside the image span".into());
    }
    let target_start = match s.kind {
        SequenceKind::Understanding => b + 1,
        SequenceKind::Generation => {
            if b + 2 != s.ids.len() {
                return bad("generation sample must end with eoi, eos".into());
            }
            a
        }
    };
    let expected = (0..s.ids.len()).map(|i| i >= target_start);
    if !s.loss_mask.iter().copied().eq(expected) {
        return bad("loss mask does not cover exactly the target region".into());
    }
    Ok(())
}

pub fn validate_corpus(samples: &[SequenceSample], layout: &VocabLayout, grid_len: usize) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        validate_sequence(s, layout, grid_len).map_err(|e| SdeError::invalid(format!("record {i}: {e}")))?;
    }
    Ok(())
}

pub const TOK_MAGIC: &[u8; 8] = b"SDETOK01";

pub fn write_token_cache(path: &Path, samples: &[SequenceSample]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(TOK_MAGIC);
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        if s.ids.len() != s.loss_mask.len() {
            return Err(SdeError::contract("ids and loss mask differ in length"));
        }
        buf.extend_from_slice(&s.kind.tag().to_le_bytes());
        buf.extend_from_slice(&(s.ids.len() as u32).to_le_bytes());
        for &t in &s.ids {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        let mut bits = vec![0u8; s.ids.len().div_ceil(8)];
        for (i, &m) in s.loss_mask.iter().enumerate() {
            if m {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        buf.extend_from_slice(&bits);
    }
    File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_token_cache(path: &Path) -> Result<Vec<SequenceSample>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let out = bytes
            .get(pos..pos + n)
            .ok_or_else(|| SdeError::format(format!("{}: truncated at byte {pos}", path.display())))?;
        pos += n;
        Ok(out)
    };
    if take(8)? != TOK_MAGIC {
        return Err(SdeError::format(format!("{}: not an SDETOK01 file", path.display())));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let count = u32_at(take(4)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let kind = SequenceKind::from_tag(u32_at(take(4)?))?;
        let len = u32_at(take(4)?) as usize;
        let ids = take(4 * len)?.chunks_exact(4).map(u32_at).collect();
        let bits = take(len.div_ceil(8))?;
        let loss_mask = (0..len).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        out.push(SequenceSample { ids, loss_mask, kind });
    }
    if pos != bytes.len() {
        return Err(SdeError::format(format!("{}: {} trailing bytes", path.display(), bytes.len() - pos)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub context: usize,
    pub mlp_ratio: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { layers: 4, width: 256, heads: 4, context: 1024, mlp_ratio: 4 }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.context < 2 || self.mlp_ratio == 0 {
            return Err(SdeError::config("lm dimensions must be positive"));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(SdeError::config("lm.width must divide into lm.heads"));
        }
        Ok(())
    }
}

/// Decoder-only transformer over a vocabulary of `vocab` ids.
#[derive(Debug, Clone)]
pub struct ArModel<S> {
    pub cfg: LmConfig,
    pub vocab: usize,
    pub store: ParamStore<S>,
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNorm,
    /// `(width, vocab)`, no bias.
    pub head: ParamId,
}

impl<S: Scalar> ArModel<S> {
    pub fn new(cfg: &LmConfig, vocab: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = store.add("embed", Tensor::randn(&[vocab, cfg.width], 0.02, &mut rng));
        let pos = store.add("pos", Tensor::randn(&[cfg.context, cfg.width], 0.02, &mut rng));
        let blocks = (0..cfg.layers)
            .map(|i| {
                TransformerBlock::new(
                    &mut store,
                    &format!("block{i}"),
                    cfg.width,
                    cfg.heads,
                    cfg.mlp_ratio,
                    true,
                    &mut rng,
                )
            })
            .collect();
        let ln_f = LayerNorm::new(&mut store, "ln_f", cfg.width);
        let head = store.add("head", Tensor::randn(&[cfg.width, vocab], 0.02, &mut rng));
        Ok(Self { cfg: cfg.clone(), vocab, store, embed, pos, blocks, ln_f, head })
    }

    /// A freshly initialised unified model.
    pub fn for_layout(cfg: &LmConfig, layout: &VocabLayout, seed: u64) -> Result<Self> {
        Self::new(cfg, layout.total() as usize, seed)
    }

    pub fn from_store(cfg: &LmConfig, vocab: usize, store: ParamStore<S>) -> Result<Self> {
        let mut m = Self::new(cfg, vocab, 0)?;
        crate::tokenizer::check_layout(&m.store, &store)?;
        m.store = store;
        Ok(m)
    }

    /// Grow a text-only model to the unified vocabulary. Text rows and every
    /// other weight are copied; new embedding rows are drawn from
    /// N(0, 0.02²) and new output columns start at zero.
    pub fn extend_embeddings(base: &ArModel<S>, layout: &VocabLayout, seed: u64) -> Result<Self> {
        let n = layout.text_size as usize;
        if base.vocab != n {
            return Err(SdeError::contract(format!("base vocabulary {} is not the text size {n}", base.vocab)));
        }
        let total = layout.total() as usize;
        let w = base.cfg.width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fresh = Tensor::<S>::randn(&[total - n, w], 0.02, &mut rng);
        let mut embed = base.store.get(base.embed).data().to_vec();
        embed.extend_from_slice(fresh.data());
        let old_head = base.store.get(base.head);
        let mut head = vec![S::zero(); w * total];
        for r in 0..w {
            head[r * total..r * total + n].copy_from_slice(old_head.row(r));
        }
        let mut store = ParamStore::new();
        for (name, t) in base.store.iter() {
            let value = match name {
                "embed" => Tensor::from_vec(&[total, w], embed.clone())?,
                "head" => Tensor::from_vec(&[w, total], head.clone())?,
                _ => t.clone(),
            };
            store.add(name, value);
        }
        Ok(Self { vocab: total, store, ..base.clone() })
    }

    /// `(B, T)` ids to `(B*T, vocab)` logits.
    pub fn logits(&self, g: &Graph<S>, p: &Bound, ids: &[u32], batch: usize) -> Result<Var> {
        let t = ids.len() / batch.max(1);
        if batch == 0 || t * batch != ids.len() || t == 0 {
            return Err(SdeError::contract("ids must form a non-empty (batch, time) grid"));
        }
        if t > self.cfg.context {
            return Err(SdeError::invalid(format!("sequence of {t} exceeds context {}", self.cfg.context)));
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.vocab) {
            return Err(SdeError::invalid(format!("token {bad} outside vocabulary {}", self.vocab)));
        }
        let w = self.cfg.width;
        let x = g.reshape(g.gather_rows(p[self.embed], &idx), &[batch, t, w]);
        let pos = g.gather_rows(p[self.pos], &(0..t).collect::<Vec<_>>());
        let mut h = g.add_suffix(x, pos);
        for b in &self.blocks {
            h = b.forward(g, p, h);
        }
        let h = self.ln_f.forward(g, p, h);
        let h = g.reshape(h, &[batch * t, w]);
        Ok(g.matmul(h, p[self.head]))
    }

    /// Logits for one unbatched sequence, without a tape.
    pub fn eval_logits(&self, ids: &[u32]) -> Result<Tensor<S>> {
        let g = Graph::no_grad();
        let p = g.bind(&self.store, false);
        let out = self.logits(&g, &p, ids, 1)?;
        Ok((*g.value(out)).clone())
    }
}

/// Padded inputs, shifted targets and their mask for a batch of samples.
#[derive(Debug, Clone)]
pub struct LmBatch {
    pub inputs: Vec<u32>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub kinds: Vec<SequenceKind>,
    pub batch: usize,
    pub time: usize,
}

impl LmBatch {
    /// Row `t` predicts `ids[t+1]` from `ids[..=t]`; it counts when
    /// `loss_mask[t+1]` is set, or for every non-pad target in all-token mode.
    pub fn new(samples: &[SequenceSample], layout: &VocabLayout, all_tokens: bool) -> Result<Self> {
        if samples.is_empty() {
            return Err(SdeError::invalid("empty lm batch"));
        }
        let time = samples.iter().map(|s| s.len()).max().unwrap_or(0).saturating_sub(1).max(1);
        let mut inputs = Vec::with_capacity(samples.len() * time);
        let mut targets = Vec::with_capacity(samples.len() * time);
        let mut mask = Vec::with_capacity(samples.len() * time);
        for s in samples {
            if s.ids.len() != s.loss_mask.len() {
                return Err(SdeError::contract("ids and loss mask differ in length"));
            }
            for t in 0..time {
                inputs.push(s.ids.get(t).copied().unwrap_or(layout.pad()));
                match s.ids.get(t + 1) {
                    Some(&next) => {
                        targets.push(next as usize);
                        mask.push(if all_tokens { next != layout.pad() } else { s.loss_mask[t + 1] });
                    }
                    None => {
                        targets.push(layout.pad() as usize);
                        mask.push(false);
                    }
                }
            }
        }
        Ok(Self { inputs, targets, mask, kinds: samples.iter().map(|s| s.kind).collect(), batch: samples.len(), time })
    }
}

/// Mean next-token cross-entropy over masked positions.
pub fn lm_loss_on_graph<S: Scalar>(model: &ArModel<S>, g: &Graph<S>, p: &Bound, batch: &LmBatch) -> Result<(Var, Var)> {
    let logits = model.logits(g, p, &batch.inputs, batch.batch)?;
    let loss = g.masked_cross_entropy(logits, &batch.targets, &batch.mask)?;
    Ok((loss, logits))
}

pub fn lm_loss<S: Scalar>(
    model: &ArModel<S>,
    samples: &[SequenceSample],
    layout: &VocabLayout,
    all_tokens: bool,
) -> Result<S> {
    let batch = LmBatch::new(samples, layout, all_tokens)?;
    let g = Graph::no_grad();
    let p = g.bind(&model.store, false);
    Ok(g.item(lm_loss_on_graph(model, &g, &p, &batch)?.0))
}

/// Per-row negative log-likelihoods of masked rows, computed in f64.
pub fn masked_nll(logits: &Tensor<impl Scalar>, targets: &[usize], mask: &[bool]) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row: Vec<f64> = logits.row(i).iter().map(|v| v.f64()).collect();
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        out.push((i, lse - row[t]));
    }
    out
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LmStepReport {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_understanding: Option<f64>,
    pub loss_generation: Option<f64>,
    /// Independent f64 recompute of `loss` from the same logits.
    pub loss_recomputed: f64,
}

pub struct LmTrainer<S> {
    pub model: ArModel<S>,
    pub opt: AdamW<S>,
    pub schedule: CosineSchedule,
    pub step: usize,
    pub layout: VocabLayout,
    pub all_tokens: bool,
}

impl<S: Scalar> LmTrainer<S> {
    pub fn new(model: ArModel<S>, layout: VocabLayout, opt_cfg: &OptimizerConfig) -> Result<Self> {
        opt_cfg.validate()?;
        if model.vocab != layout.total() as usize {
            return Err(SdeError::contract("model vocabulary does not match the layout"));
        }
        let opt = AdamW::new(opt_cfg, &model.store);
        Ok(Self { model, opt, schedule: opt_cfg.schedule(), step: 0, layout, all_tokens: false })
    }

    pub fn train_step(&mut self, samples: &[SequenceSample]) -> Result<LmStepReport> {
        let batch = LmBatch::new(samples, &self.layout, self.all_tokens)?;
        let lr = self.schedule.lr_at(self.step);
        let g = Graph::new();
        let p = g.bind(&self.model.store, true);
        let (loss, logits) = lm_loss_on_graph(&self.model, &g, &p, &batch)?;
        let value = g.item(loss).f64();
        if !value.is_finite() {
            return Err(SdeError::divergence("lm_loss"));
        }
        let nll = masked_nll(&g.value(logits), &batch.targets, &batch.mask);
        let recomputed = nll.iter().map(|x| x.1).sum::<f64>() / nll.len() as f64;
        let kind_mean = |k: SequenceKind| {
            let v: Vec<f64> = nll.iter().filter(|(i, _)| batch.kinds[i / batch.time] == k).map(|x| x.1).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let report = LmStepReport {
            step: self.step,
            lr,
            loss: value,
            loss_understanding: kind_mean(SequenceKind::Understanding),
            loss_generation: kind_mean(SequenceKind::Generation),
            loss_recomputed: recomputed,
        };
        let grads = g.backward(loss).for_params(&p);
        drop(g);
        self.opt.update(&mut self.model.store, &grads, lr)?;
        self.step += 1;
        Ok(report)
    }
}

/// Temperature plus top-k sampling. Temperature ≤ 0 or `top_k == 1` is greedy.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { temperature: 1.0, top_k: 50, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self { temperature: 0.0, top_k: 1, seed: 0 }
    }
}

/// Pick an index from `logits`; ties in the greedy case go to the lowest index.
pub fn sample_index<R: Rng + ?Sized>(logits: &[f64], cfg: &SamplerConfig, rng: &mut R) -> usize {
    let argmax = || {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        best
    };
    if cfg.temperature <= 0.0 || cfg.top_k == 1 {
        return argmax();
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    if cfg.top_k > 0 {
        order.truncate(cfg.top_k);
    }
    let mx = logits[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| ((logits[i] - mx) / cfg.temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, &w) in order.iter().zip(&weights) {
        if u < w {
            return i;
        }
        u -= w;
    }
    order[order.len() - 1]
}

/// Incremental decoding state: cached keys and values per layer.
pub struct KvCache<S> {
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    len: usize,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(layers: usize) -> Self {
        Self { keys: vec![Vec::new(); layers], values: vec![Vec::new(); layers], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn dense<S: Scalar>(x: &[S], w: &Tensor<S>, b: Option<&Tensor<S>>) -> Vec<S> {
    let (i, o) = (w.dim(0), w.dim(1));
    let mut out = match b {
        Some(b) => b.data().to_vec(),
        None => vec![S::zero(); o],
    };
    S::gemm(1, i, o, S::one(), x, (i as isize, 1), w.data(), (o as isize, 1), S::one(), &mut out, (o as isize, 1));
    out
}

fn layer_norm_vec<S: Scalar>(x: &[S], gamma: &Tensor<S>, beta: &Tensor<S>) -> Vec<S> {
    let d = S::cast(x.len());
    let mean = x.iter().copied().sum::<S>() / d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / d;
    let rs = S::one() / (var + S::cast(1e-5)).sqrt();
    x.iter().zip(gamma.data()).zip(beta.data()).map(|((&v, &g), &b)| (v - mean) * rs * g + b).collect()
}

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::cast((2.0 / std::f64::consts::PI).sqrt());
    let half = S::cast(0.5);
    half * x * (S::one() + (c * (x + S::cast(0.044715) * x * x * x)).tanh())
}

impl<S: Scalar> ArModel<S> {
    /// Feed one token, returning next-token logits.
    pub fn step(&self, token: u32, cache: &mut KvCache<S>) -> Result<Vec<S>> {
        let pos = cache.len;
        if pos >= self.cfg.context {
            return Err(SdeError::invalid(format!("context of {} exhausted", self.cfg.context)));
        }
        if token as usize >= self.vocab {
            return Err(SdeError::invalid(format!("token {token} outside vocabulary {}", self.vocab)));
        }
        let s = &self.store;
        let w = self.cfg.width;
        let heads = self.cfg.heads;
        let hd = w / heads;
        let scale = S::one() / S::cast(hd).sqrt();
        let mut h: Vec<S> =
            s.get(self.embed).row(token as usize).iter().zip(s.get(self.pos).row(pos)).map(|(&a, &b)| a + b).collect();
        let lin = |l: &Linear, x: &[S]| dense(x, s.get(l.weight), l.bias.map(|b| s.get(b)));
        for (li, blk) in self.blocks.iter().enumerate() {
            let x = layer_norm_vec(&h, s.get(blk.ln1.gamma), s.get(blk.ln1.beta));
            let q = lin(&blk.attn.q, &x);
            cache.keys[li].extend(lin(&blk.attn.k, &x));
            cache.values[li].extend(lin(&blk.attn.v, &x));
            let (keys, vals) = (&cache.keys[li], &cache.values[li]);
            let n = pos + 1;
            let mut attn_out = vec![S::zero(); w];
            for hh in 0..heads {
                let qh = &q[hh * hd..(hh + 1) * hd];
                let scores: Vec<S> = (0..n)
                    .map(|j| {
                        qh.iter().zip(&keys[j * w + hh * hd..j * w + (hh + 1) * hd]).map(|(&a, &b)| a * b).sum::<S>()
                            * scale
                    })
                    .collect();
                let mx = scores.iter().copied().fold(S::neg_infinity(), S::max);
                let e: Vec<S> = scores.iter().map(|&v| (v - mx).exp()).collect();
                let z: S = e.iter().copied().sum();
                for (j, &ej) in e.iter().enumerate() {
                    let a = ej / z;
                    for k in 0..hd {
                        attn_out[hh * hd + k] += a * vals[j * w + hh * hd + k];
                    }
                }
            }
            let o = lin(&blk.attn.proj, &attn_out);
            h.iter_mut().zip(&o).for_each(|(a, &b)| *a += b);
            let x = layer_norm_vec(&h, s.get(blk.ln2.gamma), s.get(blk.ln2.beta));
            let m: Vec<S> = lin(&blk.fc1, &x).into_iter().map(gelu).collect();
            let o = lin(&blk.fc2, &m);
            h.iter_mut().zip(&o).for_each(|(a, &b)| *a += b);
        }
        cache.len += 1;
        let x = layer_norm_vec(&h, s.get(self.ln_f.gamma), s.get(self.ln_f.beta));
        Ok(dense(&x, s.get(self.head), None))
    }
}

/// Prompt, forced framing and sampled codes of one generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub codes: Vec<u32>,
    /// Prompt, soi, visual ids, eoi.
    pub ids: Vec<u32>,
}

/// Sample exactly `grid_len` visual ids after the prompt. Logits are masked
/// to the visual range; soi is appended when the prompt lacks it and eoi is
/// forced at the end.
pub fn generate_image_tokens<S: Scalar>(
    model: &ArModel<S>,
    prompt: &[u32],
    layout: &VocabLayout,
    grid_len: usize,
    sampler: &SamplerConfig,
) -> Result<Generation> {
    if grid_len == 0 {
        return Err(SdeError::invalid("grid_len must be positive"));
    }
    if model.vocab != layout.total() as usize {
        return Err(SdeError::contract("model vocabulary does not match the layout"));
    }
    let soi_at = prompt.iter().position(|&t| t == layout.soi());
    if soi_at.is_some_and(|i| i + 1 != prompt.len()) {
        return Err(SdeError::invalid("prompt continues past soi"));
    }
    let mut ids = prompt.to_vec();
    if soi_at.is_none() {
        ids.push(layout.soi());
    }
    if ids.len() + grid_len > model.cfg.context {
        return Err(SdeError::invalid("prompt plus image exceeds the context"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut cache = KvCache::new(model.cfg.layers);
    let mut logits = Vec::new();
    for &t in &ids {
        logits = model.step(t, &mut cache)?;
    }
    let base = layout.visual_base() as usize;
    let k = layout.codebook_size as usize;
    let mut codes = Vec::with_capacity(grid_len);
    for i in 0..grid_len {
        let visual: Vec<f64> = logits[base..base + k].iter().map(|v| v.f64()).collect();
        let code = sample_index(&visual, sampler, &mut rng) as u32;
        codes.push(code);
        let id = layout.visual_id(code)?;
        ids.push(id);
        if i + 1 < grid_len {
            logits = model.step(id, &mut cache)?;
        }
    }
    ids.push(layout.eoi());
    Ok(Generation { codes, ids })
}
