//! Frozen semantic feature targets for distillation and fusion.
//!
//! Three providers stand in for a large pretrained image-text teacher:
//!
//! * [`FileProvider`] reads precomputed per-image grids from `SDESEM01` files,
//!   so features dumped from any external teacher can be used directly.
//! * [`ClassEmbeddingProvider`] broadcasts a fixed random embedding of the
//!   image's class label over the grid. Its semantic signal is known exactly.
//! * [`FrozenNetProvider`] is a small convolutional network trained once on
//!   labelled images and then frozen.
//!
//! Provider parameters never receive gradients; [`SemanticProvider::param_hash`]
//! lets callers verify that.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Bound, Graph, ParamStore, Var};
use crate::data::{batch_nchw, ImageTensor, Sample};
use crate::error::{Result, SdeError};
use crate::nn::{Conv2d, Linear};
use crate::optim::{AdamW, OptimizerConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SEM_MAGIC: &[u8; 8] = b"SDESEM01";

/// Teacher feature grid `h × w × d_sem`, stored `(i, j, c)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTarget<S> {
    pub h: usize,
    pub w: usize,
    pub d_sem: usize,
    pub features: Vec<S>,
    pub source_id: String,
}

impl<S: Scalar> SemanticTarget<S> {
    pub fn new(h: usize, w: usize, d_sem: usize, features: Vec<S>, source_id: impl Into<String>) -> Result<Self> {
        if features.len() != h * w * d_sem || d_sem == 0 {
            return Err(SdeError::contract(format!(
                "semantic target {h}×{w}×{d_sem} needs {} values, got {}",
                h * w * d_sem,
                features.len()
            )));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(SdeError::invalid("semantic target contains non-finite values"));
        }
        if features.chunks(d_sem).any(|v| v.iter().all(|x| *x == S::zero())) {
            return Err(SdeError::invalid("semantic target has a zero-norm position"));
        }
        Ok(Self { h, w, d_sem, features, source_id: source_id.into() })
    }

    pub fn at(&self, i: usize, j: usize) -> &[S] {
        let o = (i * self.w + j) * self.d_sem;
        &self.features[o..o + self.d_sem]
    }

    /// `(h*w, d_sem)` rows.
    pub fn to_rows(&self) -> Tensor<S> {
        Tensor::new(&[self.h * self.w, self.d_sem], self.features.clone())
    }

    pub fn cast<T: Scalar>(&self) -> SemanticTarget<T> {
        SemanticTarget {
            h: self.h,
            w: self.w,
            d_sem: self.d_sem,
            features: self.features.iter().map(|&v| T::cast(v)).collect(),
            source_id: self.source_id.clone(),
        }
    }
}

/// Stack per-image targets into `(n*h*w, d_sem)` rows.
pub fn stack_targets<S: Scalar>(targets: &[&SemanticTarget<S>]) -> Result<Tensor<S>> {
    let first = targets.first().ok_or_else(|| SdeError::invalid("no semantic targets"))?;
    let mut data = Vec::with_capacity(targets.len() * first.features.len());
    for t in targets {
        if (t.h, t.w, t.d_sem) != (first.h, first.w, first.d_sem) {
            return Err(SdeError::contract("semantic targets in a batch must share a shape"));
        }
        data.extend_from_slice(&t.features);
    }
    Tensor::from_vec(&[targets.len() * first.h * first.w, first.d_sem], data)
}

pub fn write_target_file<S: Scalar>(path: &Path, target: &SemanticTarget<S>) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + target.features.len() * 4);
    buf.extend_from_slice(SEM_MAGIC);
    for v in [target.h, target.w, target.d_sem] {
        let v = u32::try_from(v).map_err(|_| SdeError::format("dimension exceeds u32"))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &target.features {
        buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_target_file<S: Scalar>(path: &Path, source_id: &str) -> Result<SemanticTarget<S>> {
    let mut bytes = Vec::new();
    File::open(path).map_err(|e| SdeError::Lookup(format!("{}: {e}", path.display())))?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != SEM_MAGIC {
        return Err(SdeError::format(format!("{}: not an SDESEM01 file", path.display())));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, d) = (dim(0), dim(1), dim(2));
    let n = h * w * d;
    if bytes.len() != 20 + 4 * n {
        return Err(SdeError::format(format!(
            "{}: header declares {n} floats but payload holds {}",
            path.display(),
            (bytes.len() - 20) / 4
        )));
    }
    let features = bytes[20..].chunks_exact(4).map(|c| S::cast(f32::from_le_bytes(c.try_into().unwrap()))).collect();
    SemanticTarget::new(h, w, d, features, source_id)
}

/// Which image a target is requested for.
#[derive(Debug, Clone, Copy)]
pub struct SampleKey<'a> {
    pub image_id: &'a str,
    pub label: Option<usize>,
}

impl<'a, S> From<&'a Sample<S>> for SampleKey<'a> {
    fn from(s: &'a Sample<S>) -> Self {
        SampleKey { image_id: &s.id, label: s.label }
    }
}

pub trait SemanticProvider<S: Scalar> {
    fn source_id(&self) -> &str;
    fn d_sem(&self) -> usize;
    fn grid(&self) -> (usize, usize);
    fn provide(&self, image: &ImageTensor<S>, key: SampleKey<'_>) -> Result<SemanticTarget<S>>;
    /// Hash of every frozen parameter the provider holds.
    fn param_hash(&self) -> String;
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct TargetManifestLine {
    image_id: String,
    target_path: String,
}

/// Precomputed target files listed in a JSON-lines manifest.
#[derive(Debug, Clone)]
pub struct TargetManifest {
    pub entries: Vec<(String, PathBuf)>,
    pub grid: (usize, usize),
    pub d_sem: usize,
}

impl TargetManifest {
    pub fn load(path: &Path, grid: (usize, usize), d_sem: usize) -> Result<Self> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let file = File::open(path).map_err(|e| SdeError::Lookup(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TargetManifestLine = serde_json::from_str(&line)?;
            let p = PathBuf::from(&rec.target_path);
            entries.push((rec.image_id, if p.is_absolute() { p } else { root.join(p) }));
        }
        Ok(Self { entries, grid, d_sem })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = File::create(path)?;
        for (id, p) in &self.entries {
            let line = TargetManifestLine { image_id: id.clone(), target_path: p.to_string_lossy().into_owned() };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub struct FileProvider<S> {
    targets: HashMap<String, SemanticTarget<S>>,
    grid: (usize, usize),
    d_sem: usize,
    hash: String,
}

impl<S: Scalar> FileProvider<S> {
    /// Load and validate every listed file against the declared shape.
    pub fn open(manifest: &TargetManifest) -> Result<Self> {
        let mut targets = HashMap::new();
        let mut hasher = Sha256::new();
        for (id, path) in &manifest.entries {
            let t: SemanticTarget<S> = read_target_file(path, "file")?;
            if (t.h, t.w) != manifest.grid || t.d_sem != manifest.d_sem {
                return Err(SdeError::contract(format!(
                    "{}: shape {}×{}×{} does not match declared {:?}×{}",
                    path.display(),
                    t.h,
                    t.w,
                    t.d_sem,
                    manifest.grid,
                    manifest.d_sem
                )));
            }
            hasher.update(id.as_bytes());
            targets.insert(id.clone(), t);
        }
        Ok(Self { targets, grid: manifest.grid, d_sem: manifest.d_sem, hash: hex::encode(hasher.finalize()) })
    }
}

impl<S: Scalar> SemanticProvider<S> for FileProvider<S> {
    fn source_id(&self) -> &str {
        "file"
    }

    fn d_sem(&self) -> usize {
        self.d_sem
    }

    fn grid(&self) -> (usize, usize) {
        self.grid
    }

    fn provide(&self, _image: &ImageTensor<S>, key: SampleKey<'_>) -> Result<SemanticTarget<S>> {
        self.targets
            .get(key.image_id)
            .cloned()
            .ok_or_else(|| SdeError::Lookup(format!("no precomputed target for image {}", key.image_id)))
    }

    fn param_hash(&self) -> String {
        self.hash.clone()
    }
}

/// Broadcast of a fixed N(0, 1) class embedding over the grid.
#[derive(Debug, Clone)]
pub struct ClassEmbeddingProvider<S> {
    table: Tensor<S>,
    grid: (usize, usize),
}

impl<S: Scalar> ClassEmbeddingProvider<S> {
    pub fn new(num_classes: usize, d_sem: usize, grid: (usize, usize), seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { table: Tensor::randn(&[num_classes, d_sem], 1.0, &mut rng), grid }
    }

    pub fn from_table(table: Tensor<S>, grid: (usize, usize)) -> Result<Self> {
        if table.rank() != 2 {
            return Err(SdeError::contract("class table must be classes × d_sem"));
        }
        Ok(Self { table, grid })
    }

    pub fn table(&self) -> &Tensor<S> {
        &self.table
    }

    pub fn num_classes(&self) -> usize {
        self.table.dim(0)
    }

    pub fn embedding(&self, class: usize) -> Option<&[S]> {
        (class < self.num_classes()).then(|| self.table.row(class))
    }
}

impl<S: Scalar> SemanticProvider<S> for ClassEmbeddingProvider<S> {
    fn source_id(&self) -> &str {
        "class-embedding"
    }

    fn d_sem(&self) -> usize {
        self.table.dim(1)
    }

    fn grid(&self) -> (usize, usize) {
        self.grid
    }

    fn provide(&self, _image: &ImageTensor<S>, key: SampleKey<'_>) -> Result<SemanticTarget<S>> {
        let label = key.label.ok_or_else(|| SdeError::Lookup(format!("image {} has no class label", key.image_id)))?;
        let row = self
            .embedding(label)
            .ok_or_else(|| SdeError::Lookup(format!("class {label} outside table of {}", self.num_classes())))?;
        let (h, w) = self.grid;
        let features = row.iter().copied().cycle().take(h * w * row.len()).collect();
        SemanticTarget::new(h, w, row.len(), features, "class-embedding")
    }

    fn param_hash(&self) -> String {
        let mut store = ParamStore::new();
        store.add("table", self.table.clone());
        store.content_hash()
    }
}

/// Three stride-2 convolutions with SiLU, giving features at 1/2, 1/4 and 1/8 resolution.
#[derive(Debug, Clone)]
pub struct ConvTrunk {
    pub layers: Vec<Conv2d>,
}

pub const TRUNK_CHANNELS: [usize; 3] = [16, 32, 64];

impl ConvTrunk {
    pub fn new<S: Scalar, R: rand::Rng + ?Sized>(store: &mut ParamStore<S>, name: &str, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut in_ch = 3;
        for (i, &out) in TRUNK_CHANNELS.iter().enumerate() {
            layers.push(Conv2d::new(store, &format!("{name}.conv{i}"), in_ch, out, 3, 2, 1, rng));
            in_ch = out;
        }
        Self { layers }
    }

    pub fn downsample(&self) -> usize {
        1 << self.layers.len()
    }

    pub fn out_channels(&self) -> usize {
        TRUNK_CHANNELS[TRUNK_CHANNELS.len() - 1]
    }

    /// Activations after every layer.
    pub fn features<S: Scalar>(&self, g: &Graph<S>, p: &Bound, x: Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            h = g.silu(layer.forward(g, p, h));
            out.push(h);
        }
        out
    }
}

/// Small convolutional teacher: trunk, then a 1×1 projection to `d_sem`.
#[derive(Debug, Clone)]
pub struct FrozenNetProvider<S> {
    store: ParamStore<S>,
    trunk: ConvTrunk,
    head: Conv2d,
    grid: (usize, usize),
    d_sem: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct TeacherTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TeacherTraining {
    fn default() -> Self {
        Self { steps: 300, batch_size: 16, lr: 2e-3, seed: 0 }
    }
}

impl<S: Scalar> FrozenNetProvider<S> {
    fn build(d_sem: usize, grid: (usize, usize), seed: u64) -> (ParamStore<S>, ConvTrunk, Conv2d) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let trunk = ConvTrunk::new(&mut store, "trunk", &mut rng);
        let head = Conv2d::new(&mut store, "head", trunk.out_channels(), d_sem, 1, 1, 0, &mut rng);
        let _ = grid;
        (store, trunk, head)
    }

    /// Untrained network with seeded weights.
    pub fn random(d_sem: usize, grid: (usize, usize), seed: u64) -> Self {
        let (store, trunk, head) = Self::build(d_sem, grid, seed);
        Self { store, trunk, head, grid, d_sem }
    }

    /// Rebuild from stored parameters (e.g. a checkpoint).
    pub fn from_store(store: ParamStore<S>, d_sem: usize, grid: (usize, usize)) -> Result<Self> {
        let (template, trunk, head) = Self::build(d_sem, grid, 0);
        for ((a, ta), (b, tb)) in template.iter().zip(store.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(SdeError::format(format!("teacher parameter {b} does not match layout {a}")));
            }
        }
        if template.len() != store.len() {
            return Err(SdeError::format("teacher parameter count mismatch"));
        }
        Ok(Self { store, trunk, head, grid, d_sem })
    }

    /// Fit trunk and head through a mean-pooled linear classifier on labelled
    /// samples, then drop the classifier and freeze.
    pub fn train(
        samples: &[Sample<S>],
        num_classes: usize,
        d_sem: usize,
        grid: (usize, usize),
        cfg: TeacherTraining,
    ) -> Result<Self> {
        let labelled: Vec<&Sample<S>> = samples.iter().filter(|s| s.label.is_some()).collect();
        if labelled.is_empty() {
            return Err(SdeError::invalid("frozen-net teacher needs labelled samples"));
        }
        let (mut store, trunk, head) = Self::build(d_sem, grid, cfg.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC1A5);
        let mut cls_store = ParamStore::new();
        let classifier = Linear::new(&mut cls_store, "cls", d_sem, num_classes, true, &mut rng);
        let opt_cfg = OptimizerConfig { lr: cfg.lr, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(&opt_cfg, &store);
        let mut cls_opt = AdamW::new(&opt_cfg, &cls_store);
        let mut order: Vec<usize> = (0..labelled.len()).collect();
        let mut cursor = order.len();
        for _ in 0..cfg.steps {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            while batch.len() < cfg.batch_size.min(labelled.len()) {
                if cursor >= order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(labelled[order[cursor]]);
                cursor += 1;
            }
            let images: Vec<&ImageTensor<S>> = batch.iter().map(|s| &s.image).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label.unwrap()).collect();
            if labels.iter().any(|&l| l >= num_classes) {
                return Err(SdeError::invalid("label outside class count"));
            }
            let g = Graph::new();
            let p = g.bind(&store, true);
            let pc = g.bind(&cls_store, true);
            let x = g.constant(batch_nchw(&images)?);
            let feats = head.forward(&g, &p, *trunk.features(&g, &p, x).last().unwrap());
            let s = g.shape(feats);
            let rows = g.permute(g.reshape(feats, &[s[0], s[1], s[2] * s[3]]), &[0, 2, 1]);
            let pooled = g.mean_axis1(rows);
            let logits = classifier.forward(&g, &pc, pooled);
            let loss = g.masked_cross_entropy(logits, &labels, &vec![true; labels.len()])?;
            let grads = g.backward(loss);
            opt.update(&mut store, &grads.for_params(&p), cfg.lr)?;
            cls_opt.update(&mut cls_store, &grads.for_params(&pc), cfg.lr)?;
        }
        Ok(Self { store, trunk, head, grid, d_sem })
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn trunk(&self) -> &ConvTrunk {
        &self.trunk
    }

    fn run(&self, image: &ImageTensor<S>) -> Result<Tensor<S>> {
        let g = Graph::no_grad();
        let p = g.bind(&self.store, false);
        let x = g.constant(batch_nchw(&[image])?);
        let feats = self.head.forward(&g, &p, *self.trunk.features(&g, &p, x).last().unwrap());
        let out = (*g.value(feats)).clone();
        Ok(out)
    }
}

impl<S: Scalar> SemanticProvider<S> for FrozenNetProvider<S> {
    fn source_id(&self) -> &str {
        "frozen-net"
    }

    fn d_sem(&self) -> usize {
        self.d_sem
    }

    fn grid(&self) -> (usize, usize) {
        self.grid
    }

    fn provide(&self, image: &ImageTensor<S>, _key: SampleKey<'_>) -> Result<SemanticTarget<S>> {
        let f = self.trunk.downsample();
        if !image.height().is_multiple_of(f)
            || !image.width().is_multiple_of(f)
            || (image.height() / f, image.width() / f) != self.grid
        {
            return Err(SdeError::contract(format!(
                "image {}×{} does not map onto grid {:?} at stride {f}",
                image.height(),
                image.width(),
                self.grid
            )));
        }
        let out = self.run(image)?;
        let (h, w) = self.grid;
        // (1, d, h, w) -> (h, w, d)
        let hwc = out.reshaped(&[self.d_sem, h * w]).permute(&[1, 0]);
        SemanticTarget::new(h, w, self.d_sem, hwc.into_data(), "frozen-net")
    }

    fn param_hash(&self) -> String {
        self.store.content_hash()
    }
}

/// Config-selectable provider.
pub enum Provider<S> {
    File(FileProvider<S>),
    ClassEmbedding(ClassEmbeddingProvider<S>),
    FrozenNet(FrozenNetProvider<S>),
}

impl<S: Scalar> Provider<S> {
    fn inner(&self) -> &dyn SemanticProvider<S> {
        match self {
            Provider::File(p) => p,
            Provider::ClassEmbedding(p) => p,
            Provider::FrozenNet(p) => p,
        }
    }

    pub fn frozen_net(&self) -> Option<&FrozenNetProvider<S>> {
        match self {
            Provider::FrozenNet(p) => Some(p),
            _ => None,
        }
    }
}

impl<S: Scalar> SemanticProvider<S> for Provider<S> {
    fn source_id(&self) -> &str {
        self.inner().source_id()
    }

    fn d_sem(&self) -> usize {
        self.inner().d_sem()
    }

    fn grid(&self) -> (usize, usize) {
        self.inner().grid()
    }

    fn provide(&self, image: &ImageTensor<S>, key: SampleKey<'_>) -> Result<SemanticTarget<S>> {
        self.inner().provide(image, key)
    }

    fn param_hash(&self) -> String {
        self.inner().param_hash()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ToyDataset;

    fn target(seed: u64) -> SemanticTarget<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::<f32>::randn(&[2 * 3 * 4], 1.0, &mut rng);
        SemanticTarget::new(2, 3, 4, t.into_data(), "test").unwrap()
    }

    #[test]
    fn sem_file_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.sem");
        let t = target(1);
        write_target_file(&path, &t).unwrap();
        let back: SemanticTarget<f32> = read_target_file(&path, "test").unwrap();
        assert_eq!(back, t);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"SDESEM01");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 4);
        assert_eq!(bytes.len(), 20 + 24 * 4);
    }

    #[test]
    fn truncated_sem_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.sem");
        write_target_file(&path, &target(2)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_target_file::<f32>(&path, "x"), Err(SdeError::Format(_))));
    }

    #[test]
    fn file_provider_passes_through() {
        let dir = tempfile::tempdir().unwrap();
        let t = target(3);
        write_target_file(&dir.path().join("img7.sem"), &t).unwrap();
        let manifest =
            TargetManifest { entries: vec![("img7".into(), dir.path().join("img7.sem"))], grid: (2, 3), d_sem: 4 };
        manifest.save(&dir.path().join("targets.jsonl")).unwrap();
        let loaded = TargetManifest::load(&dir.path().join("targets.jsonl"), (2, 3), 4).unwrap();
        let p = FileProvider::<f32>::open(&loaded).unwrap();
        let img = ImageTensor::new(1, 1, vec![0.0; 3]).unwrap();
        let got = p.provide(&img, SampleKey { image_id: "img7", label: None }).unwrap();
        assert_eq!(got.features, t.features);
        assert!(matches!(p.provide(&img, SampleKey { image_id: "nope", label: None }), Err(SdeError::Lookup(_))));
        // declared shape must match
        let bad = TargetManifest { grid: (3, 3), ..loaded };
        assert!(matches!(FileProvider::<f32>::open(&bad), Err(SdeError::Contract(_))));
    }

    #[test]
    fn class_embedding_broadcasts() {
        let p = ClassEmbeddingProvider::<f64>::new(10, 6, (4, 4), 9);
        let img = ImageTensor::new(1, 1, vec![0.0; 3]).unwrap();
        let t = p.provide(&img, SampleKey { image_id: "x", label: Some(3) }).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(t.at(i, j), p.embedding(3).unwrap());
            }
        }
        assert!(p.provide(&img, SampleKey { image_id: "x", label: Some(10) }).is_err());
        assert!(p.provide(&img, SampleKey { image_id: "x", label: None }).is_err());
    }

    #[test]
    fn frozen_net_is_deterministic_and_sensitive() {
        let p = FrozenNetProvider::<f64>::random(8, (2, 2), 4);
        let s: Sample<f64> = ToyDataset::new(16, 0).sample(1);
        let key = SampleKey::from(&s);
        let a = p.provide(&s.image, key).unwrap();
        let b = p.provide(&s.image, key).unwrap();
        assert_eq!(a, b);
        let mut px = s.image.pixels().to_vec();
        px[0] = if px[0] > 0.5 { 0.0 } else { 1.0 };
        let other = ImageTensor::new(16, 16, px).unwrap();
        assert_ne!(p.provide(&other, key).unwrap(), a);
        let wrong = ImageTensor::new(8, 8, vec![0.5; 192]).unwrap();
        assert!(matches!(p.provide(&wrong, key), Err(SdeError::Contract(_))));
    }

    #[test]
    fn zero_norm_targets_rejected() {
        assert!(SemanticTarget::<f32>::new(1, 1, 2, vec![0.0, 0.0], "z").is_err());
    }
}
