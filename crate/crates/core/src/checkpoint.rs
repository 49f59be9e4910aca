//! Checkpoints: a binary archive of named tensors plus a JSON sidecar with
//! the config, step, seed and hashes.
//!
//! Archive layout (little endian):
//! `SDEPAR01`, dtype tag u8, entry count u32, then per entry: name length
//! u32, UTF-8 name, rank u32, dims u64 each, raw values.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::{PatchDiscriminator, PerceptualNet};
use crate::autograd::ParamStore;
use crate::config::ProviderConfig;
use crate::error::{Result, SdeError};
use crate::lm::{ArModel, LmConfig, LmTrainer, VocabLayout};
use crate::optim::{AdamW, OptimizerConfig};
use crate::scalar::{DType, Scalar};
use crate::semantic::FrozenNetProvider;
use crate::tensor::Tensor;
use crate::tokenizer::{SdeConfig, SdeModel, Trainer};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"SDEPAR01";

/// Ordered named tensors.
#[derive(Debug, Clone, Default)]
pub struct Archive<S> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Archive<S> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(SdeError::contract(format!("duplicate archive entry {name}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<S>> {
        self.get(name).ok_or_else(|| SdeError::format(format!("archive has no entry {name}")))
    }

    /// Add every parameter of `store` as `{prefix}.{name}`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<S>) -> Result<()> {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}.{name}"), t.clone())?;
        }
        Ok(())
    }

    /// Entries under `{prefix}.`, prefix stripped, in archive order.
    pub fn store(&self, prefix: &str) -> ParamStore<S> {
        let lead = format!("{prefix}.");
        let mut store = ParamStore::new();
        for (name, t) in &self.entries {
            if let Some(rest) = name.strip_prefix(&lead) {
                store.add(rest, t.clone());
            }
        }
        store
    }

    pub fn push_adam(&mut self, prefix: &str, opt: &AdamW<S>, store: &ParamStore<S>) -> Result<()> {
        for ((name, _), (m, v)) in store.iter().zip(opt.m.iter().zip(&opt.v)) {
            self.push(format!("{prefix}.m.{name}"), m.clone())?;
            self.push(format!("{prefix}.v.{name}"), v.clone())?;
        }
        Ok(())
    }

    /// Restore moments for `store`'s parameters; `step` comes from the sidecar.
    pub fn adam(&self, prefix: &str, cfg: &OptimizerConfig, store: &ParamStore<S>, step: u64) -> Result<AdamW<S>> {
        let mut opt = AdamW::new(cfg, store);
        for (i, (name, t)) in store.iter().enumerate() {
            for (key, slot) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
                let saved = self.require(&format!("{prefix}.{key}.{name}"))?;
                if saved.shape() != t.shape() {
                    return Err(SdeError::format(format!("{prefix}.{key}.{name} has shape {:?}", saved.shape())));
                }
                *slot = saved.clone();
            }
        }
        opt.step = step;
        Ok(opt)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let u32_of =
            |v: usize, what: &str| u32::try_from(v).map_err(|_| SdeError::format(format!("{what} exceeds u32")));
        let mut buf = Vec::new();
        buf.extend_from_slice(ARCHIVE_MAGIC);
        buf.push(S::DTYPE.tag());
        buf.extend_from_slice(&u32_of(self.entries.len(), "entry count")?.to_le_bytes());
        for (name, t) in &self.entries {
            buf.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&u32_of(t.rank(), "rank")?.to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut buf);
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let out = bytes
                .get(pos..pos.saturating_add(n))
                .ok_or_else(|| SdeError::format(format!("archive truncated at byte {pos}")))?;
            pos += n;
            Ok(out)
        };
        if take(8)? != ARCHIVE_MAGIC {
            return Err(SdeError::format("not an SDEPAR01 archive"));
        }
        let tag = take(1)?[0];
        match DType::from_tag(tag) {
            Some(d) if d == S::DTYPE => {}
            Some(d) => return Err(SdeError::format(format!("archive holds {d:?}, expected {:?}", S::DTYPE))),
            None => return Err(SdeError::format(format!("unknown dtype tag {tag}"))),
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let count = u32_at(take(4)?);
        let mut out = Self::new();
        for _ in 0..count {
            let len = u32_at(take(4)?);
            let name =
                std::str::from_utf8(take(len)?).map_err(|_| SdeError::format("entry name is not UTF-8"))?.to_string();
            let rank = u32_at(take(4)?);
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(take(8)?.try_into().unwrap());
                shape.push(usize::try_from(d).map_err(|_| SdeError::format("dimension overflows usize"))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| SdeError::format("shape overflows"))?;
            let size = S::DTYPE.size();
            let raw = take(n.checked_mul(size).ok_or_else(|| SdeError::format("payload size overflows"))?)?;
            let data = raw.chunks_exact(size).map(S::read_le).collect();
            out.push(name, Tensor::from_vec(&shape, data)?).map_err(|e| SdeError::format(e.to_string()))?;
        }
        if pos != bytes.len() {
            return Err(SdeError::format(format!("{} trailing bytes after archive", bytes.len() - pos)));
        }
        Ok(out)
    }

    /// SHA-256 of the serialized archive.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    /// Same names, shapes and value bit patterns.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((a, ta), (b, tb))| a == b && tensor_bit_eq(ta, tb))
    }
}

pub fn tensor_bit_eq<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> bool {
    if a.shape() != b.shape() {
        return false;
    }
    let (mut x, mut y) = (Vec::new(), Vec::new());
    a.data().iter().for_each(|&v| v.write_le(&mut x));
    b.data().iter().for_each(|&v| v.write_le(&mut y));
    x == y
}

/// JSON written next to the archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub dtype: String,
    pub step: usize,
    pub seed: u64,
    pub config_hash: String,
    pub content_hash: String,
    pub deterministic: bool,
    pub config: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write the archive and its sidecar; `meta.content_hash` and `meta.dtype` are filled in here.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    archive: &Archive<S>,
    mut meta: CheckpointMeta,
) -> Result<CheckpointMeta> {
    let bytes = archive.to_bytes()?;
    meta.content_hash = hex::encode(Sha256::digest(&bytes));
    meta.dtype = format!("{:?}", S::DTYPE).to_lowercase();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    File::create(path)?.write_all(&bytes)?;
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}

/// Read both files and check the archive against the recorded content hash.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(Archive<S>, CheckpointMeta)> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let side = sidecar_path(path);
    let meta: CheckpointMeta = serde_json::from_slice(
        &std::fs::read(&side).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", side.display())))?,
    )?;
    let hash = hex::encode(Sha256::digest(&bytes));
    if hash != meta.content_hash {
        return Err(SdeError::format(format!("{}: content hash does not match its sidecar", path.display())));
    }
    Ok((Archive::from_bytes(&bytes)?, meta))
}

/// Everything a tokenizer run needs to resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerState {
    pub tokenizer: SdeConfig,
    pub optimizer: OptimizerConfig,
    pub provider: ProviderConfig,
    /// Grid the frozen teacher was built for, when one is stored.
    pub teacher_grid: Option<(usize, usize)>,
}

pub const TOKENIZER_KIND: &str = "tokenizer";
pub const VLM_KIND: &str = "vlm";

/// Namespaces: `tok.` model, `disc.` discriminator, `perc.` perceptual trunk,
/// `teacher.` frozen teacher, `opt.tok.` / `opt.disc.` moments, `state.` counters.
pub fn tokenizer_archive<S: Scalar>(
    trainer: &Trainer<S>,
    teacher: Option<&FrozenNetProvider<S>>,
) -> Result<Archive<S>> {
    let mut a = Archive::new();
    a.push_store("tok", &trainer.model.store)?;
    a.push_store("disc", &trainer.disc.store)?;
    a.push_store("perc", trainer.perceptual.store())?;
    if let Some(t) = teacher {
        a.push_store("teacher", t.store())?;
    }
    a.push_adam("opt.tok", &trainer.opt, &trainer.model.store)?;
    a.push_adam("opt.disc", &trainer.disc_opt, &trainer.disc.store)?;
    let counts: Vec<S> = trainer.code_counts().iter().map(|&c| S::cast(c as f64)).collect();
    a.push("state.code_counts", Tensor::from_vec(&[counts.len()], counts)?)?;
    Ok(a)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenizerExtra {
    state: TokenizerState,
    opt_step: u64,
    disc_opt_step: u64,
}

pub fn save_tokenizer<S: Scalar>(
    path: &Path,
    trainer: &Trainer<S>,
    teacher: Option<&FrozenNetProvider<S>>,
    state: &TokenizerState,
    config_hash: &str,
) -> Result<CheckpointMeta> {
    let archive = tokenizer_archive(trainer, teacher)?;
    let extra =
        TokenizerExtra { state: state.clone(), opt_step: trainer.opt.step, disc_opt_step: trainer.disc_opt.step };
    let meta = CheckpointMeta {
        kind: TOKENIZER_KIND.into(),
        dtype: String::new(),
        step: trainer.step,
        seed: trainer.seed(),
        config_hash: config_hash.into(),
        content_hash: String::new(),
        deterministic: crate::config::determinism_mode(),
        config: serde_json::to_value(&extra)?,
    };
    save_checkpoint(path, &archive, meta)
}

pub struct LoadedTokenizer<S> {
    pub trainer: Trainer<S>,
    pub teacher: Option<FrozenNetProvider<S>>,
    pub state: TokenizerState,
    pub meta: CheckpointMeta,
}

fn check_kind(meta: &CheckpointMeta, kind: &str) -> Result<()> {
    if meta.kind != kind {
        return Err(SdeError::format(format!("expected a {kind} checkpoint, found {}", meta.kind)));
    }
    Ok(())
}

pub fn load_tokenizer<S: Scalar>(path: &Path) -> Result<LoadedTokenizer<S>> {
    let (a, meta) = load_checkpoint::<S>(path)?;
    check_kind(&meta, TOKENIZER_KIND)?;
    let extra: TokenizerExtra = serde_json::from_value(meta.config.clone())?;
    let cfg = &extra.state.tokenizer;
    cfg.validate()?;
    let model = SdeModel::from_store(cfg, a.store("tok"))?;
    let perceptual = PerceptualNet::from_store(a.store("perc"))?;
    let mut trainer = Trainer::new(model, perceptual, &extra.state.optimizer, meta.seed)?;
    trainer.disc = PatchDiscriminator::from_store(cfg.disc_channels, cfg.disc_layers, a.store("disc"))?;
    trainer.opt = a.adam("opt.tok", &extra.state.optimizer, &trainer.model.store, extra.opt_step)?;
    trainer.disc_opt = a.adam("opt.disc", &extra.state.optimizer, &trainer.disc.store, extra.disc_opt_step)?;
    trainer.step = meta.step;
    let counts = a.require("state.code_counts")?.data().iter().map(|v| v.f64() as u64).collect();
    trainer.set_code_counts(counts)?;
    let teacher_store = a.store("teacher");
    let teacher = match (teacher_store.is_empty(), extra.state.teacher_grid) {
        (true, _) => None,
        (false, Some(grid)) => Some(FrozenNetProvider::from_store(teacher_store, cfg.d_sem, grid)?),
        (false, None) => return Err(SdeError::format("teacher weights stored without a grid")),
    };
    Ok(LoadedTokenizer { trainer, teacher, state: extra.state, meta })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmState {
    pub lm: LmConfig,
    pub optimizer: OptimizerConfig,
    pub layout: VocabLayout,
    pub grid: (usize, usize),
    pub image_size: usize,
    pub tokenizer_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VlmExtra {
    state: VlmState,
    opt_step: u64,
}

pub fn save_vlm<S: Scalar>(
    path: &Path,
    trainer: &LmTrainer<S>,
    state: &VlmState,
    seed: u64,
    config_hash: &str,
) -> Result<CheckpointMeta> {
    let mut a = Archive::new();
    a.push_store("lm", &trainer.model.store)?;
    a.push_adam("opt.lm", &trainer.opt, &trainer.model.store)?;
    let extra = VlmExtra { state: state.clone(), opt_step: trainer.opt.step };
    let meta = CheckpointMeta {
        kind: VLM_KIND.into(),
        dtype: String::new(),
        step: trainer.step,
        seed,
        config_hash: config_hash.into(),
        content_hash: String::new(),
        deterministic: crate::config::determinism_mode(),
        config: serde_json::to_value(&extra)?,
    };
    save_checkpoint(path, &a, meta)
}

pub struct LoadedVlm<S> {
    pub trainer: LmTrainer<S>,
    pub state: VlmState,
    pub meta: CheckpointMeta,
}

pub fn load_vlm<S: Scalar>(path: &Path) -> Result<LoadedVlm<S>> {
    let (a, meta) = load_checkpoint::<S>(path)?;
    check_kind(&meta, VLM_KIND)?;
    let extra: VlmExtra = serde_json::from_value(meta.config.clone())?;
    let st = &extra.state;
    let model = ArModel::from_store(&st.lm, st.layout.total() as usize, a.store("lm"))?;
    let mut trainer = LmTrainer::new(model, st.layout, &st.optimizer)?;
    trainer.opt = a.adam("opt.lm", &st.optimizer, &trainer.model.store, extra.opt_step)?;
    trainer.step = meta.step;
    Ok(LoadedVlm { trainer, state: extra.state, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_archive() -> Archive<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = Archive::new();
        a.push("a.w", Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
        a.push("b", Tensor::scalar(f32::MIN_POSITIVE)).unwrap();
        a.push("c", Tensor::from_vec(&[2], vec![-0.0, f32::MAX]).unwrap()).unwrap();
        a
    }

    #[test]
    fn archive_bytes_roundtrip() {
        let mut a = sample_archive();
        let back = Archive::<f32>::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert!(a.bit_eq(&back));
        assert!(!tensor_bit_eq(&Tensor::<f32>::scalar(0.0), &Tensor::scalar(-0.0)));
        assert!(a.push("b", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn corrupt_archives_are_format_errors() {
        let bytes = sample_archive().to_bytes().unwrap();
        for cut in [0, 5, 9, 20, bytes.len() - 1] {
            assert!(matches!(Archive::<f32>::from_bytes(&bytes[..cut]), Err(SdeError::Format(_))));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Archive::<f32>::from_bytes(&extra), Err(SdeError::Format(_))));
        assert!(matches!(Archive::<f64>::from_bytes(&bytes), Err(SdeError::Format(_))));
    }

    #[test]
    fn sidecar_hash_guards_the_archive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let meta = CheckpointMeta {
            kind: "test".into(),
            dtype: String::new(),
            step: 7,
            seed: 1,
            config_hash: "abc".into(),
            content_hash: String::new(),
            deterministic: false,
            config: serde_json::Value::Null,
        };
        let written = save_checkpoint(&path, &sample_archive(), meta).unwrap();
        let (a, m) = load_checkpoint::<f32>(&path).unwrap();
        assert!(a.bit_eq(&sample_archive()));
        assert_eq!(m, written);
        assert_eq!(m.dtype, "f32");
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(SdeError::Format(_))));
    }

    #[test]
    fn store_prefix_split() {
        let mut s = ParamStore::<f64>::new();
        s.add("x", Tensor::zeros(&[2]));
        s.add("y.z", Tensor::full(&[1, 1], 2.0));
        let mut a = Archive::new();
        a.push_store("tok", &s).unwrap();
        a.push_store("tokens", &s).unwrap();
        let back = a.store("tok");
        assert_eq!(back.len(), 2);
        assert_eq!(back.content_hash(), s.content_hash());
    }
}
