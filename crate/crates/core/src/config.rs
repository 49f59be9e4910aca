//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SdeError};
use crate::lm::LmConfig;
use crate::optim::OptimizerConfig;
use crate::tokenizer::SdeConfig;

/// Environment switch for determinism mode.
pub const DETERMINISM_ENV: &str = "SDE_DETERMINISTIC";

/// True when `SDE_DETERMINISTIC=1`: data loading runs sequentially and every
/// seed comes from the config or command line.
pub fn determinism_mode() -> bool {
    std::env::var(DETERMINISM_ENV).is_ok_and(|v| v.trim() == "1")
}

/// Where semantic targets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProviderConfig {
    /// Per-class random embedding broadcast over the grid. Needs labels.
    ClassEmbedding {
        #[serde(default = "default_classes")]
        num_classes: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Small conv teacher fitted to the training labels, then frozen.
    FrozenNet {
        #[serde(default = "default_classes")]
        num_classes: usize,
        #[serde(default = "default_teacher_steps")]
        steps: usize,
        #[serde(default = "default_teacher_batch")]
        batch_size: usize,
        #[serde(default = "default_teacher_lr")]
        lr: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Precomputed SDESEM01 files listed in a target manifest.
    File { manifest: PathBuf },
}

fn default_classes() -> usize {
    10
}

fn default_teacher_steps() -> usize {
    300
}

fn default_teacher_batch() -> usize {
    16
}

fn default_teacher_lr() -> f64 {
    2e-3
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::ClassEmbedding { num_classes: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: PathBuf,
    pub eval_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub lm_batch_size: usize,
    pub log_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { batch_size: 4, lm_batch_size: 8, log_every: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub tokenizer: SdeConfig,
    pub optimizer: OptimizerConfig,
    pub lm: LmConfig,
    pub lm_optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub provider: ProviderConfig,
    /// Directory relative paths are resolved against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tokenizer: SdeConfig::default(),
            optimizer: OptimizerConfig::default(),
            lm: LmConfig::default(),
            lm_optimizer: OptimizerConfig { lr: 1e-3, warmup_steps: 20, total_steps: 500, ..Default::default() },
            training: TrainingConfig::default(),
            data: DataConfig::default(),
            provider: ProviderConfig::default(),
            base_dir: PathBuf::new(),
        }
    }
}

impl ExperimentConfig {
    /// Parse and validate without touching the filesystem.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| SdeError::config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read, validate, and check that every referenced path exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SdeError::config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let cfg = Self::from_toml_str(&text, &base)?;
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| SdeError::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.lm.validate()?;
        self.optimizer.validate()?;
        self.lm_optimizer.validate()?;
        if self.training.batch_size == 0 || self.training.lm_batch_size == 0 {
            return Err(SdeError::config("batch sizes must be positive"));
        }
        if self.data.train_manifest.as_os_str().is_empty() {
            return Err(SdeError::config("data.train_manifest is required"));
        }
        match &self.provider {
            ProviderConfig::ClassEmbedding { num_classes, .. } | ProviderConfig::FrozenNet { num_classes, .. }
                if *num_classes == 0 =>
            {
                Err(SdeError::config("provider needs at least one class"))
            }
            ProviderConfig::FrozenNet { steps, batch_size, lr, .. }
                if *steps == 0 || *batch_size == 0 || *lr <= 0.0 =>
            {
                Err(SdeError::config("frozen-net teacher needs positive steps, batch size and lr"))
            }
            _ => Ok(()),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.resolve(&self.data.train_manifest)
    }

    pub fn eval_manifest(&self) -> Option<PathBuf> {
        self.data.eval_manifest.as_deref().map(|p| self.resolve(p))
    }

    pub fn check_paths(&self) -> Result<()> {
        let mut paths = vec![("data.train_manifest", self.train_manifest())];
        if let Some(p) = self.eval_manifest() {
            paths.push(("data.eval_manifest", p));
        }
        if let ProviderConfig::File { manifest } = &self.provider {
            paths.push(("provider.manifest", self.resolve(manifest)));
        }
        for (key, p) in paths {
            if !p.is_file() {
                return Err(SdeError::config(format!("{key}: {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
