//! End-to-end steps shared by the command line and the reproduction tests:
//! loading samples, building providers, training loops and corpus assembly.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversarial::PerceptualNet;
use crate::config::{determinism_mode, ExperimentConfig, ProviderConfig};
use crate::data::{DatasetManifest, ImageTensor, Sample};
use crate::error::{Result, SdeError};
use crate::lm::{
    assemble_generation, assemble_understanding, pick_instruction, ByteTokenizer, LmStepReport, LmTrainer,
    SequenceKind, SequenceSample, VocabLayout,
};
use crate::scalar::Scalar;
use crate::semantic::{
    ClassEmbeddingProvider, FileProvider, FrozenNetProvider, Provider, SemanticProvider, TargetManifest,
    TeacherTraining,
};
use crate::tokenizer::{Batch, SdeModel, StepReport, Trainer};

/// Byte-level text vocabulary size.
pub const TEXT_VOCAB: u32 = 256;

pub const UNDERSTANDING_QUESTION: &str = "What is shown in this image?";
pub const DEFAULT_CAPTION: &str = "an image";

/// Decode every image of a manifest. Outside determinism mode the decoding
/// is spread over threads; results keep manifest order either way.
pub fn load_samples<S: Scalar>(manifest: &DatasetManifest) -> Result<Vec<Sample<S>>> {
    manifest.check_paths()?;
    let decode = |i: usize| -> Result<Sample<S>> {
        let rec = &manifest.records[i];
        let image = ImageTensor::load_png(&manifest.resolve(&rec.image_path))?;
        if let Some(c) = &rec.caption {
            if c.contains('\0') {
                return Err(SdeError::invalid(format!("caption of {} contains NUL", rec.id())));
            }
        }
        Ok(Sample { id: rec.id(), image, label: rec.label, caption: rec.caption.clone() })
    };
    let n = manifest.records.len();
    let workers = std::thread::available_parallelism().map_or(1, |p| p.get()).min(n.max(1));
    if determinism_mode() || workers <= 1 {
        return (0..n).map(decode).collect();
    }
    let chunk = n.div_ceil(workers);
    let parts: Vec<Result<Vec<Sample<S>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let decode = &decode;
                scope.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(decode).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("decoder thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn load_manifest_samples<S: Scalar>(path: &Path) -> Result<Vec<Sample<S>>> {
    load_samples(&DatasetManifest::load(path)?)
}

/// Check that every image matches the tokenizer resolution.
pub fn check_image_size<S: Scalar>(samples: &[Sample<S>], size: usize) -> Result<()> {
    match samples.iter().find(|s| s.image.height() != size || s.image.width() != size) {
        Some(s) => Err(SdeError::invalid(format!(
            "image {} is {}×{}, tokenizer expects {size}×{size}",
            s.id,
            s.image.height(),
            s.image.width()
        ))),
        None => Ok(()),
    }
}

/// Build the configured provider. A frozen-net teacher is fitted on `samples` here.
pub fn build_provider<S: Scalar>(cfg: &ExperimentConfig, samples: &[Sample<S>]) -> Result<Provider<S>> {
    let grid = (cfg.tokenizer.grid(), cfg.tokenizer.grid());
    let d_sem = cfg.tokenizer.d_sem;
    Ok(match &cfg.provider {
        ProviderConfig::ClassEmbedding { num_classes, seed } => {
            Provider::ClassEmbedding(ClassEmbeddingProvider::new(*num_classes, d_sem, grid, *seed))
        }
        ProviderConfig::FrozenNet { num_classes, steps, batch_size, lr, seed } => {
            let training = TeacherTraining { steps: *steps, batch_size: *batch_size, lr: *lr, seed: *seed };
            Provider::FrozenNet(FrozenNetProvider::train(samples, *num_classes, d_sem, grid, training)?)
        }
        ProviderConfig::File { manifest } => {
            let m = TargetManifest::load(&cfg.resolve(manifest), grid, d_sem)?;
            Provider::File(FileProvider::open(&m)?)
        }
    })
}

/// Rebuild a provider from what a tokenizer checkpoint recorded.
pub fn restore_provider<S: Scalar>(
    provider: &ProviderConfig,
    teacher: Option<FrozenNetProvider<S>>,
    d_sem: usize,
    grid: (usize, usize),
) -> Result<Provider<S>> {
    Ok(match provider {
        ProviderConfig::ClassEmbedding { num_classes, seed } => {
            Provider::ClassEmbedding(ClassEmbeddingProvider::new(*num_classes, d_sem, grid, *seed))
        }
        ProviderConfig::FrozenNet { .. } => {
            Provider::FrozenNet(teacher.ok_or_else(|| SdeError::format("checkpoint lacks the frozen teacher"))?)
        }
        ProviderConfig::File { manifest } => {
            Provider::File(FileProvider::open(&TargetManifest::load(manifest, grid, d_sem)?)?)
        }
    })
}

/// The perceptual trunk: the teacher's when there is one, otherwise seeded random.
pub fn perceptual_for<S: Scalar>(provider: &Provider<S>, seed: u64) -> PerceptualNet<S> {
    match provider.frozen_net() {
        Some(t) => PerceptualNet::from_teacher(t),
        None => PerceptualNet::random(seed ^ 0x9E5C),
    }
}

/// Batch `step` takes the next `batch_size` samples in cyclic order.
pub fn batch_indices(step: usize, batch_size: usize, n: usize) -> Vec<usize> {
    (0..batch_size).map(|i| (step * batch_size + i) % n).collect()
}

/// Run tokenizer steps until `trainer.step == until`.
pub fn train_tokenizer<S: Scalar>(
    trainer: &mut Trainer<S>,
    samples: &[Sample<S>],
    provider: &dyn SemanticProvider<S>,
    batch_size: usize,
    until: usize,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    if samples.is_empty() {
        return Err(SdeError::invalid("no training samples"));
    }
    let mut log = Vec::with_capacity(until.saturating_sub(trainer.step));
    while trainer.step < until {
        let refs: Vec<&Sample<S>> =
            batch_indices(trainer.step, batch_size, samples.len()).into_iter().map(|i| &samples[i]).collect();
        let batch = Batch::from_samples(&refs, provider)?;
        let r = trainer.train_step(&batch)?;
        on_step(&r);
        log.push(r);
    }
    Ok(log)
}

pub fn text_layout(codebook_size: usize) -> Result<VocabLayout> {
    let k = u32::try_from(codebook_size).map_err(|_| SdeError::config("codebook too large for u32 ids"))?;
    VocabLayout::new(TEXT_VOCAB, k)
}

/// `[bos] instruction caption`, the prefix a generation sample is trained on.
pub fn generation_prompt(layout: &VocabLayout, instruction: &str, caption: &str) -> Vec<u32> {
    let mut ids = vec![layout.bos()];
    ids.extend(ByteTokenizer.encode(&format!("{instruction} ")));
    ids.extend(ByteTokenizer.encode(caption));
    ids
}

/// Tokenize samples and frame them as one kind of training sequence.
/// Generation samples draw their instruction from a seeded pool.
pub fn build_sequences<S: Scalar>(
    model: &SdeModel<S>,
    samples: &[Sample<S>],
    provider: &dyn SemanticProvider<S>,
    layout: &VocabLayout,
    kind: SequenceKind,
    seed: u64,
) -> Result<Vec<SequenceSample>> {
    let grids = crate::eval::tokenize_samples(model, samples, provider)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tok = ByteTokenizer;
    samples
        .iter()
        .zip(&grids)
        .map(|(s, grid)| {
            let caption = s.caption.as_deref().unwrap_or(DEFAULT_CAPTION);
            match kind {
                SequenceKind::Understanding => assemble_understanding(
                    &tok.encode(UNDERSTANDING_QUESTION),
                    &grid.codes,
                    &tok.encode(caption),
                    layout,
                ),
                SequenceKind::Generation => {
                    let instruction = pick_instruction(&mut rng);
                    assemble_generation(
                        &tok.encode(&format!("{instruction} ")),
                        &tok.encode(caption),
                        &grid.codes,
                        layout,
                    )
                }
            }
        })
        .collect()
}

/// Run LM steps until `trainer.step == until`, drawing batches cyclically.
pub fn train_lm<S: Scalar>(
    trainer: &mut LmTrainer<S>,
    corpus: &[SequenceSample],
    batch_size: usize,
    until: usize,
    mut on_step: impl FnMut(&LmStepReport),
) -> Result<Vec<LmStepReport>> {
    if corpus.is_empty() {
        return Err(SdeError::invalid("empty training corpus"));
    }
    let mut log = Vec::new();
    while trainer.step < until {
        let batch: Vec<SequenceSample> =
            batch_indices(trainer.step, batch_size, corpus.len()).into_iter().map(|i| corpus[i].clone()).collect();
        let r = trainer.train_step(&batch)?;
        on_step(&r);
        log.push(r);
    }
    Ok(log)
}
