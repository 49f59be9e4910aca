use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use sde_core::checkpoint::{
    load_tokenizer, load_vlm, save_tokenizer, save_vlm, LoadedTokenizer, TokenizerState, VlmState,
};
use sde_core::config::{determinism_mode, ExperimentConfig, ProviderConfig};
use sde_core::data::ToyDataset;
use sde_core::eval::{
    evaluate_reconstruction, linear_probe, patch_mosaic, pooled_embeddings, tokenize_samples, CodeIndex, ProbeConfig,
};
use sde_core::lm::{
    generate_image_tokens, read_token_cache, validate_corpus, write_token_cache, ArModel, LmTrainer, SamplerConfig,
    SequenceKind, GENERATION_INSTRUCTIONS,
};
use sde_core::pipeline::{
    build_provider, build_sequences, check_image_size, generation_prompt, load_manifest_samples, perceptual_for,
    restore_provider, text_layout, train_lm, train_tokenizer,
};
use sde_core::semantic::{Provider, SemanticProvider};
use sde_core::tokenizer::{SdeModel, Trainer};
use sde_core::vq::{codebook_stats, CodeGrid};
use sde_core::SdeError;

#[derive(Parser)]
#[command(name = "sde", version, about = "Semantic discrete encoding tokenizer and unified AR model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Generation,
    Understanding,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the procedural shapes dataset and a starter config.
    MakeToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the tokenizer; writes tokenizer.ckpt and loss_log.json into --out.
    TrainTokenizer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to optimizer.total_steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from an earlier checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Tokenize a manifest into an SDETOK01 cache.
    Tokenize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_cache: PathBuf,
        #[arg(long, value_enum, default_value_t = Kind::Generation)]
        kind: Kind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the AR model over token caches; writes vlm.ckpt and loss_log.json into --out.
    TrainVlm {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tokenizer_ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        caches: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to lm_optimizer.total_steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample one image from a caption.
    Generate {
        #[arg(long)]
        vlm_ckpt: PathBuf,
        #[arg(long)]
        tokenizer_ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_image: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 50)]
        top_k: usize,
    },
    /// Tokenize and decode every image of a manifest.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Reconstruction metrics, codebook statistics and (with labels) a linear probe, as JSON.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a patch mosaic for each of the most frequent codes.
    InspectCodes {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 16)]
        top: usize,
        #[arg(long, default_value_t = 64)]
        max_patches: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(se) = cause.downcast_ref::<SdeError>() {
            return match se {
                SdeError::Config(_) => 2,
                SdeError::Divergence { .. } => 3,
                SdeError::Io(_) => 4,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    1
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::MakeToyData { out, count, size, seed } => make_toy_data(&out, count, size, seed),
        Cmd::TrainTokenizer { config, out, seed, steps, resume } => {
            train_tokenizer_cmd(&config, &out, seed, steps, resume.as_deref())
        }
        Cmd::Tokenize { checkpoint, manifest, out_cache, kind, seed } => {
            tokenize_cmd(&checkpoint, &manifest, &out_cache, kind, seed)
        }
        Cmd::TrainVlm { config, tokenizer_ckpt, caches, out, seed, steps, resume } => {
            train_vlm_cmd(&config, &tokenizer_ckpt, &caches, &out, seed, steps, resume.as_deref())
        }
        Cmd::Generate { vlm_ckpt, tokenizer_ckpt, prompt, seed, out_image, temperature, top_k } => {
            generate_cmd(&vlm_ckpt, &tokenizer_ckpt, &prompt, SamplerConfig { temperature, top_k, seed }, &out_image)
        }
        Cmd::Reconstruct { checkpoint, manifest, out_dir } => reconstruct_cmd(&checkpoint, &manifest, &out_dir),
        Cmd::Evaluate { checkpoint, manifest, out, seed } => evaluate_cmd(&checkpoint, &manifest, out.as_deref(), seed),
        Cmd::InspectCodes { checkpoint, manifest, out_dir, top, max_patches } => {
            inspect_cmd(&checkpoint, &manifest, &out_dir, top, max_patches)
        }
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)
        .map_err(SdeError::from)
        .with_context(|| format!("writing {}", path.display()))
}

fn make_toy_data(out: &Path, count: usize, size: usize, seed: u64) -> anyhow::Result<()> {
    if count == 0 || size < 8 {
        return Err(SdeError::config("need at least one image of at least 8×8").into());
    }
    let manifest = ToyDataset::new(size, seed).write(out, count)?;
    let cfg = ExperimentConfig {
        seed,
        tokenizer: sde_core::tokenizer::SdeConfig { image_size: size, ..Default::default() },
        data: sde_core::config::DataConfig { train_manifest: "manifest.jsonl".into(), eval_manifest: None },
        ..Default::default()
    };
    std::fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(SdeError::from)?;
    println!("{}", json!({ "manifest": manifest, "images": count, "config": out.join("config.toml") }));
    Ok(())
}

/// Provider choice with any file path made absolute, so checkpoints stay usable elsewhere.
fn portable_provider(cfg: &ExperimentConfig) -> ProviderConfig {
    match &cfg.provider {
        ProviderConfig::File { manifest } => {
            let p = cfg.resolve(manifest);
            ProviderConfig::File { manifest: std::fs::canonicalize(&p).unwrap_or(p) }
        }
        other => other.clone(),
    }
}

fn train_tokenizer_cmd(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    steps: Option<usize>,
    resume: Option<&Path>,
) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let steps = steps.unwrap_or(cfg.optimizer.total_steps);
    let samples = load_manifest_samples::<f32>(&cfg.train_manifest())?;
    check_image_size(&samples, cfg.tokenizer.image_size)?;
    let grid = (cfg.tokenizer.grid(), cfg.tokenizer.grid());

    let (mut trainer, provider, state, config_hash) = match resume {
        Some(path) => {
            let LoadedTokenizer { trainer, teacher, state, meta } = load_tokenizer::<f32>(path)?;
            if meta.seed != seed {
                eprintln!("note: resuming with the checkpoint seed {}", meta.seed);
            }
            let provider = restore_provider(&state.provider, teacher, state.tokenizer.d_sem, grid)?;
            (trainer, provider, state, meta.config_hash)
        }
        None => {
            let provider = build_provider(&cfg, &samples)?;
            let model = SdeModel::new(&cfg.tokenizer, seed)?;
            let trainer = Trainer::new(model, perceptual_for(&provider, seed), &cfg.optimizer, seed)?;
            let state = TokenizerState {
                tokenizer: cfg.tokenizer.clone(),
                optimizer: cfg.optimizer.clone(),
                provider: portable_provider(&cfg),
                teacher_grid: provider.frozen_net().map(|_| grid),
            };
            (trainer, provider, state, cfg.hash())
        }
    };
    let provider_hash = provider.param_hash();
    std::fs::create_dir_all(out).map_err(SdeError::from)?;
    let log_every = cfg.training.log_every.max(1);
    let log = train_tokenizer(&mut trainer, &samples, &provider, cfg.training.batch_size, steps, |r| {
        if r.step % log_every == 0 {
            eprintln!(
                "step {:>5} lr {:.2e} total {:.4} l2 {:.4} perc {:.4} sem {:.4} vq {:.4} gen {:.4}",
                r.step,
                r.lr,
                r.losses.l_total,
                r.losses.l_l2,
                r.losses.l_perceptual,
                r.losses.l_sem,
                r.losses.l_vq,
                r.losses.l_gen
            );
        }
    })?;
    if provider.param_hash() != provider_hash {
        bail!("semantic provider parameters changed during training");
    }
    let ckpt = out.join("tokenizer.ckpt");
    let meta = save_tokenizer(&ckpt, &trainer, provider.frozen_net(), &state, &config_hash)?;
    let log_json = json!({
        "config_hash": config_hash,
        "seed": meta.seed,
        "deterministic": determinism_mode(),
        "provider_hash": provider_hash,
        "steps": log,
    });
    write_json(&out.join("loss_log.json"), &log_json)?;
    println!("{}", json!({ "checkpoint": ckpt, "step": meta.step, "content_hash": meta.content_hash }));
    Ok(())
}

struct Tok {
    model: SdeModel<f32>,
    provider: Provider<f32>,
    loaded: LoadedTokenizer<f32>,
}

fn open_tokenizer(path: &Path) -> anyhow::Result<Tok> {
    let loaded = load_tokenizer::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = &loaded.state.tokenizer;
    let grid = (cfg.grid(), cfg.grid());
    let provider = restore_provider(&loaded.state.provider, loaded.teacher.clone(), cfg.d_sem, grid)?;
    Ok(Tok { model: loaded.trainer.model.clone(), provider, loaded })
}

fn manifest_samples(tok: &Tok, manifest: &Path) -> anyhow::Result<Vec<sde_core::data::Sample<f32>>> {
    let samples = load_manifest_samples::<f32>(manifest)?;
    check_image_size(&samples, tok.model.cfg.image_size)?;
    Ok(samples)
}

fn tokenize_cmd(checkpoint: &Path, manifest: &Path, out_cache: &Path, kind: Kind, seed: u64) -> anyhow::Result<()> {
    let tok = open_tokenizer(checkpoint)?;
    let samples = manifest_samples(&tok, manifest)?;
    let layout = text_layout(tok.model.cfg.codebook_size)?;
    let kind = match kind {
        Kind::Generation => SequenceKind::Generation,
        Kind::Understanding => SequenceKind::Understanding,
    };
    let seqs = build_sequences(&tok.model, &samples, &tok.provider, &layout, kind, seed)?;
    let grid_len = tok.model.cfg.grid() * tok.model.cfg.grid();
    validate_corpus(&seqs, &layout, grid_len)?;
    write_token_cache(out_cache, &seqs)?;
    let codes = seqs.iter().flat_map(|s| s.image_codes(&layout).unwrap_or_default());
    let stats = codebook_stats(codes, tok.model.cfg.codebook_size)?;
    let report = json!({
        "cache": out_cache,
        "records": seqs.len(),
        "kind": kind,
        "usage_fraction": stats.usage_fraction,
        "perplexity": stats.perplexity,
        "config_hash": tok.loaded.meta.config_hash,
        "tokenizer_hash": tok.loaded.meta.content_hash,
        "seed": seed,
    });
    let mut side = out_cache.as_os_str().to_owned();
    side.push(".json");
    write_json(Path::new(&side), &report)?;
    println!("{report}");
    Ok(())
}

fn train_vlm_cmd(
    config: &Path,
    tokenizer_ckpt: &Path,
    caches: &[PathBuf],
    out: &Path,
    seed: Option<u64>,
    steps: Option<usize>,
    resume: Option<&Path>,
) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let steps = steps.unwrap_or(cfg.lm_optimizer.total_steps);
    let tok = load_tokenizer::<f32>(tokenizer_ckpt)?;
    let tcfg = &tok.state.tokenizer;
    let layout = text_layout(tcfg.codebook_size)?;
    let grid_len = tcfg.grid() * tcfg.grid();
    let mut corpus = Vec::new();
    for c in caches {
        let part = read_token_cache(c).with_context(|| format!("reading {}", c.display()))?;
        validate_corpus(&part, &layout, grid_len).with_context(|| format!("validating {}", c.display()))?;
        let mut side = c.as_os_str().to_owned();
        side.push(".json");
        if let Ok(bytes) = std::fs::read(&side) {
            let made_by = serde_json::from_slice::<serde_json::Value>(&bytes)
                .ok()
                .and_then(|v| v["tokenizer_hash"].as_str().map(String::from));
            if made_by.is_some_and(|h| h != tok.meta.content_hash) {
                eprintln!("warning: {} was tokenized with a different tokenizer checkpoint", c.display());
            }
        }
        corpus.extend(part);
    }
    if let Some(s) = corpus.iter().find(|s| s.len() > cfg.lm.context) {
        return Err(
            SdeError::config(format!("sequence of {} tokens exceeds lm.context {}", s.len(), cfg.lm.context)).into()
        );
    }
    let mut trainer = match resume {
        Some(p) => {
            let loaded = load_vlm::<f32>(p)?;
            if loaded.state.layout != layout {
                bail!("resumed model vocabulary does not match the tokenizer");
            }
            loaded.trainer
        }
        None => {
            let base = ArModel::<f32>::new(&cfg.lm, layout.text_size as usize, seed)?;
            let model = ArModel::extend_embeddings(&base, &layout, seed ^ 0xE1)?;
            LmTrainer::new(model, layout, &cfg.lm_optimizer)?
        }
    };
    std::fs::create_dir_all(out).map_err(SdeError::from)?;
    let log_every = cfg.training.log_every.max(1);
    let log = train_lm(&mut trainer, &corpus, cfg.training.lm_batch_size, steps, |r| {
        if r.step % log_every == 0 {
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            eprintln!(
                "step {:>5} lr {:.2e} loss {:.4} und {} gen {}",
                r.step,
                r.lr,
                r.loss,
                fmt(r.loss_understanding),
                fmt(r.loss_generation)
            );
        }
    })?;
    let state = VlmState {
        lm: trainer.model.cfg.clone(),
        optimizer: cfg.lm_optimizer.clone(),
        layout,
        grid: (tcfg.grid(), tcfg.grid()),
        image_size: tcfg.image_size,
        tokenizer_hash: tok.meta.content_hash.clone(),
    };
    let ckpt = out.join("vlm.ckpt");
    let meta = save_vlm(&ckpt, &trainer, &state, seed, &cfg.hash())?;
    write_json(
        &out.join("loss_log.json"),
        &json!({
            "config_hash": meta.config_hash,
            "seed": seed,
            "deterministic": determinism_mode(),
            "ln_vocab": (layout.total() as f64).ln(),
            "steps": log,
        }),
    )?;
    println!("{}", json!({ "checkpoint": ckpt, "step": meta.step, "records": corpus.len() }));
    Ok(())
}

fn generate_cmd(
    vlm_ckpt: &Path,
    tokenizer_ckpt: &Path,
    prompt: &str,
    sampler: SamplerConfig,
    out_image: &Path,
) -> anyhow::Result<()> {
    let vlm = load_vlm::<f32>(vlm_ckpt)?;
    let tok = open_tokenizer(tokenizer_ckpt)?;
    if vlm.state.tokenizer_hash != tok.loaded.meta.content_hash {
        eprintln!("warning: the AR model was trained on codes from a different tokenizer checkpoint");
    }
    let layout = vlm.state.layout;
    if layout.codebook_size as usize != tok.model.cfg.codebook_size {
        return Err(SdeError::config("AR model and tokenizer disagree on the codebook size").into());
    }
    let (h, w) = vlm.state.grid;
    let ids = generation_prompt(&layout, GENERATION_INSTRUCTIONS[0], prompt);
    let gen = generate_image_tokens(&vlm.trainer.model, &ids, &layout, h * w, &sampler)?;
    let grid = CodeGrid::new(h, w, gen.codes.clone())?;
    let image = tok.model.reconstruct(&grid)?;
    image.save_png(out_image)?;
    println!(
        "{}",
        json!({
            "image": out_image,
            "codes": gen.codes,
            "seed": sampler.seed,
            "config_hash": vlm.meta.config_hash,
        })
    );
    Ok(())
}

fn reconstruct_cmd(checkpoint: &Path, manifest: &Path, out_dir: &Path) -> anyhow::Result<()> {
    let tok = open_tokenizer(checkpoint)?;
    let samples = manifest_samples(&tok, manifest)?;
    let grids = tokenize_samples(&tok.model, &samples, &tok.provider)?;
    std::fs::create_dir_all(out_dir).map_err(SdeError::from)?;
    for (chunk_s, chunk_g) in samples.chunks(32).zip(grids.chunks(32)) {
        let recon = tok.model.reconstruct_batch(&chunk_g.iter().collect::<Vec<_>>())?;
        for (s, img) in chunk_s.iter().zip(recon) {
            img.save_png(&out_dir.join(format!("{}.png", s.id)))?;
        }
    }
    println!("{}", json!({ "out_dir": out_dir, "images": samples.len() }));
    Ok(())
}

fn evaluate_cmd(checkpoint: &Path, manifest: &Path, out: Option<&Path>, seed: u64) -> anyhow::Result<()> {
    let tok = open_tokenizer(checkpoint)?;
    let samples = manifest_samples(&tok, manifest)?;
    let recon =
        evaluate_reconstruction(&tok.model, &samples, &tok.provider, Some(&tok.loaded.trainer.perceptual), seed)?;
    let grids = tokenize_samples(&tok.model, &samples, &tok.provider)?;
    let stats = codebook_stats(grids.iter().flat_map(|g| g.codes.iter().copied()), tok.model.cfg.codebook_size)?;
    let labels: Option<Vec<usize>> = samples.iter().map(|s| s.label).collect();
    let probe = match labels {
        Some(labels) if samples.len() >= 4 => {
            let classes = labels.iter().max().map_or(0, |m| m + 1);
            let feats = pooled_embeddings(&tok.model, &grids)?;
            match linear_probe(&feats, &labels, classes, &ProbeConfig { seed, ..Default::default() }) {
                Ok(acc) => Some(acc),
                Err(SdeError::InvalidInput(_)) => None,
                Err(e) => return Err(e.into()),
            }
        }
        _ => None,
    };
    let report = json!({
        "images": recon.images,
        "reconstruction": recon.model,
        "random_baseline": recon.random_baseline,
        "codebook": { "usage_fraction": stats.usage_fraction, "perplexity": stats.perplexity },
        "probe_accuracy": probe,
        "config_hash": tok.loaded.meta.config_hash,
        "tokenizer_hash": tok.loaded.meta.content_hash,
        "seed": seed,
    });
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn inspect_cmd(
    checkpoint: &Path,
    manifest: &Path,
    out_dir: &Path,
    top: usize,
    max_patches: usize,
) -> anyhow::Result<()> {
    let tok = open_tokenizer(checkpoint)?;
    let samples = manifest_samples(&tok, manifest)?;
    let grids = tokenize_samples(&tok.model, &samples, &tok.provider)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let index = CodeIndex::build(&ids, &grids)?;
    let images: BTreeMap<String, _> = samples.iter().map(|s| (s.id.clone(), &s.image)).collect();
    std::fs::create_dir_all(out_dir).map_err(SdeError::from)?;
    let patch = tok.model.cfg.downsample;
    let mut written = Vec::new();
    for (code, count) in index.by_frequency().into_iter().take(top) {
        let mosaic = patch_mosaic(&index.codes[&code], &images, patch, max_patches)?;
        let path = out_dir.join(format!("code_{code:05}.png"));
        mosaic.save_png(&path)?;
        written.push(json!({ "code": code, "patches": count, "mosaic": path }));
    }
    let report = json!({
        "codes": written,
        "total_patches": index.total_patches(),
        "distinct_codes": index.codes.len(),
        "config_hash": tok.loaded.meta.config_hash,
    });
    write_json(&out_dir.join("index.json"), &report)?;
    println!("{report}");
    Ok(())
}
