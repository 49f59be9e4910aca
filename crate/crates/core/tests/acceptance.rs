//! Acceptance suite. Each criterion prints one PASS or FAIL line; the target
//! exits non-zero if any criterion failed. Built without the libtest harness so
//! the lines show under a plain `cargo test`.
//!
//! Run alone with `cargo test -p sde-core --test acceptance`; `SDE_ACCEPTANCE_ONLY=1,3` picks criteria.

// `ensure!` negates comparisons on purpose so that NaN fails
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sde_core::adversarial::{PatchDiscriminator, PerceptualNet};
use sde_core::autograd::Graph;
use sde_core::checkpoint::{
    load_tokenizer, load_vlm, save_tokenizer, save_vlm, tokenizer_archive, TokenizerState, VlmState,
};
use sde_core::config::ProviderConfig;
use sde_core::data::{Sample, ToyDataset};
use sde_core::eval::{evaluate_reconstruction, linear_probe, pooled_embeddings, tokenize_samples, ProbeConfig};
use sde_core::lm::{
    assemble_generation, assemble_understanding, generate_image_tokens, lm_loss, read_token_cache, validate_sequence,
    write_token_cache, ArModel, LmConfig, LmTrainer, SamplerConfig, SequenceKind, SequenceSample, VocabLayout,
};
use sde_core::optim::OptimizerConfig;
use sde_core::pipeline::train_tokenizer;
use sde_core::semantic::{
    read_target_file, write_target_file, ClassEmbeddingProvider, FrozenNetProvider, SemanticProvider, SemanticTarget,
    TeacherTraining,
};
use sde_core::tensor::Tensor;
use sde_core::tokenizer::{semantic_loss_rows, Batch, LossContext, LossReport, SdeConfig, SdeModel, TermVars, Trainer};
use sde_core::vq::{quantize, vq_loss, Codebook, FeatureGrid};

// Criterion 1
const QUANT_INSTANCES: usize = 200;
const QUANT_BUDGET: Duration = Duration::from_secs(10);
// Criterion 2
const GRAD_RTOL: f64 = 1e-3;
const GRAD_RTOL_VQ: f64 = 1e-4;
/// Absolute floor for entries whose true gradient is (near) zero.
const GRAD_ATOL: f64 = 1e-8;
const FD_STEP: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
// Criterion 3
const SEM_SAMPLES: usize = 1000;
const IDENTITY_TOL: f64 = 1e-6;
// Criterion 4
const PROBE_MARGIN: f64 = 0.10;
const PROBE_STEPS: usize = 300;
const PROBE_TRAIN_IMAGES: usize = 256;
const PROBE_EVAL_IMAGES: usize = 400;
const PROBE_BUDGET: Duration = Duration::from_secs(20 * 60);
// Criterion 5
const TOY_STEPS: usize = 2000;
const TOY_TRAIN_IMAGES: usize = 256;
const TOY_EVAL_IMAGES: usize = 64;
const PSNR_MARGIN_DB: f64 = 5.0;
// Criterion 6
const GENERATIONS: usize = 100;
// Criterion 7
const LM_BATCHES: usize = 50;
const LM_TOL: f64 = 1e-6;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Debug>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| format!("{e:?}"))
}

/// Miniature tokenizer used by the gradient, identity and determinism checks.
fn mini_config() -> SdeConfig {
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

fn mini_batch<S: sde_core::scalar::Scalar>(cfg: &SdeConfig, first: usize, n: usize) -> Batch<S> {
    let ds = ToyDataset::new(cfg.image_size, 11);
    let samples: Vec<Sample<S>> = ds.samples(first..first + n);
    let provider = ClassEmbeddingProvider::<S>::new(10, cfg.d_sem, (cfg.grid(), cfg.grid()), 4);
    Batch::from_samples(&samples.iter().collect::<Vec<_>>(), &provider).unwrap()
}

// ---------------------------------------------------------------- 1

/// Every distance, then the first index attaining the minimum.
fn brute_force_code(v: &[f64], entries: &[Vec<f64>]) -> usize {
    let dists: Vec<f64> = entries.iter().map(|e| e.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
    let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&d| d == min).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut cells, mut ties) = (0usize, 0usize);
    for inst in 0..QUANT_INSTANCES {
        let k = rng.random_range(1..=64);
        let d = rng.random_range(1..=16);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        // a third of the instances use small integers so exact ties occur
        let integer = inst % 3 == 0;
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            if integer {
                rng.random_range(-2..=2) as f64
            } else {
                rng.random_range(-3.0..3.0)
            }
        };
        let mut entries: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| draw(&mut rng)).collect()).collect();
        if k > 2 && inst % 5 == 0 {
            entries[k - 1] = entries[0].clone();
        }
        let values: Vec<f64> = (0..h * w * d).map(|_| draw(&mut rng)).collect();
        let cb = ok(Codebook::new(ok(Tensor::from_vec(&[k, d], entries.concat()))?))?;
        let grid = ok(FeatureGrid::new(h, w, d, values.clone()))?;
        let res = ok(quantize(&grid, &cb, 0.25))?;
        for (cell, v) in values.chunks(d).enumerate() {
            let expect = brute_force_code(v, &entries);
            let got = res.codes.codes[cell] as usize;
            ensure!(got == expect, "instance {inst} cell {cell}: quantize chose {got}, brute force {expect}");
            ensure!(
                res.quantized.values[cell * d..(cell + 1) * d] == entries[expect][..],
                "instance {inst}: wrong z_q row"
            );
            let dists: Vec<f64> =
                entries.iter().map(|e| e.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
            if dists.iter().filter(|&&x| x == dists[expect]).count() > 1 {
                ties += 1;
            }
            cells += 1;
        }
        let sq: f64 = values
            .chunks(d)
            .zip(res.codes.codes.iter())
            .map(|(v, &c)| v.iter().zip(&entries[c as usize]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum::<f64>()
            / (h * w) as f64;
        ensure!(
            (vq_loss(&res) - 1.25 * sq).abs() <= 1e-9 * (1.0 + sq),
            "instance {inst}: vq loss {} vs {}",
            vq_loss(&res),
            1.25 * sq
        );
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < QUANT_BUDGET, "took {elapsed:?}");
    Ok(format!("{QUANT_INSTANCES} instances, {cells} cells ({ties} tied) all match brute force in {elapsed:.2?}"))
}

// ---------------------------------------------------------------- 2

#[derive(Clone, Copy, Debug)]
enum Term {
    Vq,
    Sem,
    Perceptual,
    Total,
}

impl Term {
    fn var(self, t: &TermVars, total: sde_core::autograd::Var) -> sde_core::autograd::Var {
        match self {
            Term::Vq => t.l_vq,
            Term::Sem => t.l_sem,
            Term::Perceptual => t.l_perceptual,
            Term::Total => total,
        }
    }

    fn value(self, r: &LossReport) -> f64 {
        match self {
            Term::Vq => r.l_vq,
            Term::Sem => r.l_sem,
            Term::Perceptual => r.l_perceptual,
            Term::Total => r.l_total,
        }
    }

    fn rtol(self) -> f64 {
        match self {
            Term::Vq => GRAD_RTOL_VQ,
            _ => GRAD_RTOL,
        }
    }
}

const TERMS: [Term; 4] = [Term::Vq, Term::Sem, Term::Perceptual, Term::Total];

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let cfg = mini_config();
    let mut model = ok(SdeModel::<f64>::new(&cfg, 5))?;
    let perceptual = PerceptualNet::<f64>::random(6);
    let disc = PatchDiscriminator::<f64>::new(cfg.disc_channels, cfg.disc_layers, 7);
    let ctx = LossContext { disc: &disc, perceptual: &perceptual };
    let batch = mini_batch::<f64>(&cfg, 0, 2);
    let step = cfg.disc_start; // adversarial term active, so the total covers every term

    let g = Graph::new();
    let (fwd, report, anchor) = ok(model.forward(&g, true, &batch, &ctx, step, None))?;
    ensure!(report.lambda_g > 0.0, "adversarial term inactive");
    let analytic: Vec<Vec<Option<Tensor<f64>>>> =
        TERMS.iter().map(|t| g.backward(t.var(&fwd.terms, fwd.total)).for_params(&fwd.params)).collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ids: Vec<_> = model.store.ids().collect();
    let mut worst = [0.0f64; 4];
    let mut checked = 0usize;
    let mut nonzero = [0usize; 4];
    for &id in &ids {
        let n = model.store.get(id).numel();
        let picks: Vec<usize> =
            if n <= 8 { (0..n).collect() } else { (0..8).map(|_| rng.random_range(0..n)).collect() };
        for i in picks {
            let base = model.store.get(id).data()[i];
            let mut eval = |v: f64| -> Result<LossReport, String> {
                model.store.get_mut(id).data_mut()[i] = v;
                let g = Graph::no_grad();
                Ok(ok(model.forward(&g, false, &batch, &ctx, step, Some(&anchor)))?.1)
            };
            let plus = eval(base + FD_STEP)?;
            let minus = eval(base - FD_STEP)?;
            model.store.get_mut(id).data_mut()[i] = base;
            for (ti, term) in TERMS.iter().enumerate() {
                let numeric = (term.value(&plus) - term.value(&minus)) / (2.0 * FD_STEP);
                let a = analytic[ti][id.index()].as_ref().map_or(0.0, |t| t.data()[i]);
                let err = (a - numeric).abs();
                let scale = a.abs().max(numeric.abs());
                ensure!(
                    err <= term.rtol() * scale + GRAD_ATOL,
                    "{term:?} d/d {}[{i}]: analytic {a:e}, finite difference {numeric:e}",
                    model.store.name(id)
                );
                if scale > 1e-6 {
                    worst[ti] = worst[ti].max(err / scale);
                    nonzero[ti] += 1;
                }
            }
            checked += 1;
        }
    }
    ensure!(nonzero.iter().all(|&c| c > 10), "too few non-trivial gradient entries: {nonzero:?}");
    let elapsed = start.elapsed();
    ensure!(elapsed < GRAD_BUDGET, "took {elapsed:?}");
    Ok(format!(
        "{checked} entries x 4 terms; worst relative error vq {:.1e} sem {:.1e} perceptual {:.1e} total {:.1e} in {elapsed:.2?}",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

// ---------------------------------------------------------------- 3

fn sem_loss_f64(decoded: &[f64], target: &[f64], d: usize) -> f64 {
    let g = Graph::<f64>::no_grad();
    let a = g.constant(Tensor::from_vec(&[decoded.len() / d, d], decoded.to_vec()).unwrap());
    let b = g.constant(Tensor::from_vec(&[target.len() / d, d], target.to_vec()).unwrap());
    g.item(semantic_loss_rows(&g, a, b))
}

fn sem_loss_f32(decoded: &[f64], target: &[f64], d: usize) -> f64 {
    let g = Graph::<f32>::no_grad();
    let cast = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
    let a = g.constant(Tensor::from_vec(&[decoded.len() / d, d], cast(decoded)).unwrap());
    let b = g.constant(Tensor::from_vec(&[target.len() / d, d], cast(target)).unwrap());
    g.item(semantic_loss_rows(&g, a, b)) as f64
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut worst_same = 0.0f64;
    let mut worst_opp = 0.0f64;
    for i in 0..SEM_SAMPLES {
        let d = rng.random_range(1..=32);
        let rows = rng.random_range(1..=6);
        let scale = 10f64.powi(rng.random_range(-6..=6));
        // magnitudes bounded away from zero so every row has a well-defined direction
        let t: Vec<f64> = (0..rows * d)
            .map(|_| rng.random_range(0.1..1.0) * scale * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        // plain random pairs, positive multiples and negative multiples
        let x: Vec<f64> = match i % 3 {
            0 => (0..rows * d).map(|_| rng.random_range(-1.0..1.0) * scale).collect(),
            1 => t.iter().map(|v| v * rng.random_range(0.01..100.0)).collect(),
            _ => t.iter().map(|v| -v * rng.random_range(0.01..100.0)).collect(),
        };
        for l in [sem_loss_f64(&x, &t, d), sem_loss_f32(&x, &t, d)] {
            ensure!((0.0..=2.0).contains(&l), "L_sem = {l} outside [0, 2] (d={d}, scale={scale:e})");
            lo = lo.min(l);
            hi = hi.max(l);
        }
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        for l in [sem_loss_f64(&t, &t, d), sem_loss_f32(&t, &t, d)] {
            worst_same = worst_same.max(l.abs());
        }
        for l in [sem_loss_f64(&neg, &t, d), sem_loss_f32(&neg, &t, d)] {
            worst_opp = worst_opp.max((l - 2.0).abs());
        }
    }
    ensure!(worst_same <= IDENTITY_TOL, "L_sem(T, T) off by {worst_same:e}");
    ensure!(worst_opp <= IDENTITY_TOL, "L_sem(-T, T) off by {worst_opp:e}");

    // loss report composition, with and without the adversarial term
    let cfg = mini_config();
    let perceptual = PerceptualNet::<f64>::random(1);
    let disc = PatchDiscriminator::<f64>::new(cfg.disc_channels, cfg.disc_layers, 2);
    let ctx = LossContext { disc: &disc, perceptual: &perceptual };
    let mut worst_identity = 0.0f64;
    let mut worst_l2 = 0.0f64;
    for trial in 0..20u64 {
        let cfg = SdeConfig { disc_start: 5, w_sem: 0.5 + trial as f64 * 0.1, ..cfg.clone() };
        let model = ok(SdeModel::<f64>::new(&cfg, trial))?;
        let batch = mini_batch::<f64>(&cfg, trial as usize * 3, 3);
        let step = trial as usize % 10;
        let r = ok(model.total_loss(&batch, &ctx, step))?;
        let gan = step >= cfg.disc_start;
        ensure!(gan == (r.lambda_g > 0.0), "lambda_g {} at step {step}", r.lambda_g);
        ensure!(gan || r.l_gen == 0.0, "l_gen reported before the adversarial phase");
        let recomposed = cfg.w_sem * r.l_sem + r.l_l2 + r.l_perceptual + r.lambda_g * r.l_gen + r.l_vq;
        worst_identity = worst_identity.max((r.l_total - recomposed).abs());
        worst_identity = worst_identity.max((r.l_vq - (r.codebook_loss + cfg.beta * r.commitment_loss)).abs());
        // l_l2 against an independent pixel MSE of the decoded codes
        let imgs: Vec<_> = (0..3).map(|i| ToyDataset::new(16, 11).sample::<f64>(trial as usize * 3 + i)).collect();
        let provider = ClassEmbeddingProvider::<f64>::new(10, cfg.d_sem, (2, 2), 4);
        let grids = ok(tokenize_samples(&model, &imgs, &provider))?;
        let recon = ok(model.reconstruct_batch(&grids.iter().collect::<Vec<_>>()))?;
        let mut se = 0.0;
        let mut n = 0.0;
        for (s, r) in imgs.iter().zip(&recon) {
            for (a, b) in s.image.pixels().iter().zip(r.pixels()) {
                se += (a - b) * (a - b);
                n += 1.0;
            }
        }
        worst_l2 = worst_l2.max((se / n - r.l_l2).abs());
    }
    ensure!(worst_identity <= IDENTITY_TOL, "composition residual {worst_identity:e}");
    ensure!(worst_l2 <= IDENTITY_TOL, "l_l2 differs from pixel MSE by {worst_l2:e}");
    Ok(format!(
        "L_sem range [{lo:.3}, {hi:.3}] over {SEM_SAMPLES} inputs; |L(T,T)| {worst_same:.1e}, |L(-T,T)-2| {worst_opp:.1e}; composition residual {worst_identity:.1e}"
    ))
}

// ---------------------------------------------------------------- 4

struct ToyRun {
    model: SdeModel<f32>,
    secs: f64,
}

fn train_toy(
    cfg: &SdeConfig,
    opt: &OptimizerConfig,
    samples: &[Sample<f32>],
    provider: &ClassEmbeddingProvider<f32>,
    steps: usize,
    seed: u64,
) -> Result<ToyRun, String> {
    let start = Instant::now();
    let model = ok(SdeModel::new(cfg, seed))?;
    let mut trainer = ok(Trainer::new(model, PerceptualNet::random(seed ^ 0x9E5C), opt, seed))?;
    ok(train_tokenizer(&mut trainer, samples, provider, 4, steps, |_| {}))?;
    Ok(ToyRun { model: trainer.model, secs: start.elapsed().as_secs_f64() })
}

fn probe_accuracy(
    model: &SdeModel<f32>,
    samples: &[Sample<f32>],
    provider: &ClassEmbeddingProvider<f32>,
) -> Result<f64, String> {
    let grids = ok(tokenize_samples(model, samples, provider))?;
    let feats = ok(pooled_embeddings(model, &grids))?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label.unwrap()).collect();
    ok(linear_probe(&feats, &labels, 10, &ProbeConfig::default()))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let ds = ToyDataset::new(64, 0);
    let train: Vec<Sample<f32>> = ds.samples(0..PROBE_TRAIN_IMAGES);
    let held_out: Vec<Sample<f32>> = ds.samples(1000..1000 + PROBE_EVAL_IMAGES);
    let sde_cfg = SdeConfig { disc_start: PROBE_STEPS, ..Default::default() };
    let plain_cfg = sde_cfg.plain_vq();
    let provider = ClassEmbeddingProvider::<f32>::new(10, sde_cfg.d_sem, (8, 8), 1);
    let opt =
        OptimizerConfig { lr: 1e-3, warmup_steps: PROBE_STEPS / 20, total_steps: PROBE_STEPS, ..Default::default() };
    let sde = train_toy(&sde_cfg, &opt, &train, &provider, PROBE_STEPS, 0)?;
    let plain = train_toy(&plain_cfg, &opt, &train, &provider, PROBE_STEPS, 0)?;
    let acc_sde = probe_accuracy(&sde.model, &held_out, &provider)?;
    let acc_plain = probe_accuracy(&plain.model, &held_out, &provider)?;
    let elapsed = start.elapsed();
    let detail = format!(
        "probe accuracy SDE {acc_sde:.3} vs plain VQ {acc_plain:.3} (gap {:.3}); training {:.0}s + {:.0}s, total {elapsed:.0?}",
        acc_sde - acc_plain,
        sde.secs,
        plain.secs
    );
    ensure!(acc_sde - acc_plain >= PROBE_MARGIN, "{detail}");
    ensure!(elapsed < PROBE_BUDGET, "over budget: {detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let ds = ToyDataset::new(64, 0);
    let train: Vec<Sample<f32>> = ds.samples(0..TOY_TRAIN_IMAGES);
    let cfg = SdeConfig { disc_start: TOY_STEPS / 5, restart_dead_codes: true, ..Default::default() };
    let provider = ClassEmbeddingProvider::<f32>::new(10, cfg.d_sem, (8, 8), 1);
    let opt = OptimizerConfig { lr: 1e-3, warmup_steps: TOY_STEPS / 20, total_steps: TOY_STEPS, ..Default::default() };
    let run = train_toy(&cfg, &opt, &train, &provider, TOY_STEPS, 0)?;
    let held_in = &train[..TOY_EVAL_IMAGES];
    let report = ok(evaluate_reconstruction(&run.model, held_in, &provider, None, 42))?;
    let (m, b) = (report.model, report.random_baseline);
    let detail = format!(
        "PSNR {:.2} dB vs random baseline {:.2} dB (+{:.2}); SSIM {:.3} vs {:.3}; {TOY_STEPS} steps in {:.0}s",
        m.psnr,
        b.psnr,
        m.psnr - b.psnr,
        m.ssim,
        b.ssim,
        run.secs
    );
    ensure!(m.psnr >= b.psnr + PSNR_MARGIN_DB, "{detail}");
    ensure!(m.ssim > b.ssim, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 6

fn small_lm() -> LmConfig {
    LmConfig { layers: 1, width: 32, heads: 2, context: 128, mlp_ratio: 2 }
}

fn random_text(rng: &mut ChaCha8Rng, max: usize, layout: &VocabLayout) -> Vec<u32> {
    let n = rng.random_range(0..=max);
    (0..n).map(|_| rng.random_range(0..layout.text_size)).collect()
}

fn random_sequence(rng: &mut ChaCha8Rng, layout: &VocabLayout, grid_len: usize) -> SequenceSample {
    let codes: Vec<u32> = (0..grid_len).map(|_| rng.random_range(0..layout.codebook_size)).collect();
    if rng.random_bool(0.5) {
        let response = {
            let mut r = random_text(rng, 8, layout);
            r.push(rng.random_range(0..layout.text_size));
            r
        };
        assemble_understanding(&random_text(rng, 8, layout), &codes, &response, layout).unwrap()
    } else {
        assemble_generation(&random_text(rng, 6, layout), &random_text(rng, 8, layout), &codes, layout).unwrap()
    }
}

fn mutations(s: &SequenceSample, layout: &VocabLayout, rng: &mut ChaCha8Rng) -> Vec<(&'static str, SequenceSample)> {
    let soi = s.ids.iter().position(|&t| t == layout.soi()).unwrap();
    let eoi = s.ids.iter().position(|&t| t == layout.eoi()).unwrap();
    let mut out = Vec::new();
    let mut edit = |name: &'static str, f: &mut dyn FnMut(&mut SequenceSample)| {
        let mut m = s.clone();
        f(&mut m);
        out.push((name, m));
    };
    edit("dropped eoi", &mut |m| {
        m.ids.remove(eoi);
        m.loss_mask.remove(eoi);
    });
    edit("dropped soi", &mut |m| {
        m.ids.remove(soi);
        m.loss_mask.remove(soi);
    });
    let victim = rng.random_range(soi + 1..eoi);
    edit("short grid", &mut |m| {
        m.ids.remove(victim);
        m.loss_mask.remove(victim);
    });
    edit("long grid", &mut |m| {
        m.ids.insert(victim, m.ids[victim]);
        m.loss_mask.insert(victim, m.loss_mask[victim]);
    });
    edit("id past vocabulary", &mut |m| m.ids[victim] = layout.total() + rng.random_range(0..1000));
    edit("text id in grid", &mut |m| m.ids[victim] = rng.random_range(0..layout.text_size));
    edit("special id in grid", &mut |m| m.ids[victim] = layout.pad());
    edit("visual id outside grid", &mut |m| {
        m.ids.insert(1, layout.visual_base());
        m.loss_mask.insert(1, false);
    });
    edit("missing bos", &mut |m| {
        m.ids.remove(0);
        m.loss_mask.remove(0);
    });
    edit("missing eos", &mut |m| {
        m.ids.pop();
        m.loss_mask.pop();
    });
    edit("second image span", &mut |m| {
        let span: Vec<u32> = m.ids[soi..=eoi].to_vec();
        let at = m.ids.len() - 1;
        for (k, &t) in span.iter().enumerate() {
            m.ids.insert(at + k, t);
            m.loss_mask.insert(at + k, true);
        }
    });
    edit("eoi before soi", &mut |m| m.ids.swap(soi, eoi));
    edit("mask flipped", &mut |m| {
        let i = rng.random_range(0..m.loss_mask.len());
        m.loss_mask[i] = !m.loss_mask[i];
    });
    edit("mask length", &mut |m| {
        m.loss_mask.push(true);
    });
    edit("wrong kind", &mut |m| {
        m.kind = match m.kind {
            SequenceKind::Understanding => SequenceKind::Generation,
            SequenceKind::Generation => SequenceKind::Understanding,
        }
    });
    out
}

fn criterion_6() -> Outcome {
    let layout = VocabLayout::new(256, 64).unwrap();
    let (h, w) = (4, 4);
    let grid_len = h * w;
    let model = ok(ArModel::<f32>::for_layout(&small_lm(), &layout, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for seed in 0..GENERATIONS as u64 {
        let mut prompt = vec![layout.bos()];
        prompt.extend(random_text(&mut rng, 20, &layout));
        if seed % 4 == 0 {
            prompt.push(layout.soi());
        }
        let sampler = SamplerConfig {
            temperature: [0.0, 0.7, 1.0, 1.5][seed as usize % 4],
            top_k: [1, 5, 50, 0][seed as usize % 4],
            seed,
        };
        let gen = ok(generate_image_tokens(&model, &prompt, &layout, grid_len, &sampler))?;
        let body_start = prompt.len() + usize::from(seed % 4 != 0);
        ensure!(gen.ids[..prompt.len()] == prompt[..], "seed {seed}: prompt altered");
        ensure!(gen.ids[body_start - 1] == layout.soi(), "seed {seed}: no soi before the grid");
        ensure!(gen.ids.len() == body_start + grid_len + 1, "seed {seed}: {} ids", gen.ids.len());
        ensure!(*gen.ids.last().unwrap() == layout.eoi(), "seed {seed}: no closing eoi");
        let body = &gen.ids[body_start..body_start + grid_len];
        ensure!(body.iter().all(|&t| layout.is_visual(t)), "seed {seed}: non-visual id in grid");
        ensure!(gen.codes.len() == grid_len, "seed {seed}: {} codes", gen.codes.len());
        ensure!(
            body.iter().zip(&gen.codes).all(|(&t, &c)| layout.code_of(t) == Some(c) && c < layout.codebook_size),
            "seed {seed}: ids and codes disagree"
        );
        let again = ok(generate_image_tokens(&model, &prompt, &layout, grid_len, &sampler))?;
        ensure!(again == gen, "seed {seed}: generation not reproducible");
    }

    let mut rejected = 0;
    let mut total = 0;
    for _ in 0..40 {
        let s = random_sequence(&mut rng, &layout, grid_len);
        ok(validate_sequence(&s, &layout, grid_len))?;
        for (name, m) in mutations(&s, &layout, &mut rng) {
            total += 1;
            match validate_sequence(&m, &layout, grid_len) {
                Err(_) => rejected += 1,
                Ok(()) => return Err(format!("mutation '{name}' accepted: {:?}", m.ids)),
            }
        }
    }
    Ok(format!("{GENERATIONS}/{GENERATIONS} generations framed with {grid_len} visual ids; {rejected}/{total} mutations rejected"))
}

// ---------------------------------------------------------------- 7

/// Cross-entropy recomputed from per-sequence logits, independent of batching.
fn oracle_loss(model: &ArModel<f64>, samples: &[SequenceSample]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in samples {
        let logits = model.eval_logits(&s.ids).unwrap();
        for t in 0..s.ids.len() - 1 {
            if !s.loss_mask[t + 1] {
                continue;
            }
            let row = logits.row(t);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            sum += lse - row[s.ids[t + 1] as usize];
            n += 1;
        }
    }
    sum / n as f64
}

fn criterion_7() -> Outcome {
    let layout = VocabLayout::new(256, 32).unwrap();
    let model = ok(ArModel::<f64>::for_layout(&small_lm(), &layout, 3))?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..LM_BATCHES {
        let b = rng.random_range(1..=4);
        let grid_len = rng.random_range(1..=9);
        let samples: Vec<SequenceSample> = (0..b).map(|_| random_sequence(&mut rng, &layout, grid_len)).collect();
        let loss = ok(lm_loss(&model, &samples, &layout, false))?;
        worst = worst.max((loss - oracle_loss(&model, &samples)).abs());
    }
    ensure!(worst <= LM_TOL, "masked loss differs from the oracle by {worst:e}");

    // zero output weights give uniform logits
    let full = VocabLayout::new(256, 512).unwrap();
    let mut uniform = ok(ArModel::<f64>::for_layout(&small_lm(), &full, 0))?;
    let head = uniform.head;
    let zeros = Tensor::zeros(uniform.store.get(head).shape());
    uniform.store.set(head, zeros);
    let samples: Vec<SequenceSample> = (0..3).map(|_| random_sequence(&mut rng, &full, 16)).collect();
    let l = ok(lm_loss(&uniform, &samples, &full, false))?;
    let ln_v = (full.total() as f64).ln();
    ensure!(full.total() == 773, "unexpected vocabulary {}", full.total());
    ensure!((l - ln_v).abs() <= LM_TOL, "uniform loss {l} vs ln {} = {ln_v}", full.total());
    Ok(format!("{LM_BATCHES} batches within {worst:.1e} of the oracle; uniform loss {l:.9} = ln 773"))
}

// ---------------------------------------------------------------- 8

fn run_steps(trainer: &mut Trainer<f32>, until: usize) -> Vec<sde_core::tokenizer::StepReport> {
    let cfg = trainer.model.cfg.clone();
    let samples: Vec<Sample<f32>> = ToyDataset::new(16, 11).samples(0..12);
    let provider = ClassEmbeddingProvider::<f32>::new(10, cfg.d_sem, (cfg.grid(), cfg.grid()), 4);
    train_tokenizer(trainer, &samples, &provider, 3, until, |_| {}).unwrap()
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = SdeConfig { disc_start: 4, restart_dead_codes: true, restart_every: 5, ..mini_config() };
    let opt = OptimizerConfig { lr: 3e-3, warmup_steps: 2, total_steps: 24, ..Default::default() };
    let fresh = || Trainer::new(SdeModel::<f32>::new(&cfg, 1).unwrap(), PerceptualNet::random(2), &opt, 1).unwrap();

    let (mut a, mut b) = (fresh(), fresh());
    let log_a = run_steps(&mut a, 24);
    let log_b = run_steps(&mut b, 24);
    ensure!(log_a == log_b, "two runs with the same seed diverged");
    ensure!(log_a.first().unwrap().losses != log_a.last().unwrap().losses, "training did not move");

    // interrupted run resumes onto the same curve
    let state = TokenizerState {
        tokenizer: cfg.clone(),
        optimizer: opt.clone(),
        provider: ProviderConfig::ClassEmbedding { num_classes: 10, seed: 4 },
        teacher_grid: None,
    };
    let mut c = fresh();
    run_steps(&mut c, 11);
    let path = dir.path().join("tok.ckpt");
    ok(save_tokenizer(&path, &c, None, &state, "cfg"))?;
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let mut loaded = ok(load_tokenizer::<f32>(&path))?;
    ensure!(
        ok(tokenizer_archive(&loaded.trainer, None))?.bit_eq(&ok(tokenizer_archive(&c, None))?),
        "tokenizer checkpoint round trip changed values"
    );
    let path2 = dir.path().join("tok2.ckpt");
    ok(save_tokenizer(&path2, &loaded.trainer, None, &loaded.state, "cfg"))?;
    ensure!(std::fs::read(&path2).map_err(|e| e.to_string())? == bytes, "re-saved checkpoint differs");
    let resumed = run_steps(&mut loaded.trainer, 24);
    ensure!(resumed[..] == log_a[11..], "resumed run left the reference curve");

    // AR model: determinism and checkpoint round trip
    let layout = VocabLayout::new(256, 8).unwrap();
    let lm_opt = OptimizerConfig { lr: 1e-3, warmup_steps: 1, total_steps: 10, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let corpus: Vec<SequenceSample> = (0..6).map(|_| random_sequence(&mut rng, &layout, 4)).collect();
    let lm_run = |steps: usize| {
        let mut t =
            LmTrainer::new(ArModel::<f32>::for_layout(&small_lm(), &layout, 5).unwrap(), layout, &lm_opt).unwrap();
        let log = sde_core::pipeline::train_lm(&mut t, &corpus, 2, steps, |_| {}).unwrap();
        (t, log)
    };
    let (t1, l1) = lm_run(6);
    let (_, l2) = lm_run(6);
    ensure!(l1 == l2, "AR training not deterministic");
    let vlm_state = VlmState {
        lm: small_lm(),
        optimizer: lm_opt.clone(),
        layout,
        grid: (2, 2),
        image_size: 16,
        tokenizer_hash: "t".into(),
    };
    let vpath = dir.path().join("vlm.ckpt");
    ok(save_vlm(&vpath, &t1, &vlm_state, 5, "cfg"))?;
    let v = ok(load_vlm::<f32>(&vpath))?;
    ensure!(
        v.trainer.model.store.content_hash() == t1.model.store.content_hash(),
        "AR checkpoint round trip changed weights"
    );
    let vpath2 = dir.path().join("vlm2.ckpt");
    ok(save_vlm(&vpath2, &v.trainer, &v.state, 5, "cfg"))?;
    ensure!(std::fs::read(&vpath).unwrap() == std::fs::read(&vpath2).unwrap(), "re-saved AR checkpoint differs");

    // token cache
    let cache = dir.path().join("c.tok");
    ok(write_token_cache(&cache, &corpus))?;
    let back = ok(read_token_cache(&cache))?;
    ensure!(back == corpus, "SDETOK01 round trip changed records");
    let cache2 = dir.path().join("c2.tok");
    ok(write_token_cache(&cache2, &back))?;
    ensure!(
        std::fs::read(&cache).unwrap() == std::fs::read(&cache2).unwrap(),
        "SDETOK01 bytes differ after round trip"
    );

    // semantic target file
    let feats = Tensor::<f32>::randn(&[3 * 5 * 7], 1.0, &mut rng).into_data();
    let target = ok(SemanticTarget::new(3, 5, 7, feats, "test"))?;
    let sem = dir.path().join("t.sem");
    ok(write_target_file(&sem, &target))?;
    let t2: SemanticTarget<f32> = ok(read_target_file(&sem, "test"))?;
    ensure!(
        t2.features.iter().zip(&target.features).all(|(a, b)| a.to_bits() == b.to_bits())
            && (t2.h, t2.w, t2.d_sem) == (3, 5, 7),
        "SDESEM01 round trip changed values"
    );
    let sem2 = dir.path().join("t2.sem");
    ok(write_target_file(&sem2, &t2))?;
    ensure!(std::fs::read(&sem).unwrap() == std::fs::read(&sem2).unwrap(), "SDESEM01 bytes differ after round trip");

    Ok("identical loss curves for identical seeds; resume matches; checkpoints, SDETOK01 and SDESEM01 round-trip bit-exactly".into())
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let cfg = SdeConfig { disc_start: 3, ..mini_config() };
    let grid = (cfg.grid(), cfg.grid());
    let samples: Vec<Sample<f32>> = ToyDataset::new(16, 2).samples(0..20);
    let teacher = ok(FrozenNetProvider::<f32>::train(
        &samples,
        10,
        cfg.d_sem,
        grid,
        TeacherTraining { steps: 20, batch_size: 8, lr: 2e-3, seed: 0 },
    ))?;
    let teacher_hash = teacher.param_hash();
    let perceptual = PerceptualNet::from_teacher(&teacher);
    let perceptual_hash = perceptual.param_hash();
    let opt = OptimizerConfig { lr: 1e-2, warmup_steps: 1, total_steps: 10, ..Default::default() };
    let model = ok(SdeModel::new(&cfg, 0))?;
    let before = model.store.content_hash();
    let mut trainer = ok(Trainer::new(model, perceptual, &opt, 0))?;
    ok(train_tokenizer(&mut trainer, &samples, &teacher, 4, 10, |_| {}))?;
    ensure!(trainer.model.store.content_hash() != before, "tokenizer did not train");
    ensure!(teacher.param_hash() == teacher_hash, "teacher parameters changed");
    ensure!(trainer.perceptual.param_hash() == perceptual_hash, "perceptual trunk changed");

    let class = ClassEmbeddingProvider::<f32>::new(10, cfg.d_sem, grid, 3);
    let class_hash = class.param_hash();
    ok(train_tokenizer(&mut trainer, &samples, &class, 4, 20, |_| {}))?;
    ensure!(class.param_hash() == class_hash, "class embedding table changed");

    // vocabulary extension
    let layout = VocabLayout::new(256, 64).unwrap();
    let base = ok(ArModel::<f64>::new(&small_lm(), 256, 4))?;
    let ext = ok(ArModel::extend_embeddings(&base, &layout, 5))?;
    let (w, n, total) = (base.cfg.width, 256usize, layout.total() as usize);
    let e0 = base.store.get(base.embed).data();
    let e1 = ext.store.get(ext.embed).data();
    ensure!(e1[..n * w].iter().zip(e0).all(|(a, b)| a.to_bits() == b.to_bits()), "text embedding rows changed");
    for (name, t) in base.store.iter() {
        if name != "embed" && name != "head" {
            let id = ext.store.id(name).unwrap();
            ensure!(
                ext.store.get(id).data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
                "{name} changed"
            );
        }
    }
    let h0 = base.store.get(base.head);
    let h1 = ext.store.get(ext.head);
    for r in 0..w {
        ensure!(
            h1.row(r)[..n].iter().zip(h0.row(r)).all(|(a, b)| a.to_bits() == b.to_bits()),
            "text head columns changed"
        );
        ensure!(h1.row(r)[n..].iter().all(|&v| v == 0.0), "new head columns are not zero");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let len = rng.random_range(1..40);
        let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..256)).collect();
        let a = ok(base.eval_logits(&ids))?;
        let b = ok(ext.eval_logits(&ids))?;
        for t in 0..len {
            ensure!(b.row(t)[n..total].iter().all(|&v| v == 0.0), "new tokens get non-zero logits");
            for (x, y) in a.row(t).iter().zip(&b.row(t)[..n]) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    ensure!(worst == 0.0, "text logits moved by {worst:e}");
    Ok("teacher, perceptual and class-table hashes unchanged by training; extension keeps text rows and text logits bit-exact".into())
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 quantizer matches brute force", criterion_1),
        ("2 gradients match finite differences", criterion_2),
        ("3 loss identities", criterion_3),
        ("4 semantic codes beat plain VQ on a linear probe", criterion_4),
        ("5 toy reconstruction beats the random baseline", criterion_5),
        ("6 framing and constrained decoding", criterion_6),
        ("7 masked loss matches the oracle", criterion_7),
        ("8 determinism and persistence", criterion_8),
        ("9 freeze contracts", criterion_9),
    ];
    let only: Option<String> = std::env::var("SDE_ACCEPTANCE_ONLY").ok();
    let mut failed = Vec::new();
    for (name, f) in criteria {
        if only.as_deref().is_some_and(|o| !o.split(',').any(|x| name.starts_with(x.trim()))) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{:.1?}]", start.elapsed()),
            Err(why) => {
                println!("FAIL criterion {name}: {why} [{:.1?}]", start.elapsed());
                failed.push(name);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
