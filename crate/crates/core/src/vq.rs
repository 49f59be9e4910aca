//! Codebook storage, nearest-entry quantisation, VQ losses and usage statistics.

use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Result, SdeError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `K` learned vectors of dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<S> {
    entries: Tensor<S>,
}

impl<S: Scalar> Codebook<S> {
    pub fn new(entries: Tensor<S>) -> Result<Self> {
        if entries.rank() != 2 || entries.dim(0) == 0 || entries.dim(1) == 0 {
            return Err(SdeError::contract(format!("codebook must be K×d, got {:?}", entries.shape())));
        }
        if !entries.is_finite() {
            return Err(SdeError::invalid("codebook contains non-finite values"));
        }
        Ok(Self { entries })
    }

    /// Entries drawn uniformly from `[-1/K, 1/K]`.
    pub fn init_uniform<R: Rng + ?Sized>(size: usize, dim: usize, rng: &mut R) -> Self {
        let r = 1.0 / size as f64;
        Self { entries: Tensor::uniform(&[size, dim], -r, r, rng) }
    }

    pub fn size(&self) -> usize {
        self.entries.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.entries.dim(1)
    }

    pub fn entries(&self) -> &Tensor<S> {
        &self.entries
    }

    pub fn entry(&self, k: usize) -> &[S] {
        self.entries.row(k)
    }

    pub fn into_entries(self) -> Tensor<S> {
        self.entries
    }
}

/// Spatial grid of `d`-dimensional features, stored `(i, j, c)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<S> {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub values: Vec<S>,
}

impl<S: Scalar> FeatureGrid<S> {
    pub fn new(h: usize, w: usize, d: usize, values: Vec<S>) -> Result<Self> {
        if values.len() != h * w * d {
            return Err(SdeError::contract(format!(
                "feature grid {h}×{w}×{d} needs {} values, got {}",
                h * w * d,
                values.len()
            )));
        }
        Ok(Self { h, w, d, values })
    }

    pub fn at(&self, i: usize, j: usize) -> &[S] {
        let o = (i * self.w + j) * self.d;
        &self.values[o..o + self.d]
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `(h*w, d)` view as a tensor.
    pub fn to_rows(&self) -> Tensor<S> {
        Tensor::new(&[self.h * self.w, self.d], self.values.clone())
    }

    pub fn from_rows(h: usize, w: usize, rows: &Tensor<S>) -> Result<Self> {
        let d = *rows.shape().last().unwrap_or(&0);
        Self::new(h, w, d, rows.data().to_vec())
    }
}

/// Integer code grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CodeGrid {
    pub h: usize,
    pub w: usize,
    pub codes: Vec<u32>,
}

impl CodeGrid {
    pub fn new(h: usize, w: usize, codes: Vec<u32>) -> Result<Self> {
        if codes.len() != h * w {
            return Err(SdeError::contract(format!("code grid {h}×{w} needs {} codes, got {}", h * w, codes.len())));
        }
        Ok(Self { h, w, codes })
    }

    pub fn at(&self, i: usize, j: usize) -> u32 {
        self.codes[i * self.w + j]
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn check_range(&self, size: usize) -> Result<()> {
        match self.codes.iter().find(|&&c| c as usize >= size) {
            Some(c) => Err(SdeError::invalid(format!("code {c} outside codebook of size {size}"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult<S> {
    pub codes: CodeGrid,
    pub quantized: FeatureGrid<S>,
    /// `‖sg[z] − z_q‖²`, averaged over grid positions
    pub codebook_loss: S,
    /// `‖z − sg[z_q]‖²`, averaged over grid positions
    pub commitment_loss: S,
    pub beta: S,
}

/// Index of the nearest entry by squared Euclidean distance; the lowest index wins ties.
pub fn nearest_entry<S: Scalar>(v: &[S], codebook: &Codebook<S>) -> usize {
    let mut best = 0;
    let mut best_dist = S::infinity();
    for k in 0..codebook.size() {
        let dist: S = v.iter().zip(codebook.entry(k)).map(|(&a, &b)| (a - b) * (a - b)).sum();
        if dist < best_dist {
            best_dist = dist;
            best = k;
        }
    }
    best
}

/// Nearest codes for every row of a `(m, d)` slice.
pub fn nearest_rows<S: Scalar>(rows: &[S], codebook: &Codebook<S>) -> Vec<usize> {
    rows.chunks(codebook.dim()).map(|r| nearest_entry(r, codebook)).collect()
}

pub fn quantize<S: Scalar>(z: &FeatureGrid<S>, codebook: &Codebook<S>, beta: S) -> Result<QuantizationResult<S>> {
    if z.d != codebook.dim() {
        return Err(SdeError::contract(format!("feature dim {} does not match codebook dim {}", z.d, codebook.dim())));
    }
    if !z.is_finite() {
        return Err(SdeError::invalid("feature grid contains non-finite values"));
    }
    if beta < S::zero() {
        return Err(SdeError::invalid("beta must be non-negative"));
    }
    let codes = nearest_rows(&z.values, codebook);
    let mut quantized = Vec::with_capacity(z.values.len());
    for &c in &codes {
        quantized.extend_from_slice(codebook.entry(c));
    }
    let sq_norm_mean: S =
        z.values.iter().zip(&quantized).map(|(&a, &b)| (a - b) * (a - b)).sum::<S>() / S::cast(z.positions().max(1));
    Ok(QuantizationResult {
        codes: CodeGrid::new(z.h, z.w, codes.into_iter().map(|c| c as u32).collect())?,
        quantized: FeatureGrid::new(z.h, z.w, z.d, quantized)?,
        // both terms share a forward value; they differ only in where gradients go
        codebook_loss: sq_norm_mean,
        commitment_loss: sq_norm_mean,
        beta,
    })
}

/// `codebook_loss + beta * commitment_loss`.
pub fn vq_loss<S: Scalar>(result: &QuantizationResult<S>) -> S {
    result.codebook_loss + result.beta * result.commitment_loss
}

/// Straight-through substitution on the tape: forward value `zq`, identity
/// backward into `z` (and into `zq` when it is tracked).
pub fn straight_through<S: Scalar>(g: &Graph<S>, z: Var, zq: Var) -> Result<Var> {
    if g.shape(z) != g.shape(zq) {
        return Err(SdeError::contract(format!(
            "straight-through shapes differ: {:?} vs {:?}",
            g.shape(z),
            g.shape(zq)
        )));
    }
    Ok(g.straight_through(z, zq))
}

/// Values held fixed in place of stop-gradient operands, so a perturbed model
/// can be evaluated as the smooth surrogate whose derivative the tape reports.
#[derive(Debug, Clone)]
pub struct QuantAnchor<S> {
    pub codes: Vec<usize>,
    pub z: Tensor<S>,
    pub zq: Tensor<S>,
}

/// Quantisation of `(m, d)` features recorded on the tape.
pub struct TapeQuantization<S> {
    pub codes: Vec<usize>,
    /// Quantised rows; gradients reach the image branch input via `z` only.
    pub image_input: Var,
    /// Quantised rows; gradients reach both `z` and the codebook.
    pub semantic_input: Var,
    pub codebook_loss: Var,
    pub commitment_loss: Var,
    pub anchor: QuantAnchor<S>,
}

pub fn quantize_on_tape<S: Scalar>(
    g: &Graph<S>,
    z: Var,
    codebook: Var,
    anchor: Option<&QuantAnchor<S>>,
) -> Result<TapeQuantization<S>> {
    let zs = g.shape(z);
    let cs = g.shape(codebook);
    if zs.len() != 2 || cs.len() != 2 || zs[1] != cs[1] {
        return Err(SdeError::contract(format!("cannot quantise {zs:?} against codebook {cs:?}")));
    }
    let zv = g.value(z);
    if !zv.is_finite() {
        return Err(SdeError::divergence("encoder features"));
    }
    let anchored = anchor.is_some();
    let anchor = match anchor {
        Some(a) => a.clone(),
        None => {
            let cb = Codebook { entries: (*g.value(codebook)).clone() };
            let codes = nearest_rows(zv.data(), &cb);
            let mut zq = Vec::with_capacity(zv.numel());
            for &c in &codes {
                zq.extend_from_slice(cb.entry(c));
            }
            QuantAnchor { codes, z: (*zv).clone(), zq: Tensor::new(&zs, zq) }
        }
    };
    let zq_cb = g.gather_rows(codebook, &anchor.codes);
    let z_sg = g.constant(anchor.z.clone());
    let zq_sg = g.constant(anchor.zq.clone());
    let dim = S::cast(zs[1]);
    let codebook_loss = g.scale(g.mean(g.square(g.sub(z_sg, zq_cb))), dim);
    let commitment_loss = g.scale(g.mean(g.square(g.sub(z, zq_sg))), dim);
    let (image_input, semantic_input) = if anchored {
        // surrogate form: identical value at the anchor, differentiable away from it
        let offset = g.constant(anchor.zq.zip_map(&anchor.z, |a, b| a - b));
        let image = g.add(z, offset);
        let sem = g.sub(g.add(zq_cb, z), z_sg);
        (image, sem)
    } else {
        (g.straight_through(z, zq_sg), g.straight_through(z, zq_cb))
    };
    Ok(TapeQuantization {
        codes: anchor.codes.clone(),
        image_input,
        semantic_input,
        codebook_loss,
        commitment_loss,
        anchor,
    })
}

/// Fraction of the codebook in use and the exponentiated entropy of usage.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CodebookStats {
    pub usage_fraction: f64,
    pub perplexity: f64,
}

pub fn code_histogram(codes: impl IntoIterator<Item = u32>, size: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; size];
    for c in codes {
        let slot = counts
            .get_mut(c as usize)
            .ok_or_else(|| SdeError::invalid(format!("code {c} outside codebook of size {size}")))?;
        *slot += 1;
    }
    Ok(counts)
}

pub fn codebook_stats(codes: impl IntoIterator<Item = u32>, size: usize) -> Result<CodebookStats> {
    if size == 0 {
        return Err(SdeError::invalid("codebook size must be positive"));
    }
    let counts = code_histogram(codes, size)?;
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(SdeError::invalid("no codes observed"));
    }
    let used = counts.iter().filter(|&&c| c > 0).count();
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    Ok(CodebookStats { usage_fraction: used as f64 / size as f64, perplexity: entropy.exp() })
}

/// Re-seed entries whose count is zero with randomly chosen feature rows.
/// Returns how many entries were replaced.
pub fn restart_dead_codes<S: Scalar, R: Rng + ?Sized>(
    entries: &mut Tensor<S>,
    counts: &[u64],
    features: &Tensor<S>,
    rng: &mut R,
) -> usize {
    let d = entries.dim(1);
    let rows = features.numel() / d;
    let dead: Vec<usize> = counts.iter().enumerate().filter(|(_, &c)| c == 0).map(|(k, _)| k).collect();
    if rows == 0 || dead.is_empty() {
        return 0;
    }
    let picks = sample(rng, rows, dead.len().min(rows));
    let mut replaced = 0;
    for (k, r) in dead.iter().zip(picks.iter()) {
        entries.data_mut()[k * d..(k + 1) * d].copy_from_slice(&features.data()[r * d..(r + 1) * d]);
        replaced += 1;
    }
    replaced
}
