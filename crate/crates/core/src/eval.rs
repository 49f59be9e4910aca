//! Reconstruction metrics, Fréchet distance, linear probes and code grouping.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::PerceptualNet;
use crate::autograd::{Graph, ParamStore};
use crate::data::{batch_nchw, ImageTensor, Sample};
use crate::error::{Result, SdeError};
use crate::scalar::Scalar;
use crate::semantic::SemanticProvider;
use crate::tokenizer::SdeModel;
use crate::vq::CodeGrid;

pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_shape<S: Scalar>(x: &ImageTensor<S>, y: &ImageTensor<S>) -> Result<()> {
    if (x.height(), x.width()) != (y.height(), y.width()) {
        return Err(SdeError::contract(format!(
            "images differ in shape: {}×{} vs {}×{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

pub fn mse<S: Scalar>(x: &ImageTensor<S>, y: &ImageTensor<S>) -> Result<f64> {
    same_shape(x, y)?;
    let n = x.pixels().len() as f64;
    Ok(x.pixels().iter().zip(y.pixels()).map(|(a, b)| (a.f64() - b.f64()).powi(2)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)` in dB; identical images give `+inf`.
pub fn psnr<S: Scalar>(x: &ImageTensor<S>, y: &ImageTensor<S>) -> Result<f64> {
    let m = mse(x, y)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / m).log10() })
}

fn gray<S: Scalar>(x: &ImageTensor<S>) -> Vec<f64> {
    x.pixels().chunks(3).map(|p| (p[0].f64() + p[1].f64() + p[2].f64()) / 3.0).collect()
}

/// SSIM of one pair of equally sized windows.
pub fn window_ssim(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let va = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
    let vb = b.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
}

/// Mean SSIM over non-overlapping 8×8 windows of the channel-mean image.
/// Rows and columns beyond the last whole window are ignored.
pub fn ssim<S: Scalar>(x: &ImageTensor<S>, y: &ImageTensor<S>) -> Result<f64> {
    same_shape(x, y)?;
    let (h, w) = (x.height(), x.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(SdeError::invalid(format!("image {h}×{w} smaller than the SSIM window")));
    }
    let (gx, gy) = (gray(x), gray(y));
    let mut total = 0.0;
    let mut count = 0;
    let mut wa = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let mut wb = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for by in 0..h / SSIM_WINDOW {
        for bx in 0..w / SSIM_WINDOW {
            wa.clear();
            wb.clear();
            for yy in by * SSIM_WINDOW..(by + 1) * SSIM_WINDOW {
                let row = yy * w + bx * SSIM_WINDOW;
                wa.extend_from_slice(&gx[row..row + SSIM_WINDOW]);
                wb.extend_from_slice(&gy[row..row + SSIM_WINDOW]);
            }
            total += window_ssim(&wa, &wb);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

mod inf_float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        }
    }

    #[derive(Deserialize, Serialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("not a number: {t}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ReconMetrics {
    #[serde(with = "inf_float")]
    pub psnr: f64,
    pub ssim: f64,
    pub rfid: Option<f64>,
}

/// Image features for Fréchet distance.
pub trait FeatureExtractor<S: Scalar> {
    fn features(&self, images: &[&ImageTensor<S>]) -> Result<Vec<Vec<f64>>>;
}

/// Spatially averaged activations of every trunk layer, concatenated.
impl<S: Scalar> FeatureExtractor<S> for PerceptualNet<S> {
    fn features(&self, images: &[&ImageTensor<S>]) -> Result<Vec<Vec<f64>>> {
        let g = Graph::no_grad();
        let p = self.bind(&g);
        let x = g.constant(batch_nchw(images)?);
        let layers = self.trunk_features(&g, &p, x);
        let mut out = vec![Vec::new(); images.len()];
        for v in layers {
            let t = g.value(v);
            let (n, c, plane) = (t.dim(0), t.dim(1), t.dim(2) * t.dim(3));
            for (i, feats) in out.iter_mut().enumerate().take(n) {
                for ch in 0..c {
                    let start = (i * c + ch) * plane;
                    feats.push(t.data()[start..start + plane].iter().map(|v| v.f64()).sum::<f64>() / plane as f64);
                }
            }
        }
        Ok(out)
    }
}

fn gaussian_fit(feats: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = feats.len();
    if n < 2 {
        return Err(SdeError::invalid("Fréchet distance needs at least two samples per set"));
    }
    let d = feats[0].len();
    if d == 0 || feats.iter().any(|f| f.len() != d) {
        return Err(SdeError::contract("feature vectors must share a non-zero length"));
    }
    let x = DMatrix::from_fn(n, d, |i, j| feats[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let mut centered = x.clone();
    for j in 0..d {
        let m = mu[j];
        centered.column_mut(j).iter_mut().for_each(|v| *v -= m);
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    for i in 0..d {
        cov[(i, i)] += 1e-6;
    }
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})` of Gaussian fits; `1e-6·I` is
/// added to both covariances.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu1, s1) = gaussian_fit(a)?;
    let (mu2, s2) = gaussian_fit(b)?;
    if mu1.len() != mu2.len() {
        return Err(SdeError::contract("feature sets differ in dimension"));
    }
    // tr((Σ₁Σ₂)^{1/2}) = tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}), symmetric PSD inside
    let r1 = sym_sqrt(&s1);
    let inner = &r1 * &s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = &mu1 - &mu2;
    Ok((diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_sqrt).max(0.0))
}

pub fn rfid<S: Scalar>(
    real: &[&ImageTensor<S>],
    recon: &[&ImageTensor<S>],
    extractor: &dyn FeatureExtractor<S>,
) -> Result<f64> {
    frechet_distance(&extractor.features(real)?, &extractor.features(recon)?)
}

/// Softmax-regression training settings for the linear probe.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ProbeConfig {
    pub train_fraction: f64,
    pub steps: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { train_fraction: 0.7, steps: 500, lr: 0.5, l2: 1e-4, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProbeReport {
    pub accuracy_sde: f64,
    pub accuracy_baseline: f64,
    pub dataset_id: String,
    pub num_classes: usize,
    pub train_size: usize,
    pub test_size: usize,
}

/// Seeded split into disjoint train and test index sets.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((n as f64 * train_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let test = idx.split_off(cut);
    (idx, test)
}

/// Held-out accuracy of a multinomial logistic regression on standardised
/// features, trained by full-batch gradient descent.
pub fn linear_probe(features: &[Vec<f64>], labels: &[usize], num_classes: usize, cfg: &ProbeConfig) -> Result<f64> {
    if features.len() != labels.len() || features.len() < 2 {
        return Err(SdeError::invalid("probe needs one label per feature vector and at least two samples"));
    }
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(SdeError::invalid("probe dataset has a single class"));
    }
    if labels.iter().any(|&l| l >= num_classes) {
        return Err(SdeError::invalid("label outside class count"));
    }
    let d = features[0].len();
    let (train, test) = split_indices(features.len(), cfg.train_fraction, cfg.seed);
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for &i in &train {
        for j in 0..d {
            mean[j] += features[i][j] / train.len() as f64;
        }
    }
    for &i in &train {
        for j in 0..d {
            std[j] += (features[i][j] - mean[j]).powi(2) / train.len() as f64;
        }
    }
    let std: Vec<f64> = std.iter().map(|v| v.sqrt().max(1e-8)).collect();
    let norm = |i: usize| -> Vec<f64> { (0..d).map(|j| (features[i][j] - mean[j]) / std[j]).collect() };
    let xtr: Vec<Vec<f64>> = train.iter().map(|&i| norm(i)).collect();
    let c = num_classes;
    let mut w = vec![0.0; (d + 1) * c];
    let logits = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..c).map(|k| w[d * c + k] + (0..d).map(|j| x[j] * w[j * c + k]).sum::<f64>()).collect()
    };
    for _ in 0..cfg.steps {
        let mut grad = vec![0.0; (d + 1) * c];
        for (x, &i) in xtr.iter().zip(&train) {
            let z = logits(&w, x);
            let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..c {
                let delta = e[k] / s - if k == labels[i] { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[j * c + k] += delta * x[j];
                }
                grad[d * c + k] += delta;
            }
        }
        let n = train.len() as f64;
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= cfg.lr * (gi / n + cfg.l2 * *wi);
        }
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let z = logits(&w, &norm(i));
            let mut best = 0;
            for k in 1..c {
                if z[k] > z[best] {
                    best = k;
                }
            }
            best == labels[i]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Codes for every sample, tokenised in chunks.
pub fn tokenize_samples<S: Scalar>(
    model: &SdeModel<S>,
    samples: &[Sample<S>],
    provider: &dyn SemanticProvider<S>,
) -> Result<Vec<CodeGrid>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let targets = chunk.iter().map(|s| provider.provide(&s.image, s.into())).collect::<Result<Vec<_>>>()?;
        let images: Vec<&ImageTensor<S>> = chunk.iter().map(|s| &s.image).collect();
        out.extend(model.tokenize_batch(&images, &targets.iter().collect::<Vec<_>>())?);
    }
    Ok(out)
}

/// Mean of the codebook rows selected by each grid.
pub fn pooled_embeddings<S: Scalar>(model: &SdeModel<S>, grids: &[CodeGrid]) -> Result<Vec<Vec<f64>>> {
    grids
        .iter()
        .map(|g| {
            let rows = model.lookup(g)?;
            let d = rows.dim(1);
            let mut v = vec![0.0; d];
            for r in 0..rows.dim(0) {
                for (a, b) in v.iter_mut().zip(rows.row(r)) {
                    *a += b.f64() / rows.dim(0) as f64;
                }
            }
            Ok(v)
        })
        .collect()
}

/// One patch location.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchRef {
    pub image_id: String,
    pub i: usize,
    pub j: usize,
}

/// Inverted index from code to every patch quantised to it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CodeIndex {
    pub codes: BTreeMap<u32, Vec<PatchRef>>,
}

impl CodeIndex {
    pub fn build(ids: &[String], grids: &[CodeGrid]) -> Result<Self> {
        if ids.len() != grids.len() {
            return Err(SdeError::contract("one id per code grid"));
        }
        let mut codes: BTreeMap<u32, Vec<PatchRef>> = BTreeMap::new();
        for (id, g) in ids.iter().zip(grids) {
            for i in 0..g.h {
                for j in 0..g.w {
                    codes.entry(g.at(i, j)).or_default().push(PatchRef { image_id: id.clone(), i, j });
                }
            }
        }
        Ok(Self { codes })
    }

    pub fn total_patches(&self) -> usize {
        self.codes.values().map(Vec::len).sum()
    }

    /// Codes ordered by how many patches they hold, most first.
    pub fn by_frequency(&self) -> Vec<(u32, usize)> {
        let mut v: Vec<(u32, usize)> = self.codes.iter().map(|(&c, p)| (c, p.len())).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }
}

pub fn group_codes<S: Scalar>(
    model: &SdeModel<S>,
    samples: &[Sample<S>],
    provider: &dyn SemanticProvider<S>,
) -> Result<CodeIndex> {
    let grids = tokenize_samples(model, samples, provider)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    CodeIndex::build(&ids, &grids)
}

/// Tile up to `max` patches of `patch`×`patch` pixels into a square mosaic.
pub fn patch_mosaic<S: Scalar>(
    patches: &[PatchRef],
    images: &BTreeMap<String, &ImageTensor<S>>,
    patch: usize,
    max: usize,
) -> Result<ImageTensor<S>> {
    let n = patches.len().min(max).max(1);
    let side = (n as f64).sqrt().ceil() as usize;
    let size = side * patch;
    let mut px = vec![S::zero(); size * size * 3];
    for (k, r) in patches.iter().take(max).enumerate() {
        let img = images.get(&r.image_id).ok_or_else(|| SdeError::Lookup(format!("no image {}", r.image_id)))?;
        let crop = img.crop(r.i * patch, r.j * patch, patch)?;
        let (ty, tx) = (k / side, k % side);
        for y in 0..patch {
            let dst = ((ty * patch + y) * size + tx * patch) * 3;
            px[dst..dst + patch * 3].copy_from_slice(&crop.pixels()[y * patch * 3..(y + 1) * patch * 3]);
        }
    }
    ImageTensor::new(size, size, px)
}

/// Mean reconstruction metrics, plus the same metrics for seeded uniform
/// random images as a floor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ReconReport {
    pub model: ReconMetrics,
    pub random_baseline: ReconMetrics,
    pub images: usize,
}

pub fn evaluate_reconstruction<S: Scalar>(
    model: &SdeModel<S>,
    samples: &[Sample<S>],
    provider: &dyn SemanticProvider<S>,
    extractor: Option<&dyn FeatureExtractor<S>>,
    seed: u64,
) -> Result<ReconReport> {
    if samples.is_empty() {
        return Err(SdeError::invalid("nothing to evaluate"));
    }
    let grids = tokenize_samples(model, samples, provider)?;
    let recon = model.reconstruct_batch(&grids.iter().collect::<Vec<_>>())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = model.cfg.image_size;
    let random: Vec<ImageTensor<S>> = (0..samples.len()).map(|_| ImageTensor::random(s, s, &mut rng)).collect();
    let real: Vec<&ImageTensor<S>> = samples.iter().map(|x| &x.image).collect();
    let metrics = |other: &[ImageTensor<S>]| -> Result<ReconMetrics> {
        let n = other.len() as f64;
        let mut p = 0.0;
        let mut q = 0.0;
        for (a, b) in real.iter().zip(other) {
            p += psnr(a, b)? / n;
            q += ssim(a, b)? / n;
        }
        let rfid = match extractor {
            Some(e) if other.len() >= 2 => Some(rfid(&real, &other.iter().collect::<Vec<_>>(), e)?),
            _ => None,
        };
        Ok(ReconMetrics { psnr: p, ssim: q, rfid })
    };
    Ok(ReconReport { model: metrics(&recon)?, random_baseline: metrics(&random)?, images: samples.len() })
}

/// Hash of a parameter store, for freeze checks across runs.
pub fn param_hash<S: Scalar>(store: &ParamStore<S>) -> String {
    store.content_hash()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let x = ImageTensor::<f64>::new(2, 2, vec![0.5; 12]).unwrap();
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        let y = ImageTensor::new(2, 2, vec![0.6; 12]).unwrap();
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = ImageTensor::<f64>::random(16, 16, &mut rng);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let inv = ImageTensor::new(16, 16, x.pixels().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&x, &inv).unwrap() < 1.0);
        assert!(ssim(&ImageTensor::<f64>::random(4, 4, &mut rng), &ImageTensor::random(4, 4, &mut rng)).is_err());
    }

    #[test]
    fn frechet_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<Vec<f64>> = (0..50).map(|_| (0..3).map(|_| rand::Rng::random::<f64>(&mut rng)).collect()).collect();
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
        // 1-D: identical spread, mean shifted by δ
        let xs: Vec<Vec<f64>> = (0..100).map(|i| vec![(i as f64 * 0.37).sin()]).collect();
        let ys: Vec<Vec<f64>> = xs.iter().map(|v| vec![v[0] + 1.5]).collect();
        assert!((frechet_distance(&xs, &ys).unwrap() - 2.25).abs() < 1e-9);
        assert!(frechet_distance(&xs[..1], &ys).is_err());
    }

    #[test]
    fn inf_psnr_survives_json() {
        let m = ReconMetrics { psnr: f64::INFINITY, ssim: 1.0, rfid: None };
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<ReconMetrics>(&s).unwrap(), m);
    }

    #[test]
    fn probe_separable_and_degenerate() {
        let feats: Vec<Vec<f64>> = (0..60).map(|i| vec![(i % 3) as f64, ((i * 7) % 5) as f64 * 0.01]).collect();
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        assert_eq!(linear_probe(&feats, &labels, 3, &ProbeConfig::default()).unwrap(), 1.0);
        assert!(linear_probe(&feats, &vec![0; 60], 3, &ProbeConfig::default()).is_err());
        let (tr, te) = split_indices(60, 0.7, 3);
        assert_eq!(tr.len() + te.len(), 60);
        assert!(tr.iter().all(|i| !te.contains(i)));
    }

    #[test]
    fn code_index_partitions_patches() {
        let grids =
            vec![CodeGrid::new(2, 2, vec![1, 1, 0, 3]).unwrap(), CodeGrid::new(2, 2, vec![3, 3, 3, 3]).unwrap()];
        let idx = CodeIndex::build(&["a".into(), "b".into()], &grids).unwrap();
        assert_eq!(idx.total_patches(), 8);
        assert_eq!(idx.codes[&3].len(), 5);
        assert_eq!(idx.by_frequency()[0], (3, 5));
    }
}
