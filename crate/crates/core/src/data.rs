//! Images, dataset manifests and the procedural toy dataset.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdeError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// RGB image with values in `[0, 1]`, stored `(row, col, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<S> {
    height: usize,
    width: usize,
    pixels: Vec<S>,
}

impl<S: Scalar> ImageTensor<S> {
    pub fn new(height: usize, width: usize, pixels: Vec<S>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(SdeError::contract(format!(
                "{height}×{width} RGB image needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(**v >= S::zero() && **v <= S::one())) {
            return Err(SdeError::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    /// Clamp arbitrary values into `[0, 1]` (NaN becomes 0).
    pub fn from_clamped(height: usize, width: usize, values: Vec<S>) -> Result<Self> {
        let pixels =
            values.into_iter().map(|v| if v.is_nan() { S::zero() } else { v.max(S::zero()).min(S::one()) }).collect();
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[S] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [S; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn cast<T: Scalar>(&self) -> ImageTensor<T> {
        ImageTensor {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| T::cast(v)).collect(),
        }
    }

    /// Uniform random pixels.
    pub fn random<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Self {
        let pixels = (0..height * width * 3).map(|_| S::cast(rng.random::<f64>())).collect();
        Self { height, width, pixels }
    }

    /// `(1, 3, H, W)` planar layout.
    pub fn to_chw(&self) -> Vec<S> {
        let plane = self.height * self.width;
        let mut out = vec![S::zero(); plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                out[c * plane + p] = self.pixels[p * 3 + c];
            }
        }
        out
    }

    pub fn from_chw_clamped(height: usize, width: usize, chw: &[S]) -> Result<Self> {
        let plane = height * width;
        if chw.len() != plane * 3 {
            return Err(SdeError::contract("planar buffer size mismatch"));
        }
        let mut hwc = vec![S::zero(); plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                hwc[p * 3 + c] = chw[c * plane + p];
            }
        }
        Self::from_clamped(height, width, hwc)
    }

    /// Crop a `size × size` patch whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, size: usize) -> Result<Self> {
        if y + size > self.height || x + size > self.width {
            return Err(SdeError::contract("crop outside image"));
        }
        let mut pixels = Vec::with_capacity(size * size * 3);
        for row in y..y + size {
            let o = (row * self.width + x) * 3;
            pixels.extend_from_slice(&self.pixels[o..o + size * 3]);
        }
        Ok(Self { height: size, width: size, pixels })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img.into_raw().into_iter().map(|b| S::cast(b as f64 / 255.0)).collect();
        Self::new(h as usize, w as usize, pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| (v.f64() * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| SdeError::format("image buffer size"))?;
        img.save(path)?;
        Ok(())
    }
}

/// Stack images into an `(N, 3, H, W)` tensor. All images must share a size.
pub fn batch_nchw<S: Scalar>(images: &[&ImageTensor<S>]) -> Result<Tensor<S>> {
    let first = images.first().ok_or_else(|| SdeError::invalid("empty image batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(SdeError::contract("images in a batch must share one size"));
        }
        data.extend(img.to_chw());
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

/// One line of a JSON-lines dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_path: Option<String>,
}

impl ManifestRecord {
    pub fn id(&self) -> String {
        self.image_id.clone().unwrap_or_else(|| {
            Path::new(&self.image_path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| self.image_path.clone())
        })
    }
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| SdeError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| SdeError::format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            records.push(rec);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for rec in &self.records {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Every referenced image file must exist.
    pub fn check_paths(&self) -> Result<()> {
        for rec in &self.records {
            let p = self.resolve(&rec.image_path);
            if !p.is_file() {
                return Err(SdeError::config(format!("missing image {}", p.display())));
            }
        }
        Ok(())
    }

    pub fn load_images<S: Scalar>(&self) -> Result<Vec<ImageTensor<S>>> {
        self.records.iter().map(|r| ImageTensor::load_png(&self.resolve(&r.image_path))).collect()
    }
}

/// A labelled, captioned image held in memory.
#[derive(Debug, Clone)]
pub struct Sample<S> {
    pub id: String,
    pub image: ImageTensor<S>,
    pub label: Option<usize>,
    pub caption: Option<String>,
}

pub const TOY_CLASSES: [&str; 10] = [
    "circle",
    "square",
    "triangle",
    "plus",
    "ring",
    "horizontal stripes",
    "vertical stripes",
    "checkerboard",
    "diagonal stripes",
    "cross",
];

const PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [0.9, 0.15, 0.1]),
    ("green", [0.15, 0.8, 0.2]),
    ("blue", [0.15, 0.3, 0.9]),
    ("yellow", [0.95, 0.9, 0.15]),
    ("white", [0.95, 0.95, 0.95]),
    ("orange", [0.95, 0.55, 0.1]),
    ("purple", [0.6, 0.2, 0.8]),
    ("cyan", [0.1, 0.85, 0.9]),
];

/// Procedurally drawn 10-class shapes dataset. Colours and placement are
/// random and independent of the class, so only the shape carries the label.
#[derive(Debug, Clone, Copy)]
pub struct ToyDataset {
    pub image_size: usize,
    pub seed: u64,
}

impl ToyDataset {
    pub fn new(image_size: usize, seed: u64) -> Self {
        Self { image_size, seed }
    }

    pub fn num_classes(&self) -> usize {
        TOY_CLASSES.len()
    }

    /// Sample `index` is a pure function of `(seed, index)`; labels cycle through the classes.
    pub fn sample<S: Scalar>(&self, index: usize) -> Sample<S> {
        let label = index % TOY_CLASSES.len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64);
        let n = self.image_size;
        let fg_idx = rng.random_range(0..PALETTE.len());
        let mut bg_idx = rng.random_range(0..PALETTE.len());
        if bg_idx == fg_idx {
            bg_idx = (bg_idx + 1) % PALETTE.len();
        }
        let (fg_name, fg) = PALETTE[fg_idx];
        let (bg_name, bg_full) = PALETTE[bg_idx];
        let bg = bg_full.map(|v| 0.15 + 0.3 * v);
        let size = n as f64;
        let radius = size * rng.random_range(0.22..0.34);
        let cx = size * rng.random_range(0.38..0.62);
        let cy = size * rng.random_range(0.38..0.62);
        let period = (size / rng.random_range(5.0..7.0f64)).max(2.0);
        let thick = radius * 0.35;
        let mut pixels = Vec::with_capacity(n * n * 3);
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let (dx, dy) = (px - cx, py - cy);
                let inside_box = dx.abs() <= radius && dy.abs() <= radius;
                let on = match label {
                    0 => dx * dx + dy * dy <= radius * radius,
                    1 => inside_box,
                    2 => dy <= radius && dy >= -radius && dx.abs() <= (dy + radius) * 0.5,
                    3 => inside_box && (dx.abs() <= thick * 0.6 || dy.abs() <= thick * 0.6),
                    4 => {
                        let r = (dx * dx + dy * dy).sqrt();
                        r <= radius && r >= radius - thick
                    }
                    5 => ((py / period).floor() as i64) % 2 == 0,
                    6 => ((px / period).floor() as i64) % 2 == 0,
                    7 => (((px / period).floor() + (py / period).floor()) as i64) % 2 == 0,
                    8 => ((((px + py) / period).floor()) as i64) % 2 == 0,
                    _ => inside_box && ((dx - dy).abs() <= thick * 0.7 || (dx + dy).abs() <= thick * 0.7),
                };
                let c = if on { fg } else { bg };
                for ch in c {
                    let noise = rng.random_range(-0.03..0.03);
                    pixels.push(S::cast((ch + noise).clamp(0.0, 1.0)));
                }
            }
        }
        let caption = format!("a {fg_name} {} on a dark {bg_name} background", TOY_CLASSES[label]);
        Sample {
            id: format!("toy_{index:05}"),
            image: ImageTensor { height: n, width: n, pixels },
            label: Some(label),
            caption: Some(caption),
        }
    }

    pub fn samples<S: Scalar>(&self, range: std::ops::Range<usize>) -> Vec<Sample<S>> {
        range.map(|i| self.sample(i)).collect()
    }

    /// Write PNGs plus a `manifest.jsonl` into `dir`.
    pub fn write(&self, dir: &Path, count: usize) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let mut records = Vec::with_capacity(count);
        for i in 0..count {
            let s: Sample<f64> = self.sample(i);
            let file = format!("{}.png", s.id);
            s.image.save_png(&dir.join(&file))?;
            records.push(ManifestRecord {
                image_path: file,
                image_id: Some(s.id),
                caption: s.caption,
                label: s.label,
                target_path: None,
            });
        }
        let manifest = DatasetManifest { root: dir.to_path_buf(), records };
        let path = dir.join("manifest.jsonl");
        manifest.save(&path)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_samples_are_deterministic_and_in_range() {
        let ds = ToyDataset::new(32, 7);
        let a: Sample<f32> = ds.sample(3);
        let b: Sample<f32> = ds.sample(3);
        assert_eq!(a.image, b.image);
        assert_eq!(a.label, Some(3));
        assert!(a.image.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let c: Sample<f32> = ds.sample(13);
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(ImageTensor::<f32>::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(ImageTensor::<f32>::new(1, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn png_and_manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = ToyDataset::new(16, 1).write(dir.path(), 4).unwrap();
        let m = DatasetManifest::load(&path).unwrap();
        assert_eq!(m.records.len(), 4);
        m.check_paths().unwrap();
        let imgs: Vec<ImageTensor<f64>> = m.load_images().unwrap();
        let orig: Sample<f64> = ToyDataset::new(16, 1).sample(2);
        // 8-bit quantisation
        for (a, b) in imgs[2].pixels().iter().zip(orig.image.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert_eq!(m.records[2].label, Some(2));
    }

    #[test]
    fn chw_roundtrip_and_crop() {
        let ds = ToyDataset::new(8, 2);
        let s: Sample<f64> = ds.sample(0);
        let back = ImageTensor::from_chw_clamped(8, 8, &s.image.to_chw()).unwrap();
        assert_eq!(back, s.image);
        let c = s.image.crop(4, 4, 4).unwrap();
        assert_eq!(c.pixel(0, 0), s.image.pixel(4, 4));
        assert!(s.image.crop(6, 0, 4).is_err());
    }
}
