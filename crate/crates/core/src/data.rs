//! CIFAR-10 binary ingestion, a synthetic blob dataset, and CIFAR-style augmentation.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD: usize = CIFAR_PIXELS + 1;
pub const CIFAR_TRAIN_FILES: [&str; 5] = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images `[N, C, H, W]` with values in `[0, 1]` (before normalization) and labels `< num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::SizeMismatch(format!("{} labels for images {:?}", labels.len(), images.shape())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidConfig(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self { images, labels, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let per: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidConfig(format!("sample index {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// Saves `images.crat` and `labels.crat` (labels stored as floats) under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.images.save(dir.join("images.crat"))?;
        let labels = Tensor::new(vec![self.len()], self.labels.iter().map(|&l| l as f32).collect())?;
        labels.save(dir.join("labels.crat"))
    }

    pub fn load(dir: impl AsRef<Path>, num_classes: usize, split: Split) -> Result<Self> {
        let dir = dir.as_ref();
        let images: Tensor<f32> = Tensor::load(dir.join("images.crat"))?;
        let labels: Tensor<f32> = Tensor::load(dir.join("labels.crat"))?;
        let labels = labels
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::CorruptTensorFile(format!("label {v} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(images, labels, num_classes, split)
    }
}

fn corrupt(file: &Path, offset: u64, reason: impl Into<String>) -> Error {
    Error::CorruptDataset { file: file.to_path_buf(), offset, reason: reason.into() }
}

/// Parses one CIFAR-10 binary batch: records of one label byte followed by the R, G and B planes.
pub fn parse_cifar_batch(bytes: &[u8], file: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.is_empty() {
        return Err(corrupt(file, 0, "empty file"));
    }
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = (bytes.len() - bytes.len() % CIFAR_RECORD) as u64;
        return Err(corrupt(file, offset, format!("truncated record: {} bytes is not a multiple of {CIFAR_RECORD}", bytes.len())));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(corrupt(file, (i * CIFAR_RECORD) as u64, format!("label {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

fn load_files(dir: &Path, files: &[&str], split: Split) -> Result<LabeledDataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let path: PathBuf = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| corrupt(&path, 0, format!("cannot read: {e}")))?;
        let (p, l) = parse_cifar_batch(&bytes, &path)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let images = Tensor::new(vec![labels.len(), 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    LabeledDataset::new(images, labels, 10, split)
}

/// Loads `data_batch_1..5.bin` and `test_batch.bin`, scaling pixels by 1/255.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(LabeledDataset, LabeledDataset)> {
    let dir = dir.as_ref();
    Ok((load_files(dir, &CIFAR_TRAIN_FILES, Split::Train)?, load_files(dir, &[CIFAR_TEST_FILE], Split::Test)?))
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    /// Statistics of a (training) split, accumulated in `f64`.
    pub fn compute(data: &LabeledDataset) -> Self {
        let shape = data.images.shape();
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let (mut s, mut s2) = (0.0f64, 0.0f64);
            for i in 0..n {
                let start = (i * c + ch) * plane;
                for &v in &data.images.data()[start..start + plane] {
                    s += v as f64;
                    s2 += (v as f64) * (v as f64);
                }
            }
            let count = (n * plane).max(1) as f64;
            let m = s / count;
            mean[ch] = m as f32;
            std[ch] = (s2 / count - m * m).max(0.0).sqrt().max(1e-6) as f32;
        }
        Self { mean, std }
    }

    /// `(x - mean) / std` per channel, in place.
    pub fn apply(&self, images: &mut Tensor<f32>) {
        let shape = images.shape().to_vec();
        let (c, plane) = (shape[1], shape[2] * shape[3]);
        for (j, chunk) in images.data_mut().chunks_mut(plane).enumerate() {
            let ch = j % c;
            for v in chunk {
                *v = (*v - self.mean[ch]) / self.std[ch];
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub classes: usize,
    pub seed: u64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub side: usize,
}

impl SynthConfig {
    pub fn new(n: usize, classes: usize, seed: u64) -> Self {
        Self { n, classes, seed, noise: 0.05, side: CIFAR_SIDE }
    }
}

/// Class `c` is a coloured Gaussian blob placed on a circle at angle `2πc/k`, with a
/// class-specific hue, over a grey background plus pixel noise. Labels cycle `0, 1, .., k-1`,
/// so classes are balanced.
pub fn synth_dataset(config: &SynthConfig) -> Result<LabeledDataset> {
    let SynthConfig { n, classes: k, seed, noise, side } = *config;
    if k < 2 || n < k {
        return Err(Error::InvalidConfig(format!("synthetic dataset needs n >= k >= 2, got n={n}, k={k}")));
    }
    if side < 8 {
        return Err(Error::InvalidConfig(format!("synthetic images need side >= 8, got {side}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = side * side;
    let mut data = vec![0.0f32; n * 3 * plane];
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let center = (side as f64 - 1.0) / 2.0;
    let radius = side as f64 / 4.0;
    let sigma = side as f64 / 8.0;
    for (i, &c) in labels.iter().enumerate() {
        let angle = 2.0 * PI * c as f64 / k as f64;
        let cy = center + radius * angle.sin() + rng.random_range(-1.0..=1.0);
        let cx = center + radius * angle.cos() + rng.random_range(-1.0..=1.0);
        let colour: [f64; 3] = std::array::from_fn(|ch| 0.5 + 0.5 * (angle + 2.0 * PI * ch as f64 / 3.0).cos());
        let img = &mut data[i * 3 * plane..(i + 1) * 3 * plane];
        for ch in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let blob = (-d2 / (2.0 * sigma * sigma)).exp();
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    let v = 0.2 + 0.8 * blob * colour[ch] + noise * eps;
                    img[ch * plane + y * side + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    LabeledDataset::new(Tensor::new(vec![n, 3, side, side], data)?, labels, k, Split::Train)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Zero padding before the random crop back to the original size; 0 disables cropping.
    pub pad: usize,
    pub flip: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { pad: 4, flip: true }
    }
}

/// Crop of one `[C, H, W]` image zero-padded by `pad`, with top-left corner `(dy, dx)` in padded
/// coordinates (`0 ..= 2 * pad`).
pub fn pad_crop(image: &[f32], c: usize, h: usize, w: usize, pad: usize, dy: usize, dx: usize) -> Vec<f32> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = image[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Mirrors every row of a `[C, H, W]` image in place.
pub fn flip_horizontal(image: &mut [f32], w: usize) {
    for row in image.chunks_mut(w) {
        row.reverse();
    }
}

/// Random pad-and-crop then horizontal flip with probability 1/2, drawing crop offsets and the
/// flip decision per sample (in that order) from `rng`.
pub fn augment(batch: &Tensor<f32>, policy: AugmentPolicy, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let &[n, c, h, w] = batch.shape() else {
        return Err(Error::InvalidShape(format!("augment needs [N, C, H, W], got {:?}", batch.shape())));
    };
    let per = c * h * w;
    let mut out = Vec::with_capacity(batch.numel());
    for i in 0..n {
        let img = &batch.data()[i * per..(i + 1) * per];
        let mut img = if policy.pad > 0 {
            let dy = rng.random_range(0..=2 * policy.pad);
            let dx = rng.random_range(0..=2 * policy.pad);
            pad_crop(img, c, h, w, policy.pad, dy, dx)
        } else {
            img.to_vec()
        };
        if policy.flip && rng.random_bool(0.5) {
            flip_horizontal(&mut img, w);
        }
        out.extend(img);
    }
    Tensor::new(vec![n, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..CIFAR_PIXELS).map(fill));
        r
    }

    #[test]
    fn record_layout() {
        let mut bytes = record(7, |i| if i < 1024 { 255 } else { 0 });
        bytes.extend(record(2, |i| (i % 256) as u8));
        let (px, labels) = parse_cifar_batch(&bytes, Path::new("x.bin")).unwrap();
        assert_eq!(labels, [7, 2]);
        assert!(px[..1024].iter().all(|&v| v == 1.0));
        assert!(px[1024..CIFAR_PIXELS].iter().all(|&v| v == 0.0));
        assert_eq!(px[CIFAR_PIXELS + 3], 3.0 / 255.0);
    }

    #[test]
    fn truncated_batch() {
        let mut bytes = record(1, |_| 0);
        bytes.extend([0u8; 100]);
        match parse_cifar_batch(&bytes, Path::new("data_batch_1.bin")) {
            Err(Error::CorruptDataset { file, offset, .. }) => {
                assert_eq!(file, Path::new("data_batch_1.bin"));
                assert_eq!(offset, CIFAR_RECORD as u64);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_cifar10(dir.path()), Err(Error::CorruptDataset { .. })));
    }

    #[test]
    fn loads_directory() {
        let dir = tempfile::tempdir().unwrap();
        for (j, name) in CIFAR_TRAIN_FILES.iter().chain([&CIFAR_TEST_FILE]).enumerate() {
            let mut bytes = Vec::new();
            for i in 0..3 {
                bytes.extend(record(((i + j) % 10) as u8, |p| (p % 7) as u8));
            }
            fs::write(dir.path().join(name), bytes).unwrap();
        }
        let (train, test) = load_cifar10(dir.path()).unwrap();
        assert_eq!(train.len(), 15);
        assert_eq!(test.len(), 3);
        assert_eq!(train.images.shape(), [15, 3, 32, 32]);
        assert_eq!(&train.labels[..6], &[0, 1, 2, 1, 2, 3]);
        assert_eq!(test.split, Split::Test);
    }

    #[test]
    fn synth_balanced_and_deterministic() {
        let a = synth_dataset(&SynthConfig::new(100, 10, 1)).unwrap();
        let b = synth_dataset(&SynthConfig::new(100, 10, 1)).unwrap();
        let c = synth_dataset(&SynthConfig::new(100, 10, 2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.images, c.images);
        for k in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 10);
        }
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(synth_dataset(&SynthConfig::new(3, 4, 0)).is_err());
    }

    #[test]
    fn norm_stats_standardize() {
        let mut d = synth_dataset(&SynthConfig::new(16, 4, 3)).unwrap();
        let stats = NormStats::compute(&d);
        stats.apply(&mut d.images);
        let again = NormStats::compute(&d);
        for ch in 0..3 {
            assert!(again.mean[ch].abs() < 1e-4);
            assert!((again.std[ch] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = synth_dataset(&SynthConfig::new(8, 4, 3)).unwrap();
        d.save(dir.path()).unwrap();
        assert_eq!(LabeledDataset::load(dir.path(), 4, Split::Train).unwrap(), d);
    }

    #[test]
    fn centred_crop_is_identity() {
        let img: Vec<f32> = (0..3 * 32 * 32).map(|i| i as f32).collect();
        assert_eq!(pad_crop(&img, 3, 32, 32, 4, 4, 4), img);
        let shifted = pad_crop(&img, 3, 32, 32, 4, 0, 0);
        assert_eq!(shifted[0], 0.0);
        assert_eq!(shifted[4 * 32 + 4], img[0]);
    }

    proptest! {
        #[test]
        fn double_flip_is_identity(v in proptest::collection::vec(-1.0f32..1.0, 3 * 4 * 5)) {
            let mut img = v.clone();
            flip_horizontal(&mut img, 5);
            flip_horizontal(&mut img, 5);
            prop_assert_eq!(img, v);
        }

        #[test]
        fn augment_preserves_shape_and_is_reproducible(seed in 0u64..1000) {
            let d = synth_dataset(&SynthConfig::new(4, 2, 0)).unwrap();
            let a = augment(&d.images, AugmentPolicy::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = augment(&d.images, AugmentPolicy::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a.shape(), d.images.shape());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn crop_values_come_from_image_or_padding(dy in 0usize..=8, dx in 0usize..=8) {
            let img: Vec<f32> = (0..2 * 8 * 8).map(|i| i as f32 + 1.0).collect();
            let out = pad_crop(&img, 2, 8, 8, 4, dy, dx);
            prop_assert!(out.iter().all(|v| *v == 0.0 || img.contains(v)));
        }
    }
}
