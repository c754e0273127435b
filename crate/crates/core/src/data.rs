//! Datasets: CIFAR binary archives, stratified subsets, a procedural shape
//! set for tests, and seeded batching.
//!
//! Pixels stay in `[0, 1]`; no per-channel normalization is applied, so
//! attack budgets act on that scale.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::error::{Error, Result};
use crate::seed::{self, stream};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N x C x H x W`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, split: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 || images.rows() != labels.len() || labels.is_empty() {
            return Err(Error::Shape {
                op: "dataset",
                lhs: images.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::validation(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> Image {
        let [c, h, w] = self.image_shape();
        Image::clamped(c, h, w, self.images.row(i).to_vec())
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (
            self.images.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(indices);
        Self::new(images, labels, self.num_classes, self.split.clone())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Cifar10,
    Cifar100Fine,
}

impl CifarVariant {
    pub fn record_size(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + CIFAR_PIXELS,
            CifarVariant::Cifar100Fine => 2 + CIFAR_PIXELS,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100Fine => 100,
        }
    }

    /// Archive file names for a split, in load order.
    pub fn files(self, split: Split) -> Vec<&'static str> {
        match (self, split) {
            (CifarVariant::Cifar10, Split::Train) => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (CifarVariant::Cifar10, Split::Test) => vec!["test_batch.bin"],
            (CifarVariant::Cifar100Fine, Split::Train) => vec!["train.bin"],
            (CifarVariant::Cifar100Fine, Split::Test) => vec!["test.bin"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Decodes CIFAR records: label byte(s) followed by the R, G and B planes.
pub fn parse_cifar_binary(bytes: &[u8], variant: CifarVariant, split: &str, origin: &Path) -> Result<Dataset> {
    let size = variant.record_size();
    let data_err = |reason: String| Error::Data {
        path: origin.to_path_buf(),
        reason,
    };
    if bytes.is_empty() {
        return Err(data_err("file is empty".into()));
    }
    if !bytes.len().is_multiple_of(size) {
        return Err(data_err(format!(
            "length {} is not a multiple of the {size}-byte record (truncated or wrong variant)",
            bytes.len()
        )));
    }
    let n = bytes.len() / size;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for record in bytes.chunks_exact(size) {
        let label = match variant {
            CifarVariant::Cifar10 => record[0],
            CifarVariant::Cifar100Fine => record[1],
        } as usize;
        if label >= variant.num_classes() {
            return Err(data_err(format!("label byte {label} out of range")));
        }
        labels.push(label);
        pixels.extend(record[size - CIFAR_PIXELS..].iter().map(|&b| b as f32 / 255.0));
    }
    let images = Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    Dataset::new(images, labels, variant.num_classes(), split)
}

pub fn load_cifar_binary(path: impl AsRef<Path>, variant: CifarVariant) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let split = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_cifar_binary(&bytes, variant, &split, path)
}

/// Loads and concatenates every archive of `split` under `dir`.
pub fn load_cifar_split(dir: impl AsRef<Path>, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for file in variant.files(split) {
        let part = load_cifar_binary(dir.join(file), variant)?;
        labels.extend(part.labels);
        images.extend(part.images.into_data());
    }
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], images)?,
        labels,
        variant.num_classes(),
        split.name(),
    )
}

/// Directory holding the CIFAR archives, if the caller has provided one.
pub fn cifar_dir_from_env(var: &str) -> Option<PathBuf> {
    std::env::var_os(var).map(PathBuf::from).filter(|p| p.is_dir())
}

/// Class-stratified choice of `n` indices, returned in ascending order.
/// Classes are drawn round-robin so per-class counts differ by at most one
/// (among classes that still have samples left).
pub fn subset_indices(ds: &Dataset, n: usize, seed: u64) -> Result<Vec<usize>> {
    let k = ds.num_classes;
    if n > ds.len() {
        return Err(Error::validation(format!("subset of {n} from {} samples", ds.len())));
    }
    if n < k {
        return Err(Error::validation(format!("subset of {n} cannot cover {k} classes")));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in ds.labels.iter().enumerate() {
        pools[l].push(i);
    }
    for (c, pool) in pools.iter_mut().enumerate() {
        pool.shuffle(&mut seed::rng_for(&[seed, stream::SUBSET, c as u64]));
    }
    let mut class_order: Vec<usize> = (0..k).collect();
    class_order.shuffle(&mut seed::rng_for(&[seed, stream::SUBSET, u64::MAX]));

    let mut chosen = Vec::with_capacity(n);
    let mut round = 0;
    while chosen.len() < n {
        for &c in &class_order {
            if chosen.len() == n {
                break;
            }
            if let Some(&i) = pools[c].get(round) {
                chosen.push(i);
            }
        }
        round += 1;
    }
    chosen.sort_unstable();
    Ok(chosen)
}

pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    ds.select(&subset_indices(ds, n, seed)?)
}

/// Deterministic permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng_for(&[seed, stream::SHUFFLE, epoch]));
    order
}

/// Index batches of one shuffled epoch; the last batch may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    Ok(epoch_order(n, seed, epoch)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Unshuffled consecutive batches, for evaluation.
pub fn sequential_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

pub const MAX_SHAPES: usize = 8;

fn inside(shape: usize, dx: f32, dy: f32, r: f32) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match shape {
        // filled square
        0 => ax <= r && ay <= r,
        // disc
        1 => dx * dx + dy * dy <= r * r,
        // upward triangle
        2 => dy <= r && dy >= -r && ax <= (dy + r) / 2.0,
        // ring
        3 => {
            let d = (dx * dx + dy * dy).sqrt();
            d <= r && d >= 0.55 * r
        }
        // plus sign
        4 => (ax <= r && ay <= 0.3 * r) || (ay <= r && ax <= 0.3 * r),
        // horizontal bar
        5 => ax <= r && ay <= 0.35 * r,
        // vertical bar
        6 => ay <= r && ax <= 0.35 * r,
        // diamond
        _ => ax + ay <= r,
    }
}

/// `n` RGB `32 x 32` images of `k` procedural shapes with random size,
/// position, colours and pixel noise. Labels cycle `0..k`.
pub fn synthesize_shapes(n: usize, k: usize, seed: u64) -> Result<Dataset> {
    if !(2..=MAX_SHAPES).contains(&k) {
        return Err(Error::config(format!("shape classes must be in 2..={MAX_SHAPES}")));
    }
    if n < k {
        return Err(Error::config(format!("{n} samples cannot cover {k} shape classes")));
    }
    let side = CIFAR_SIDE;
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        let mut rng = seed::rng_for(&[seed, i as u64]);
        let r: f32 = rng.random_range(6.0..11.0);
        let cx: f32 = rng.random_range(r..side as f32 - r);
        let cy: f32 = rng.random_range(r..side as f32 - r);
        let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.45));
        let fg: [f32; 3] = std::array::from_fn(|c| (bg[c] + rng.random_range(0.3..0.55)).min(1.0));
        let mut img = vec![0.0f32; CIFAR_PIXELS];
        for y in 0..side {
            for x in 0..side {
                let hit = inside(label, x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, r);
                for c in 0..3 {
                    let base = if hit { fg[c] } else { bg[c] };
                    let noise: f32 = rng.random_range(-0.05..0.05);
                    img[(c * side + y) * side + x] = (base + noise).clamp(0.0, 1.0);
                }
            }
        }
        data.extend(img);
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![n, 3, side, side], data)?, labels, k, "synthetic")
}
