//! Labeled image datasets: official CIFAR/STL binary loaders, deterministic
//! splits, per-channel standardization, shuffled minibatches and synthetic
//! fixtures.

mod cifar;
mod stl;
mod synthetic;

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use cifar::{load_cifar10, load_cifar100, CifarRecord, CIFAR100_RECORD, CIFAR10_RECORD};
pub use stl::{decode_stl_image, encode_stl_image, load_stl10, STL_IMAGE};
pub use synthetic::{make_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::gradcore::Tensor4;
use crate::seed;

/// Raw pixel storage. Bytes are scaled to `[0, 1]` before normalization.
#[derive(Clone, Debug, PartialEq)]
pub enum Pixels {
    Bytes(Vec<u8>),
    Float(Vec<f64>),
}

impl Pixels {
    fn len(&self) -> usize {
        match self {
            Pixels::Bytes(b) => b.len(),
            Pixels::Float(f) => f.len(),
        }
    }

    #[inline]
    fn raw(&self, i: usize) -> f64 {
        match self {
            Pixels::Bytes(b) => b[i] as f64 / 255.0,
            Pixels::Float(f) => f[i],
        }
    }

    fn gather(&self, item_len: usize, indices: &[usize]) -> Pixels {
        match self {
            Pixels::Bytes(b) => Pixels::Bytes(
                indices
                    .iter()
                    .flat_map(|&i| &b[i * item_len..(i + 1) * item_len])
                    .copied()
                    .collect(),
            ),
            Pixels::Float(f) => Pixels::Float(
                indices
                    .iter()
                    .flat_map(|&i| &f[i * item_len..(i + 1) * item_len])
                    .copied()
                    .collect(),
            ),
        }
    }
}

/// Per-channel standardization `(x − mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Images with integer labels. Pixels are kept raw and standardized when a
/// batch is materialized, so every view of the data applies the same stats.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    dims: [usize; 3],
    pixels: Arc<Pixels>,
    labels: Vec<usize>,
    class_count: usize,
    norm: Normalization,
}

impl LabeledDataset {
    pub fn new(
        dims: [usize; 3],
        pixels: Pixels,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let item: usize = dims.iter().product();
        if item == 0 || pixels.len() != item * labels.len() {
            return Err(Error::shape(format!(
                "{} pixel values for {} images of {dims:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&target) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::TargetOutOfRange {
                target,
                classes: class_count,
            });
        }
        Ok(LabeledDataset {
            dims,
            pixels: Arc::new(pixels),
            labels,
            class_count,
            norm: Normalization::identity(dims[0]),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)` of one image.
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn pixels(&self) -> &Pixels {
        &self.pixels
    }

    fn item_len(&self) -> usize {
        self.dims.iter().product()
    }

    /// Per-channel mean and population standard deviation of the raw
    /// (pre-normalization) values.
    pub fn fit_normalization(&self) -> Normalization {
        let [c, h, w] = self.dims;
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        let count = (self.len() * plane) as f64;
        for ch in 0..c {
            let values = (0..self.len()).flat_map(|i| {
                let base = (i * c + ch) * plane;
                (base..base + plane).map(|j| self.pixels.raw(j))
            });
            let m = values.clone().sum::<f64>() / count;
            let var = values.map(|v| (v - m) * (v - m)).sum::<f64>() / count;
            mean[ch] = m;
            std[ch] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Normalization { mean, std }
    }

    /// Same images with `norm` in place of the current statistics.
    pub fn with_normalization(mut self, norm: Normalization) -> Result<Self> {
        if norm.mean.len() != self.dims[0] || norm.std.len() != self.dims[0] {
            return Err(Error::shape("normalization channel count mismatch"));
        }
        if norm.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("normalization std must be positive"));
        }
        self.norm = norm;
        Ok(self)
    }

    /// Standardized images at `indices`, as `(len, c, h, w)`.
    pub fn images(&self, indices: &[usize]) -> Tensor4 {
        let [c, h, w] = self.dims;
        let plane = h * w;
        let item = self.item_len();
        let mut data = Vec::with_capacity(indices.len() * item);
        for &i in indices {
            for ch in 0..c {
                let (m, s) = (self.norm.mean[ch], self.norm.std[ch]);
                let base = i * item + ch * plane;
                data.extend((base..base + plane).map(|j| (self.pixels.raw(j) - m) / s));
            }
        }
        Tensor4::from_vec([indices.len(), c, h, w], data).expect("non-empty batch")
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// New dataset holding the listed images, keeping the normalization.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("index {i} out of range")));
        }
        Ok(LabeledDataset {
            dims: self.dims,
            pixels: Arc::new(self.pixels.gather(self.item_len(), indices)),
            labels: self.labels_at(indices),
            class_count: self.class_count,
            norm: self.norm.clone(),
        })
    }

    /// First `n` images (all of them if `n ≥ len`).
    pub fn truncate(&self, n: usize) -> Result<Self> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        self.subset(&(0..n).collect::<Vec<_>>())
    }
}

/// Split cardinalities and the seed of the validation draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub split_seed: u64,
}

impl SplitSpec {
    pub fn cifar10(split_seed: u64) -> Self {
        SplitSpec {
            train_count: 45_000,
            val_count: 5_000,
            test_count: 10_000,
            split_seed,
        }
    }

    pub fn cifar100(split_seed: u64) -> Self {
        Self::cifar10(split_seed)
    }

    pub fn stl10(split_seed: u64) -> Self {
        SplitSpec {
            train_count: 5_000,
            val_count: 1_000,
            test_count: 7_000,
            split_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

impl Splits {
    /// Fits normalization on `train` and applies it to all three splits.
    pub fn normalized(
        train: LabeledDataset,
        val: LabeledDataset,
        test: LabeledDataset,
    ) -> Result<Self> {
        let norm = train.fit_normalization();
        Ok(Splits {
            train: train.with_normalization(norm.clone())?,
            val: val.with_normalization(norm.clone())?,
            test: test.with_normalization(norm)?,
        })
    }

    /// Carves `val_count` and `test_count` images out of one pool by seeded
    /// permutation; the rest is training data.
    pub fn carve(
        pool: &LabeledDataset,
        val_count: usize,
        test_count: usize,
        seed: u64,
    ) -> Result<Self> {
        if val_count + test_count >= pool.len() {
            return Err(Error::invalid("pool too small for the requested splits"));
        }
        let perm = permutation(pool.len(), seed);
        let mut val = perm[..val_count].to_vec();
        let mut test = perm[val_count..val_count + test_count].to_vec();
        let mut train = perm[val_count + test_count..].to_vec();
        val.sort_unstable();
        test.sort_unstable();
        train.sort_unstable();
        Self::normalized(
            pool.subset(&train)?,
            pool.subset(&val)?,
            pool.subset(&test)?,
        )
    }

    /// Keeps at most the first `train`, `val`, `test` images of each split.
    /// Normalization is refit on the reduced training split.
    pub fn limit(&self, train: usize, val: usize, test: usize) -> Result<Self> {
        Self::normalized(
            self.train.truncate(train)?,
            self.val.truncate(val)?,
            self.test.truncate(test)?,
        )
    }
}

/// Seeded uniform permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed));
    idx
}

/// Splits `indices` into `(first k sorted, rest sorted)` after a seeded
/// permutation.
pub(crate) fn draw(n: usize, k: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let perm = permutation(n, seed);
    let mut picked = perm[..k].to_vec();
    let mut rest = perm[k..].to_vec();
    picked.sort_unstable();
    rest.sort_unstable();
    (picked, rest)
}

/// Shuffled minibatch index lists for one epoch. The final batch may be
/// short; every index in `0..len` appears exactly once.
pub fn batches(len: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    Ok(permutation(len, epoch_seed)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Index lists in natural order, for evaluation.
pub fn sequential_batches(len: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..len)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
