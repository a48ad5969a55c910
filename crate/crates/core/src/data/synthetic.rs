use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Pixels};
use crate::error::{Error, Result};
use crate::seed;

/// Gaussian class blobs. Class `k` has mean `k · separation` on every pixel
/// of channel 0 and a fixed random ±1 pattern on the other channels; noise
/// is unit-variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dims: [usize; 3],
    pub separation: f64,
    pub seed: u64,
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    let SyntheticSpec {
        classes,
        per_class,
        dims,
        separation,
        seed,
    } = *spec;
    if classes == 0 || per_class == 0 {
        return Err(Error::EmptyDataset);
    }
    let [c, h, w] = dims;
    let plane = h * w;
    let item = c * plane;
    let mut rng = seed::rng(seed);
    let patterns: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..item)
                .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                .collect()
        })
        .collect();

    let n = classes * per_class;
    let mut pixels = Vec::with_capacity(n * item);
    let mut labels = Vec::with_capacity(n);
    // interleave classes so any prefix is roughly balanced
    for _ in 0..per_class {
        for (k, pattern) in patterns.iter().enumerate() {
            for (j, p) in pattern.iter().enumerate() {
                let mean = if j < plane { k as f64 * separation } else { *p };
                let noise: f64 = StandardNormal.sample(&mut rng);
                pixels.push(mean + noise);
            }
            labels.push(k);
        }
    }
    LabeledDataset::new(dims, Pixels::Float(pixels), labels, classes)
}
