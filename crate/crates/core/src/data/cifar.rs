//! CIFAR-10 / CIFAR-100 binary batches.
//!
//! CIFAR-10 records are `label, 3072 pixels`; CIFAR-100 records are
//! `coarse, fine, 3072 pixels`. Pixels are channel-major (1024 R, 1024 G,
//! 1024 B), each plane row-major.

use std::path::{Path, PathBuf};

use super::{draw, LabeledDataset, Pixels, SplitSpec, Splits};
use crate::error::{Error, Result};

const PIXELS: usize = 3 * 32 * 32;
pub const CIFAR10_RECORD: usize = 1 + PIXELS;
pub const CIFAR100_RECORD: usize = 2 + PIXELS;

const CIFAR10_TRAIN: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR10_TEST: &str = "test_batch.bin";
const CIFAR100_TRAIN: &str = "train.bin";
const CIFAR100_TEST: &str = "test.bin";

/// One decoded record. `coarse` is present only for CIFAR-100.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifarRecord {
    pub coarse: Option<u8>,
    pub label: u8,
    pub pixels: Vec<u8>,
}

impl CifarRecord {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        match bytes.len() {
            CIFAR10_RECORD => Ok(CifarRecord {
                coarse: None,
                label: bytes[0],
                pixels: bytes[1..].to_vec(),
            }),
            CIFAR100_RECORD => Ok(CifarRecord {
                coarse: Some(bytes[0]),
                label: bytes[1],
                pixels: bytes[2..].to_vec(),
            }),
            n => Err(Error::invalid(format!("{n} bytes is not a CIFAR record"))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CIFAR100_RECORD);
        out.extend(self.coarse);
        out.push(self.label);
        out.extend_from_slice(&self.pixels);
        out
    }
}

struct Raw {
    pixels: Vec<u8>,
    labels: Vec<usize>,
}

fn read_records(path: &Path, record: usize, classes: usize, raw: &mut Raw) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::Dataset {
            path: path.to_owned(),
            reason: format!(
                "{} bytes is not a whole number of {record}-byte records",
                bytes.len()
            ),
        });
    }
    let label_at = record - PIXELS - 1;
    for rec in bytes.chunks_exact(record) {
        let label = rec[label_at] as usize;
        if label >= classes {
            return Err(Error::Dataset {
                path: path.to_owned(),
                reason: format!("label {label} out of range for {classes} classes"),
            });
        }
        raw.labels.push(label);
        raw.pixels.extend_from_slice(&rec[record - PIXELS..]);
    }
    Ok(())
}

fn load(
    train_files: &[PathBuf],
    test_file: &Path,
    record: usize,
    classes: usize,
    split: &SplitSpec,
) -> Result<Splits> {
    let mut train = Raw {
        pixels: Vec::new(),
        labels: Vec::new(),
    };
    for f in train_files {
        read_records(f, record, classes, &mut train)?;
    }
    let mut test = Raw {
        pixels: Vec::new(),
        labels: Vec::new(),
    };
    read_records(test_file, record, classes, &mut test)?;

    let pool_len = train.labels.len();
    if pool_len != split.train_count + split.val_count || test.labels.len() != split.test_count {
        return Err(Error::Dataset {
            path: test_file.parent().unwrap_or(test_file).to_owned(),
            reason: format!(
                "found {pool_len} training and {} test records, expected {} + {} and {}",
                test.labels.len(),
                split.train_count,
                split.val_count,
                split.test_count
            ),
        });
    }
    let dims = [3, 32, 32];
    let pool = LabeledDataset::new(dims, Pixels::Bytes(train.pixels), train.labels, classes)?;
    let test = LabeledDataset::new(dims, Pixels::Bytes(test.pixels), test.labels, classes)?;
    let (val_idx, train_idx) = draw(pool_len, split.val_count, split.split_seed);
    Splits::normalized(pool.subset(&train_idx)?, pool.subset(&val_idx)?, test)
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`; validation
/// images are a seeded draw from the training records.
pub fn load_cifar10(dir: &Path, split: &SplitSpec) -> Result<Splits> {
    let train: Vec<PathBuf> = CIFAR10_TRAIN.iter().map(|f| dir.join(f)).collect();
    load(&train, &dir.join(CIFAR10_TEST), CIFAR10_RECORD, 10, split)
}

/// Loads `train.bin` and `test.bin` from `dir`, using the fine labels.
pub fn load_cifar100(dir: &Path, split: &SplitSpec) -> Result<Splits> {
    load(
        &[dir.join(CIFAR100_TRAIN)],
        &dir.join(CIFAR100_TEST),
        CIFAR100_RECORD,
        100,
        split,
    )
}
