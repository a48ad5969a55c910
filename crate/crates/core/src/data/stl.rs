//! STL-10 labeled binaries: `{train,test}_X.bin` hold 3x96x96 images, each
//! channel stored column-major; `{train,test}_y.bin` hold labels 1..=10.

use std::path::Path;

use super::{draw, LabeledDataset, Pixels, SplitSpec, Splits};
use crate::error::{Error, Result};

const SIDE: usize = 96;
pub const STL_IMAGE: usize = 3 * SIDE * SIDE;

/// Column-major file layout to row-major `(c, y, x)`.
pub fn decode_stl_image(raw: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; STL_IMAGE];
    for c in 0..3 {
        let plane = c * SIDE * SIDE;
        for x in 0..SIDE {
            for y in 0..SIDE {
                out[plane + y * SIDE + x] = raw[plane + x * SIDE + y];
            }
        }
    }
    out
}

pub fn encode_stl_image(image: &[u8]) -> Vec<u8> {
    // the layout change is a per-plane transpose, which is its own inverse
    decode_stl_image(image)
}

fn read_part(dir: &Path, name: &str) -> Result<(Vec<u8>, Vec<usize>)> {
    let xp = dir.join(format!("{name}_X.bin"));
    let yp = dir.join(format!("{name}_y.bin"));
    let x = std::fs::read(&xp).map_err(|e| Error::file(&xp, e))?;
    let y = std::fs::read(&yp).map_err(|e| Error::file(&yp, e))?;
    if x.is_empty() || x.len() % STL_IMAGE != 0 || x.len() / STL_IMAGE != y.len() {
        return Err(Error::Dataset {
            path: xp,
            reason: format!("{} image bytes for {} labels", x.len(), y.len()),
        });
    }
    let labels = y
        .iter()
        .map(|&l| match l {
            1..=10 => Ok(l as usize - 1),
            _ => Err(Error::Dataset {
                path: yp.clone(),
                reason: format!("label {l} outside 1..=10"),
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    let pixels = x
        .chunks_exact(STL_IMAGE)
        .flat_map(decode_stl_image)
        .collect();
    Ok((pixels, labels))
}

/// Training split is the full labeled training set; validation is a seeded
/// draw from the labeled test set and the remainder is the test split.
pub fn load_stl10(dir: &Path, split: &SplitSpec) -> Result<Splits> {
    let (train_px, train_y) = read_part(dir, "train")?;
    let (test_px, test_y) = read_part(dir, "test")?;
    if train_y.len() != split.train_count || test_y.len() != split.val_count + split.test_count {
        return Err(Error::Dataset {
            path: dir.to_owned(),
            reason: format!(
                "found {} train and {} test images, expected {} and {} + {}",
                train_y.len(),
                test_y.len(),
                split.train_count,
                split.val_count,
                split.test_count
            ),
        });
    }
    let dims = [3, SIDE, SIDE];
    let train = LabeledDataset::new(dims, Pixels::Bytes(train_px), train_y, 10)?;
    let pool_len = test_y.len();
    let pool = LabeledDataset::new(dims, Pixels::Bytes(test_px), test_y, 10)?;
    let (val_idx, test_idx) = draw(pool_len, split.val_count, split.split_seed);
    Splits::normalized(train, pool.subset(&val_idx)?, pool.subset(&test_idx)?)
}
