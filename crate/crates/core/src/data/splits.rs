use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample indices of every pool. Train indices are `0..train_size`, followed
/// by validation and then test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub labeled_fraction: f64,
}

pub fn labeled_count(train_size: usize, fraction: f64) -> usize {
    (fraction * train_size as f64).round() as usize
}

pub fn make_splits(
    train_size: usize,
    labeled_fraction: f64,
    val_size: usize,
    test_size: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "labeled fraction {labeled_fraction} outside (0, 1]"
        )));
    }
    if train_size == 0 || val_size == 0 || test_size == 0 {
        return Err(Error::Config("split sizes must be positive".into()));
    }
    let n_labeled = labeled_count(train_size, labeled_fraction);
    if n_labeled == 0 {
        return Err(Error::Config(format!(
            "fraction {labeled_fraction} of {train_size} leaves no labeled sample"
        )));
    }
    let mut order: Vec<usize> = (0..train_size).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labeled = order[..n_labeled].to_vec();
    let mut unlabeled = order[n_labeled..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(DatasetSplit {
        labeled,
        unlabeled,
        val: (train_size..train_size + val_size).collect(),
        test: (train_size + val_size..train_size + val_size + test_size).collect(),
        labeled_fraction,
    })
}
