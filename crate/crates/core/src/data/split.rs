//! Stratified train/test splitting and per-class index partitions.

use rand::seq::SliceRandom;

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::SeedTree;

/// Cell indices per class, each list ascending.
pub fn class_partition(ds: &LabeledDataset) -> Vec<Vec<usize>> {
    let mut parts = vec![Vec::new(); ds.n_classes()];
    for (i, &c) in ds.classes.iter().enumerate() {
        parts[c].push(i);
    }
    parts
}

/// Stratified split: each class contributes floor(fraction * n_c), at
/// least 1, to the train side; the rest go to test. Classes with fewer
/// than 2 cells cannot be split.
pub fn split_dataset(
    ds: &LabeledDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(Error::Config(format!(
            "train_fraction {train_fraction} must be in (0,1)"
        )));
    }
    let parts = class_partition(ds);
    let mut rng = SeedTree::new(seed).stream("split");
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (class, mut idx) in parts.into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::Config(format!(
                "class {class} has {} cell(s); need at least 2 to split",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let take = ((train_fraction * idx.len() as f64).floor() as usize)
            .max(1)
            .min(idx.len() - 1);
        train_idx.extend_from_slice(&idx[..take]);
        test_idx.extend_from_slice(&idx[take..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((ds.select(&train_idx), ds.select(&test_idx)))
}
