//! Seeded train/validation split at the image level.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// Shuffles image indices with `seed` and sends the first
/// `round(fraction · n)` to train. Both parts keep the original image order
/// and the full category table.
pub fn split_train_val(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidParam(format!("split fraction {fraction} must lie in (0, 1)")));
    }
    let n = ds.images.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fraction * n as f64).round() as usize;
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let part = |want: bool| Dataset {
        images: ds.images.iter().zip(&in_train).filter(|(_, &t)| t == want).map(|(im, _)| im.clone()).collect(),
        categories: ds.categories.clone(),
    };
    Ok((part(true), part(false)))
}
