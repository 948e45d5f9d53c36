use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Shuffle `0..n` with `seed`, then deal the indices round-robin into `k`
/// folds. Fold sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::Config(format!("cannot split {n} samples into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (pos, i) in idx.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    Ok(folds)
}

/// Indices of every fold except `fold`, in fold order.
pub fn training_indices(folds: &[Vec<usize>], fold: usize) -> Vec<usize> {
    folds
        .iter()
        .enumerate()
        .filter(|&(f, _)| f != fold)
        .flat_map(|(_, ix)| ix.iter().copied())
        .collect()
}

/// Short hex digest of a fold assignment; equal splits give equal digests.
pub fn fold_fingerprint(folds: &[Vec<usize>]) -> String {
    let mut h = crc32fast::Hasher::new();
    for f in folds {
        h.update(&(f.len() as u32).to_le_bytes());
        for &i in f {
            h.update(&(i as u32).to_le_bytes());
        }
    }
    format!("{:08x}", h.finalize())
}
