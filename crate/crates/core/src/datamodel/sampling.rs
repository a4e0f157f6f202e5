use super::PatchEmbeddingBag;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Draws `n` row indices out of `available`.
///
/// With enough rows the draw is without replacement. Otherwise every row is
/// repeated `⌊n / available⌋` times and the remainder is filled with distinct
/// random rows; the result is shuffled.
pub fn sample_indices(available: usize, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if available == 0 {
        return Err(Error::EmptyBag);
    }
    if n == 0 {
        return Err(Error::config("n", "must be at least 1"));
    }
    if available >= n {
        // partial Fisher-Yates
        let mut idx: Vec<usize> = (0..available).collect();
        for i in 0..n {
            let j = i + rng.below(available - i);
            idx.swap(i, j);
        }
        idx.truncate(n);
        return Ok(idx);
    }
    let reps = n / available;
    let mut idx: Vec<usize> = Vec::with_capacity(n);
    for _ in 0..reps {
        idx.extend(0..available);
    }
    let remainder = n - reps * available;
    if remainder > 0 {
        idx.extend(sample_indices(available, remainder, rng)?);
    }
    rng.shuffle(&mut idx);
    Ok(idx)
}

/// Samples `n` patches from a bag, oversampling when the bag is smaller.
pub fn sample_patches(bag: &PatchEmbeddingBag, n: usize, rng: &mut Rng) -> Result<Matrix> {
    let idx = sample_indices(bag.n_patches(), n, rng)?;
    Ok(bag.embeddings.select_rows(&idx))
}
