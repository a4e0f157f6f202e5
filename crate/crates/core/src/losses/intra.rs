use rayon::prelude::*;

use super::contrastive::info_nce_pair;
use super::ContrastiveConfig;
use crate::encoder::{encoder_backward, forward, EncoderConfig, EncoderParams, Mode, Upstream};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Splits `0..n` into two disjoint random halves (the first gets `⌊n/2⌋`).
pub fn intra_split(n: usize, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InvalidDataset(format!(
            "intra-stain views need at least 2 patches, bag has {n}"
        )));
    }
    let perm = rng.permutation(n);
    let (a, b) = perm.split_at(n / 2);
    Ok((a.to_vec(), b.to_vec()))
}

/// Contrastive loss between two disjoint halves of each bag.
///
/// `bags` pairs each patch matrix with the stain index it is encoded under.
/// Both views of every bag are encoded in training mode, the `(view1, view2)`
/// batch goes through [`info_nce_pair`], and the result is backpropagated to
/// the encoder parameters.
pub fn intra_loss(
    bags: &[(&Matrix, usize)],
    params: &EncoderParams,
    enc_cfg: &EncoderConfig,
    cfg: &ContrastiveConfig,
    rng: &mut Rng,
) -> Result<(f64, EncoderParams)> {
    if bags.is_empty() {
        return Err(Error::InvalidDataset("intra loss needs at least one bag".into()));
    }
    let mut streams = Vec::with_capacity(bags.len());
    for _ in bags {
        streams.push(rng.fork());
    }
    let caches = bags
        .par_iter()
        .zip(streams.into_par_iter())
        .map(|(&(patches, stain), mut r)| {
            let (ia, ib) = intra_split(patches.rows(), &mut r)?;
            let va = forward(params, enc_cfg, &patches.select_rows(&ia), stain, Mode::Train(&mut r))?;
            let vb = forward(params, enc_cfg, &patches.select_rows(&ib), stain, Mode::Train(&mut r))?;
            Ok((va, vb))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows_a: Vec<&[f64]> = caches.iter().map(|(a, _)| a.output()).collect();
    let rows_b: Vec<&[f64]> = caches.iter().map(|(_, b)| b.output()).collect();
    let ea = Matrix::from_rows(&rows_a)?;
    let eb = Matrix::from_rows(&rows_b)?;
    let g = info_nce_pair(&ea, &eb, cfg)?;

    let mut all = Vec::with_capacity(2 * caches.len());
    let mut ups = Vec::with_capacity(2 * caches.len());
    for (i, (a, b)) in caches.iter().enumerate() {
        all.push(a);
        ups.push(Upstream { output: g.grad_a.row(i), hidden: None });
        all.push(b);
        ups.push(Upstream { output: g.grad_b.row(i), hidden: None });
    }
    let grads = encoder_backward(params, enc_cfg, &all, &ups)?;
    Ok((g.loss, grads))
}
