//! Synthetic multistain cohorts with known latent structure.
//!
//! Each case has a latent vector `z ~ N(0, I)`. Every stain `s` owns a fixed
//! `d × latent_dim` map `A_s` with orthonormal columns. A bag for stain `s`
//! mixes signal patches `A_s·z + σ·ε` with isotropic `N(0, I)` distractor
//! patches. The class label is the nearest of `n_classes` centroids to `z`
//! (centroids are centered so the classes are roughly balanced) and the
//! survival time is `exp(z₀)` with uniform random censoring.
//!
//! Draw order for a seed: stain maps (stain 0 first), centroids, then per case
//! `z`, stain presence, censoring, and for each present stain the patch count,
//! signal rows, distractor rows and the row shuffle. All values are rounded to
//! `f32` so bundles round-trip exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    Dataset, MultistainCase, PatchEmbeddingBag, Provenance, StainId, Survival, CLASS_TASK,
};
use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix, Rng, RNG_ALGORITHM};

pub const DEFAULT_STAIN_NAMES: [&str; 5] = ["HE", "ER", "PR", "HER2", "KI67"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_cases: usize,
    /// Number of non-anchor stains.
    pub k: usize,
    pub d: usize,
    pub latent_dim: usize,
    /// Inclusive `[min, max]` patch count per bag.
    pub patches_per_bag: [usize; 2],
    pub signal_fraction: f64,
    pub noise_sigma: f64,
    pub n_classes: usize,
    /// Probability that a given non-anchor stain is missing for a case. At
    /// least one non-anchor stain is always kept.
    pub missing_stain_prob: f64,
    pub censoring_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_cases: 200,
            k: 2,
            d: 32,
            latent_dim: 4,
            patches_per_bag: [64, 128],
            signal_fraction: 0.3,
            noise_sigma: 0.5,
            n_classes: 2,
            missing_stain_prob: 0.0,
            censoring_rate: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |f: &str, r: String| Err(Error::config(f, r));
        if self.n_cases == 0 {
            return fail("n_cases", "must be at least 1".into());
        }
        if self.k == 0 {
            return fail("k", "must be at least 1".into());
        }
        if self.d == 0 {
            return fail("d", "must be at least 1".into());
        }
        if self.latent_dim == 0 || self.latent_dim > self.d {
            return fail("latent_dim", format!("must be in [1, d={}], got {}", self.d, self.latent_dim));
        }
        let [lo, hi] = self.patches_per_bag;
        if lo == 0 || lo > hi {
            return fail("patches_per_bag", format!("need 1 <= min <= max, got [{lo}, {hi}]"));
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction <= 1.0) {
            return fail("signal_fraction", format!("must be in (0, 1], got {}", self.signal_fraction));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return fail("noise_sigma", format!("must be >= 0, got {}", self.noise_sigma));
        }
        if self.n_classes == 0 {
            return fail("n_classes", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.missing_stain_prob) {
            return fail("missing_stain_prob", format!("must be in [0, 1), got {}", self.missing_stain_prob));
        }
        if !(0.0..=1.0).contains(&self.censoring_rate) {
            return fail("censoring_rate", format!("must be in [0, 1], got {}", self.censoring_rate));
        }
        Ok(())
    }

    pub fn stain_table(&self) -> Vec<StainId> {
        (0..=self.k)
            .map(|i| match DEFAULT_STAIN_NAMES.get(i) {
                Some(name) => StainId::new(*name, i),
                None => StainId::new(format!("S{i}"), i),
            })
            .collect()
    }
}

/// `d × r` matrix with orthonormal columns from a Gaussian draw.
fn orthonormal_columns(d: usize, r: usize, rng: &mut Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(r);
    while cols.len() < r {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for c in &cols {
            let p = dot(&v, c);
            for (x, y) in v.iter_mut().zip(c) {
                *x -= p * y;
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            cols.push(v);
        }
    }
    Matrix::from_fn(d, r, |i, j| cols[j][i])
}

#[inline]
fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

pub fn synth_generate(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let stains = cfg.stain_table();
    let maps: Vec<Matrix> = stains
        .iter()
        .map(|_| orthonormal_columns(cfg.d, cfg.latent_dim, &mut rng))
        .collect();

    let mut centroids: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| (0..cfg.latent_dim).map(|_| rng.normal()).collect())
        .collect();
    for j in 0..cfg.latent_dim {
        let mean = centroids.iter().map(|c| c[j]).sum::<f64>() / cfg.n_classes as f64;
        centroids.iter_mut().for_each(|c| c[j] -= mean);
    }

    let mut cases = Vec::with_capacity(cfg.n_cases);
    for i in 0..cfg.n_cases {
        let z: Vec<f64> = (0..cfg.latent_dim).map(|_| rng.normal()).collect();
        let label = nearest(&z, &centroids);

        let mut present: Vec<bool> = (0..cfg.k).map(|_| !rng.bernoulli(cfg.missing_stain_prob)).collect();
        if !present.iter().any(|&p| p) {
            present[rng.below(cfg.k)] = true;
        }
        let event = !rng.bernoulli(cfg.censoring_rate);
        let time = round_f32(z[0].exp());

        let mut bags = Vec::new();
        for (s, stain) in stains.iter().enumerate() {
            if s > 0 && !present[s - 1] {
                continue;
            }
            let embeddings = synth_bag(cfg, &maps[s], &z, &mut rng);
            bags.push(PatchEmbeddingBag::new(stain.clone(), embeddings)?);
        }
        let anchor = bags.remove(0);
        cases.push(MultistainCase {
            case_id: format!("case{i:05}"),
            anchor,
            others: bags,
            labels: BTreeMap::from([(CLASS_TASK.to_string(), label)]),
            survival: Some(Survival { time, event }),
        });
    }

    Dataset::new(
        cfg.d,
        stains,
        cases,
        Provenance {
            rng: RNG_ALGORITHM.to_string(),
            seed: Some(cfg.seed),
            synthetic: Some(cfg.clone()),
        },
    )
}

fn nearest(z: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d: f64 = z.iter().zip(centroid).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn synth_bag(cfg: &SyntheticConfig, map: &Matrix, z: &[f64], rng: &mut Rng) -> Matrix {
    let n = rng.range_inclusive(cfg.patches_per_bag[0], cfg.patches_per_bag[1]);
    let n_signal = ((cfg.signal_fraction * n as f64).round() as usize).clamp(1, n);
    let lifted = map.mul_vec(z).expect("map width equals latent_dim");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n_signal {
        rows.push(lifted.iter().map(|&x| round_f32(x + cfg.noise_sigma * rng.normal())).collect());
    }
    for _ in n_signal..n {
        rows.push((0..cfg.d).map(|_| round_f32(rng.normal())).collect());
    }
    rng.shuffle(&mut rows);
    Matrix::from_rows(&rows).expect("rows have equal width")
}
