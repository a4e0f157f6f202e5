use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::MultistainCase;
use crate::encoder::{forward, EncoderConfig, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::numerics::{svd_values, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankMeConfig {
    /// Added to every normalized singular value before taking logs.
    pub epsilon: f64,
    /// Score only anchor-stain slide embeddings; otherwise every bag counts.
    pub anchor_only: bool,
}

impl Default for RankMeConfig {
    fn default() -> Self {
        Self { epsilon: 1e-7, anchor_only: true }
    }
}

impl RankMeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config("epsilon", "must be positive and finite"));
        }
        Ok(())
    }
}

/// Effective rank `exp(−Σ p_k log p_k)` with `p_k = σ_k/‖σ‖₁ + ε`.
pub fn rankme(embeddings: &Matrix, cfg: &RankMeConfig) -> Result<f64> {
    cfg.validate()?;
    let sv = svd_values(embeddings)?;
    let total: f64 = sv.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("rankme of an all-zero matrix".into()));
    }
    let entropy: f64 = sv
        .iter()
        .map(|s| {
            let p = s / total + cfg.epsilon;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

/// Eval-mode slide embeddings of every case (all patches of each bag), one
/// row per bag, in case order.
pub fn rankme_embeddings(
    cases: &[MultistainCase],
    params: &EncoderParams,
    enc_cfg: &EncoderConfig,
    cfg: &RankMeConfig,
) -> Result<Matrix> {
    let rows = cases
        .par_iter()
        .map(|case| {
            let bags: Vec<_> = if cfg.anchor_only {
                vec![&case.anchor]
            } else {
                case.bags().collect()
            };
            bags.into_iter()
                .map(|b| Ok(forward(params, enc_cfg, &b.embeddings, b.stain.index, Mode::Eval)?.output().to_vec()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<f64>> = rows.into_iter().flatten().collect();
    Matrix::from_rows(&rows)
}
