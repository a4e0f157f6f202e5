use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use super::objective::{batch_objective, Objective};
use super::LossMode;
use crate::datamodel::{MultistainCase, PatchEmbeddingBag, StainId};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{ContrastiveConfig, GotConfig};
use crate::numerics::{Matrix, Rng};

/// Size of the random instance and the comparison rule.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub n_cases: usize,
    pub n_patches: usize,
    /// Central-difference half step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Relative-error denominators never drop below `floor` times the
    /// largest gradient component, so near-zero coordinates are judged on
    /// the scale of the whole gradient.
    pub floor: f64,
    pub contrastive: ContrastiveConfig,
    /// Node-term weight; 0.5 exercises both transport terms.
    pub gamma: f64,
    /// Negates the analytic gradient. A negative control for the checker.
    #[doc(hidden)]
    pub flip_sign: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            n_cases: 4,
            n_patches: 6,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            // logits of a freshly initialized tiny net are O(1); at τ = 1e-3
            // the softmax is saturated and the loss curvature swamps the
            // finite differences
            contrastive: ContrastiveConfig { temperature: 0.1, normalize: false },
            gamma: 0.5,
            flip_sign: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub mode: LossMode,
    pub n_params: usize,
    pub max_rel_error: f64,
    /// `block[index]` of the worst coordinate.
    pub worst: String,
    pub passed: bool,
}

fn random_cases(enc_cfg: &EncoderConfig, cfg: &GradcheckConfig, rng: &mut Rng) -> Result<Vec<MultistainCase>> {
    (0..cfg.n_cases)
        .map(|c| {
            let mut bag = |index: usize| {
                let x = Matrix::from_fn(cfg.n_patches, enc_cfg.d_patch, |_, _| rng.normal());
                PatchEmbeddingBag::new(StainId::new(format!("S{index}"), index), x)
            };
            let anchor = bag(0)?;
            // every other case misses the last stain, so sub-batches differ
            let last = if c % 2 == 1 && enc_cfg.n_stains > 2 { enc_cfg.n_stains - 1 } else { enc_cfg.n_stains };
            let others = (1..last).map(&mut bag).collect::<Result<Vec<_>>>()?;
            Ok(MultistainCase {
                case_id: format!("case{c}"),
                anchor,
                others,
                labels: BTreeMap::new(),
                survival: None,
            })
        })
        .collect()
}

/// Compares the analytic gradient of the batch objective with central
/// finite differences over every parameter of a small random instance.
///
/// Transport plans and graph edges are frozen after a first solve, dropout
/// masks and patch draws are replayed from the same stream, so the checked
/// function is smooth. Relative error per coordinate is
/// `|a − n| / max(|a|, |n|, floor·‖a‖_∞)`.
pub fn gradcheck(
    enc_cfg: &EncoderConfig,
    mode: LossMode,
    cfg: &GradcheckConfig,
    rng: &mut Rng,
) -> Result<GradcheckReport> {
    enc_cfg.validate()?;
    cfg.contrastive.validate()?;
    if cfg.n_patches < 2 || cfg.n_cases < 1 {
        return Err(Error::config("gradcheck", "needs at least one case of two patches"));
    }
    if enc_cfg.n_stains < 2 && mode.is_cross_modal() {
        return Err(Error::config("n_stains", "cross-modal checks need at least 2 stains"));
    }
    let params = EncoderParams::init(enc_cfg, rng)?;
    let cases = random_cases(enc_cfg, cfg, rng)?;
    let refs: Vec<&MultistainCase> = cases.iter().collect();
    let got = GotConfig {
        gamma: cfg.gamma,
        sample_size: cfg.n_patches.max(2),
        ..Default::default()
    };
    let obj = Objective {
        mode,
        patches_per_bag: cfg.n_patches,
        contrastive: &cfg.contrastive,
        got: &got,
    };
    let stream = rng.fork();

    let first = batch_objective(&params, enc_cfg, &refs, &obj, &mut stream.clone(), None)?;
    let frozen = first.transport;
    let at = |p: &EncoderParams| batch_objective(p, enc_cfg, &refs, &obj, &mut stream.clone(), Some(&frozen));
    let analytic = at(&params)?.grads.to_flat();

    let flat = params.to_flat();
    let h = cfg.step;
    let numeric = (0..flat.len())
        .into_par_iter()
        .map(|i| {
            let mut p = params.clone();
            let mut x = flat.clone();
            x[i] = flat[i] + h;
            p.set_flat(&x)?;
            let up = at(&p)?.report.total;
            x[i] = flat[i] - h;
            p.set_flat(&x)?;
            let down = at(&p)?.report.total;
            Ok((up - down) / (2.0 * h))
        })
        .collect::<Result<Vec<f64>>>()?;

    let sign = if cfg.flip_sign { -1.0 } else { 1.0 };
    let scale = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs())) * cfg.floor;
    let mut worst = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let a = sign * a;
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(scale).max(f64::MIN_POSITIVE);
        if !(rel <= worst.0) {
            worst = (rel, i);
        }
    }
    Ok(GradcheckReport {
        mode,
        n_params: flat.len(),
        max_rel_error: worst.0,
        worst: locate(&params, worst.1),
        passed: worst.0 < cfg.tolerance,
    })
}

fn locate(params: &EncoderParams, mut i: usize) -> String {
    for (name, b) in params.block_names().into_iter().zip(params.blocks()) {
        let len = b.as_slice().len();
        if i < len {
            return format!("{name}[{}, {}]", i / b.cols(), i % b.cols());
        }
        i -= len;
    }
    String::from("?")
}

/// Encoder small enough for exhaustive finite differences (under 1000
/// parameters) that still has two heads, two pre-attention layers and
/// three stains.
pub fn gradcheck_encoder() -> EncoderConfig {
    EncoderConfig {
        d_patch: 4,
        d_se: 2,
        d_hidden: 5,
        d_attn: 3,
        n_heads: 2,
        n_pre_layers: 2,
        post_hidden: 6,
        d_out: 4,
        n_stains: 3,
        ..Default::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_mode_passes() {
        for mode in LossMode::ALL {
            let r = gradcheck(&gradcheck_encoder(), mode, &GradcheckConfig::default(), &mut Rng::new(11)).unwrap();
            assert!(r.passed, "{mode}: {r:?}");
            assert!(r.n_params <= 1000);
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        let cfg = GradcheckConfig { flip_sign: true, ..Default::default() };
        let r = gradcheck(&gradcheck_encoder(), LossMode::InfoNce, &cfg, &mut Rng::new(11)).unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 1.0);
    }
}
