//! Pretraining: learning-rate schedule, AdamW, RankMe model selection, the
//! composite batch objective, the epoch loop, and finite-difference checks.

mod gradcheck;
mod log;
mod objective;
mod optim;
mod rankme;
mod schedule;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::{ContrastiveConfig, GotConfig};

pub use gradcheck::{gradcheck, gradcheck_encoder, GradcheckConfig, GradcheckReport};
pub use log::{write_log_csv, LogRow, LOG_COLUMNS};
pub use objective::{batch_objective, BatchOutput, FrozenTransport, Objective};
pub use optim::{adamw_step, OptimizerState};
pub use rankme::{rankme, rankme_embeddings, RankMeConfig};
pub use schedule::lr_at;
pub use train::{best_checkpoint_dir, train, BestPointer, TrainOutcome, BEST_FILE, CHECKPOINT_DIR, FINAL_DIR, LAST_GOOD_DIR, LOG_FILE};

/// Which objectives enter the composite loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "infonce")]
    InfoNce,
    #[serde(rename = "mse")]
    Mse,
    #[serde(rename = "got")]
    Got,
    #[serde(rename = "infonce+got")]
    InfoNceGot,
    #[serde(rename = "infonce+got+intra")]
    InfoNceGotIntra,
    #[serde(rename = "intra")]
    Intra,
}

impl LossMode {
    pub const ALL: [LossMode; 6] = [
        LossMode::InfoNce,
        LossMode::Mse,
        LossMode::Got,
        LossMode::InfoNceGot,
        LossMode::InfoNceGotIntra,
        LossMode::Intra,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::InfoNce => "infonce",
            LossMode::Mse => "mse",
            LossMode::Got => "got",
            LossMode::InfoNceGot => "infonce+got",
            LossMode::InfoNceGotIntra => "infonce+got+intra",
            LossMode::Intra => "intra",
        }
    }

    pub fn uses_info_nce(self) -> bool {
        matches!(self, LossMode::InfoNce | LossMode::InfoNceGot | LossMode::InfoNceGotIntra)
    }

    pub fn uses_got(self) -> bool {
        matches!(self, LossMode::Got | LossMode::InfoNceGot | LossMode::InfoNceGotIntra)
    }

    pub fn uses_intra(self) -> bool {
        matches!(self, LossMode::Intra | LossMode::InfoNceGotIntra)
    }

    pub fn uses_mse(self) -> bool {
        self == LossMode::Mse
    }

    /// Whether the objective compares the anchor with other stains.
    pub fn is_cross_modal(self) -> bool {
        self != LossMode::Intra
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config("loss_mode", format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub warmup_epochs: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub loss_mode: LossMode,
    /// Epochs that never produce a checkpoint.
    pub rankme_skip_epochs: usize,
    /// Patches drawn per bag at every step (oversampled when a bag is smaller).
    pub patches_per_bag: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 90,
            max_epochs: 120,
            warmup_epochs: 5,
            lr_start: 1e-9,
            lr_peak: 1e-4,
            lr_final: 1e-8,
            weight_decay: 0.01,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            loss_mode: LossMode::InfoNceGot,
            rankme_skip_epochs: 20,
            patches_per_bag: 2048,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be at least 1"));
        }
        if self.warmup_epochs >= self.max_epochs {
            ::log::warn!(
                "warmup_epochs {} >= max_epochs {}: training ends inside the warmup ramp",
                self.warmup_epochs,
                self.max_epochs
            );
        }
        for (name, v) in [
            ("lr_start", self.lr_start),
            ("lr_peak", self.lr_peak),
            ("lr_final", self.lr_final),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(name, format!("must be positive and finite, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::config("adam_betas", "both must lie in [0, 1)"));
        }
        if self.patches_per_bag < 2 {
            return Err(Error::config("patches_per_bag", "must be at least 2"));
        }
        Ok(())
    }
}

/// Everything [`train`] needs besides the data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub contrastive: ContrastiveConfig,
    pub got: GotConfig,
    pub rankme: RankMeConfig,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.contrastive.validate()?;
        self.got.validate()?;
        self.rankme.validate()
    }

    pub fn objective(&self) -> Objective<'_> {
        Objective {
            mode: self.train.loss_mode,
            patches_per_bag: self.train.patches_per_bag,
            contrastive: &self.contrastive,
            got: &self.got,
        }
    }
}
