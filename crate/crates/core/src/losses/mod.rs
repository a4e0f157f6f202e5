//! Training objectives and their gradients with respect to embeddings.
//!
//! * [`info_nce`]: symmetric cross-stain contrastive loss on slide embeddings.
//! * [`wasserstein`] / [`gromov_wasserstein`]: node and edge terms of graph
//!   optimal transport between per-stain patch graphs, combined by [`got_loss`].
//! * [`intra_loss`]: contrastive loss between two disjoint halves of one bag.
//! * [`mse_cross_modal`]: regression ablation in place of the contrastive term.
//!
//! Transport gradients treat the optimal plan (and graph adjacency) as fixed.

mod contrastive;
mod got;
mod graph;
mod gromov;
mod intra;
mod transport;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use contrastive::{info_nce, info_nce_pair, mse_cross_modal, mse_pair, PairGrad};
pub use got::{got_loss, got_loss_with_plans, GotTerms};
pub use graph::{build_stain_graph, graph_threshold, StainGraph};
pub use gromov::{gromov_wasserstein, gw_cost_with_plan, gw_linear_cost, GwResult};
pub use intra::{intra_loss, intra_split};
pub use transport::{
    cosine_backward, sinkhorn, wasserstein, wd_cost_with_plan, TransportPlan, WdResult,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    /// Softmax temperature τ applied to raw dot products.
    pub temperature: f64,
    /// L2-normalize embeddings before the dot product.
    pub normalize: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { temperature: 1e-3, normalize: false }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config("temperature", "must be positive and finite"));
        }
        Ok(())
    }
}

/// Pairwise loss inside the Gromov-Wasserstein objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GwLoss {
    /// `(s − s')²`, evaluated in `O(n³)`.
    Square,
    /// `|s − s'|`, evaluated in `O(n⁴)`.
    Absolute,
}

/// Which per-patch features become graph nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeFeatures {
    /// Encoder features after the pre-attention layers (receive gradients).
    Hidden,
    /// Input patch embeddings (constant, so the term gives no gradient).
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GotConfig {
    /// Nodes sampled per graph.
    pub sample_size: usize,
    /// Weight of the node (Wasserstein) term; the edge term gets `1 − γ`.
    pub gamma: f64,
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_iters: usize,
    /// Row-marginal violation at which Sinkhorn stops early.
    pub sinkhorn_tol: f64,
    /// Fraction of the similarity range added to the minimum to get the
    /// edge threshold.
    pub threshold_step: f64,
    /// Mirror-descent iterations of the Gromov-Wasserstein solver.
    pub gw_outer_iters: usize,
    pub gw_loss: GwLoss,
    pub node_features: NodeFeatures,
}

impl Default for GotConfig {
    fn default() -> Self {
        Self {
            sample_size: 256,
            gamma: 0.0,
            sinkhorn_epsilon: 0.05,
            sinkhorn_iters: 200,
            sinkhorn_tol: 1e-9,
            threshold_step: 0.1,
            gw_outer_iters: 10,
            gw_loss: GwLoss::Square,
            node_features: NodeFeatures::Hidden,
        }
    }
}

impl GotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_size < 2 {
            return Err(Error::config("sample_size", "must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("gamma", format!("must be in [0, 1], got {}", self.gamma)));
        }
        if !(self.sinkhorn_epsilon > 0.0) {
            return Err(Error::config("sinkhorn_epsilon", "must be positive"));
        }
        if self.sinkhorn_iters == 0 {
            return Err(Error::config("sinkhorn_iters", "must be at least 1"));
        }
        if !(self.sinkhorn_tol > 0.0) {
            return Err(Error::config("sinkhorn_tol", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.threshold_step) {
            return Err(Error::config("threshold_step", "must be in [0, 1]"));
        }
        if self.gw_outer_iters == 0 {
            return Err(Error::config("gw_outer_iters", "must be at least 1"));
        }
        Ok(())
    }
}

/// Loss values of one stain within a batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StainLoss {
    pub stain: String,
    pub info_nce: f64,
    pub got_node: f64,
    pub got_edge: f64,
    pub mse: f64,
}

/// Values of every objective for one optimizer step.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub info_nce: f64,
    pub got_node: f64,
    pub got_edge: f64,
    pub intra: f64,
    pub mse: f64,
    pub per_stain: Vec<StainLoss>,
}

impl LossReport {
    /// GOT combination `γ·node + (1 − γ)·edge`.
    pub fn got(&self, gamma: f64) -> f64 {
        gamma * self.got_node + (1.0 - gamma) * self.got_edge
    }
}
