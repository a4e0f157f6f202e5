use super::graph::StainGraph;
use super::gromov::{gromov_wasserstein, gw_cost_with_plan};
use super::transport::{wasserstein, wd_cost_with_plan, TransportPlan};
use super::GotConfig;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Graph optimal transport between an anchor graph and each stain graph.
#[derive(Clone, Debug)]
pub struct GotTerms {
    /// `γ·node + (1 − γ)·edge`
    pub loss: f64,
    /// Σ over stains of the Wasserstein node term.
    pub node: f64,
    /// Σ over stains of the Gromov-Wasserstein edge term.
    pub edge: f64,
    /// `(node, edge)` per stain.
    pub per_stain: Vec<(f64, f64)>,
    pub grad_anchor: Matrix,
    pub grad_stains: Vec<Matrix>,
    /// `(node plan, edge plan)` per stain.
    pub plans: Vec<(TransportPlan, TransportPlan)>,
}

impl GotTerms {
    fn empty(anchor: &StainGraph, n_stains: usize) -> Self {
        Self {
            loss: 0.0,
            node: 0.0,
            edge: 0.0,
            per_stain: Vec::with_capacity(n_stains),
            grad_anchor: Matrix::zeros(anchor.nodes.rows(), anchor.nodes.cols()),
            grad_stains: Vec::with_capacity(n_stains),
            plans: Vec::with_capacity(n_stains),
        }
    }

    fn push(
        &mut self,
        gamma: f64,
        (wd, wd_ga, wd_gb): (f64, Matrix, Matrix),
        (gw, gw_ga, gw_gb): (f64, Matrix, Matrix),
    ) -> Result<()> {
        self.node += wd;
        self.edge += gw;
        self.per_stain.push((wd, gw));
        self.grad_anchor.add_scaled(gamma, &wd_ga)?;
        self.grad_anchor.add_scaled(1.0 - gamma, &gw_ga)?;
        let mut gs = wd_gb;
        gs.scale(gamma);
        gs.add_scaled(1.0 - gamma, &gw_gb)?;
        self.grad_stains.push(gs);
        self.loss = gamma * self.node + (1.0 - gamma) * self.edge;
        Ok(())
    }
}

pub fn got_loss(anchor: &StainGraph, stains: &[&StainGraph], cfg: &GotConfig) -> Result<GotTerms> {
    cfg.validate()?;
    if stains.is_empty() {
        return Err(Error::dims("got_loss", "at least one stain graph", "none"));
    }
    let mut terms = GotTerms::empty(anchor, stains.len());
    for g in stains {
        let wd = wasserstein(&anchor.nodes, &g.nodes, cfg)?;
        let gw = gromov_wasserstein(anchor, g, cfg)?;
        terms.push(cfg.gamma, (wd.cost, wd.grad_a, wd.grad_b), (gw.cost, gw.grad_a, gw.grad_b))?;
        terms.plans.push((wd.plan, gw.plan));
    }
    Ok(terms)
}

/// [`got_loss`] with every transport plan given instead of solved for.
pub fn got_loss_with_plans(
    anchor: &StainGraph,
    stains: &[&StainGraph],
    plans: &[(TransportPlan, TransportPlan)],
    cfg: &GotConfig,
) -> Result<GotTerms> {
    if stains.is_empty() || plans.len() != stains.len() {
        return Err(Error::dims("got_loss_with_plans", stains.len(), plans.len()));
    }
    let mut terms = GotTerms::empty(anchor, stains.len());
    for (g, (node_plan, edge_plan)) in stains.iter().zip(plans) {
        let wd = wd_cost_with_plan(&anchor.nodes, &g.nodes, node_plan)?;
        let gw = gw_cost_with_plan(anchor, g, edge_plan, cfg.gw_loss)?;
        terms.push(cfg.gamma, wd, gw)?;
        terms.plans.push((node_plan.clone(), edge_plan.clone()));
    }
    Ok(terms)
}
