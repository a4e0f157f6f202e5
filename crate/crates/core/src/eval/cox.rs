use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, solve_spd, Matrix};

const GRAD_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub embedding: Vec<f64>,
    pub time: f64,
    pub event: bool,
}

/// Fitted proportional-hazards coefficients.
#[derive(Clone, Debug)]
pub struct CoxModel {
    pub coefficients: Vec<f64>,
    /// Penalized negative log partial likelihood at the optimum.
    pub objective: f64,
    pub iterations: usize,
}

impl CoxModel {
    pub fn risk(&self, embedding: &[f64]) -> f64 {
        dot(&self.coefficients, embedding)
    }
}

/// Sorted view of the records with risk sets as suffixes.
struct RiskSets<'a> {
    records: &'a [SurvivalRecord],
    /// Indices by decreasing time.
    order: Vec<usize>,
    d: usize,
}

impl<'a> RiskSets<'a> {
    fn new(records: &'a [SurvivalRecord]) -> Self {
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.sort_by(|&a, &b| records[b].time.total_cmp(&records[a].time));
        let d = records.first().map_or(0, |r| r.embedding.len());
        Self { records, order, d }
    }

    /// Negative log partial likelihood (Breslow ties) plus `l2/2 ‖β‖²`,
    /// with gradient and Hessian when asked.
    fn terms(&self, beta: &[f64], l2: f64, hessian: bool) -> (f64, Vec<f64>, Option<Matrix>) {
        let d = self.d;
        let eta: Vec<f64> = self.records.iter().map(|r| dot(beta, &r.embedding)).collect();
        let shift = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s0 = 0.0;
        let mut s1 = vec![0.0; d];
        let mut s2 = Matrix::zeros(d, d);
        let mut f = 0.5 * l2 * dot(beta, beta);
        let mut g: Vec<f64> = beta.iter().map(|b| l2 * b).collect();
        let mut h = hessian.then(|| {
            let mut m = Matrix::zeros(d, d);
            (0..d).for_each(|i| m[(i, i)] = l2);
            m
        });
        let mut i = 0;
        while i < self.order.len() {
            // everyone tied at this time joins the risk set before any of
            // their events is scored
            let t = self.records[self.order[i]].time;
            let mut j = i;
            while j < self.order.len() && self.records[self.order[j]].time == t {
                let r = &self.records[self.order[j]];
                let w = (eta[self.order[j]] - shift).exp();
                s0 += w;
                for a in 0..d {
                    s1[a] += w * r.embedding[a];
                    if hessian {
                        for b in 0..d {
                            s2[(a, b)] += w * r.embedding[a] * r.embedding[b];
                        }
                    }
                }
                j += 1;
            }
            for &k in &self.order[i..j] {
                let r = &self.records[k];
                if !r.event {
                    continue;
                }
                f -= eta[k] - shift - s0.ln();
                for a in 0..d {
                    g[a] -= r.embedding[a] - s1[a] / s0;
                }
                if let Some(h) = h.as_mut() {
                    for a in 0..d {
                        for b in 0..d {
                            h[(a, b)] += s2[(a, b)] / s0 - s1[a] * s1[b] / (s0 * s0);
                        }
                    }
                }
            }
            i = j;
        }
        (f, g, h)
    }
}

/// Penalized Cox regression by Newton steps with backtracking, run until
/// the largest gradient component is at most 1e-6.
pub fn cox_fit(records: &[SurvivalRecord], l2: f64, max_iters: usize) -> Result<CoxModel> {
    if !(l2 >= 0.0) || !l2.is_finite() {
        return Err(Error::config("l2", "must be non-negative and finite"));
    }
    let Some(first) = records.first() else {
        return Err(Error::NoEvents);
    };
    let d = first.embedding.len();
    for r in records {
        if r.embedding.len() != d {
            return Err(Error::dims("cox_fit", d, r.embedding.len()));
        }
        if !r.embedding.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("cox_fit embedding".into()));
        }
        if !(r.time > 0.0) || !r.time.is_finite() {
            return Err(Error::config("time", format!("must be positive and finite, got {}", r.time)));
        }
    }
    if !records.iter().any(|r| r.event) {
        return Err(Error::NoEvents);
    }
    let sets = RiskSets::new(records);
    let mut beta = vec![0.0; d];
    let (mut f, mut g, _) = sets.terms(&beta, l2, false);
    let gnorm = |g: &[f64]| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut iterations = 0;
    while gnorm(&g) > GRAD_TOL {
        if iterations == max_iters {
            return Err(Error::SolverNotConverged {
                method: "cox_fit",
                residual: gnorm(&g),
                iterations,
            });
        }
        iterations += 1;
        let (_, _, h) = sets.terms(&beta, l2, true);
        let mut h = h.expect("hessian requested");
        for a in 0..d {
            h[(a, a)] += 1e-12;
        }
        let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
        let dir = solve_spd(h, neg_g.clone()).unwrap_or(neg_g);
        let slope = dot(&dir, &g);
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = beta.iter().zip(&dir).map(|(b, s)| b + t * s).collect();
            let (fc, gc, _) = sets.terms(&cand, l2, false);
            if fc <= f + 1e-4 * t * slope || t < 1e-12 {
                beta = cand;
                f = fc;
                g = gc;
                break;
            }
            t *= 0.5;
        }
    }
    Ok(CoxModel { coefficients: beta, objective: f, iterations })
}
