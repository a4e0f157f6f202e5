use super::graph::StainGraph;
use super::transport::{cosine_backward, sinkhorn, uniform, TransportPlan};
use super::{GotConfig, GwLoss};
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity_matrix, Matrix};

/// Edge-term result.
#[derive(Clone, Debug)]
pub struct GwResult {
    /// `Σ ℓ(S^a_ik, S^b_jl) T_ij T_kl` at the returned plan.
    pub cost: f64,
    pub plan: TransportPlan,
    pub grad_a: Matrix,
    pub grad_b: Matrix,
}

/// Intra-graph similarity `S = adjacency ⊙ cos(V, V)`.
fn similarity(g: &StainGraph) -> Result<Matrix> {
    cosine_similarity_matrix(&g.nodes, &g.nodes)?.hadamard(&g.adjacency_matrix())
}

/// Linearized cost `L(T)_ij = Σ_kl ℓ(S^a_ik, S^b_jl) T_kl`.
pub fn gw_linear_cost(sa: &Matrix, sb: &Matrix, plan: &Matrix, loss: GwLoss) -> Result<Matrix> {
    let (n, m) = plan.shape();
    if sa.shape() != (n, n) || sb.shape() != (m, m) {
        return Err(Error::dims(
            "gw_linear_cost",
            format!("plan {}", plan.shape_str()),
            format!("similarities {} and {}", sa.shape_str(), sb.shape_str()),
        ));
    }
    match loss {
        GwLoss::Square => {
            // (S_a² p) 1ᵀ + 1 (S_b² q)ᵀ − 2 S_a T S_bᵀ
            let p: Vec<f64> = plan.iter_rows().map(|r| r.iter().sum()).collect();
            let q = plan.sum_rows();
            let left = sa.map(|x| x * x).mul_vec(&p)?;
            let right = sb.map(|x| x * x).mul_vec(&q)?;
            let cross = sa.matmul(plan)?.matmul_t(sb)?;
            Ok(Matrix::from_fn(n, m, |i, j| left[i] + right[j] - 2.0 * cross[(i, j)]))
        }
        GwLoss::Absolute => Ok(Matrix::from_fn(n, m, |i, j| {
            let mut acc = 0.0;
            for k in 0..n {
                let s = sa[(i, k)];
                for l in 0..m {
                    acc += (s - sb[(j, l)]).abs() * plan[(k, l)];
                }
            }
            acc
        })),
    }
}

/// Gromov-Wasserstein cost of a fixed plan, with gradients with respect to
/// both node sets. Adjacency is held fixed.
pub fn gw_cost_with_plan(
    a: &StainGraph,
    b: &StainGraph,
    plan: &TransportPlan,
    loss: GwLoss,
) -> Result<(f64, Matrix, Matrix)> {
    let sa = similarity(a)?;
    let sb = similarity(b)?;
    let t = &plan.coupling;
    let cost = plan.cost(&gw_linear_cost(&sa, &sb, t, loss)?)?;
    let (n, m) = t.shape();
    let (dsa, dsb) = match loss {
        GwLoss::Square => {
            let p: Vec<f64> = t.iter_rows().map(|r| r.iter().sum()).collect();
            let q = t.sum_rows();
            let tsbt = t.matmul(&sb)?.matmul_t(t)?;
            let tsat = t.t_matmul(&sa)?.matmul(t)?;
            (
                Matrix::from_fn(n, n, |i, k| 2.0 * (sa[(i, k)] * p[i] * p[k] - tsbt[(i, k)])),
                Matrix::from_fn(m, m, |j, l| 2.0 * (sb[(j, l)] * q[j] * q[l] - tsat[(j, l)])),
            )
        }
        GwLoss::Absolute => {
            let mut dsa = Matrix::zeros(n, n);
            let mut dsb = Matrix::zeros(m, m);
            for i in 0..n {
                for k in 0..n {
                    for j in 0..m {
                        for l in 0..m {
                            let w = t[(i, j)] * t[(k, l)];
                            let s = (sa[(i, k)] - sb[(j, l)]).signum() * w;
                            dsa[(i, k)] += s;
                            dsb[(j, l)] -= s;
                        }
                    }
                }
            }
            (dsa, dsb)
        }
    };
    let grad_a = self_cosine_backward(&a.nodes, &dsa.hadamard(&a.adjacency_matrix())?)?;
    let grad_b = self_cosine_backward(&b.nodes, &dsb.hadamard(&b.adjacency_matrix())?)?;
    Ok((cost, grad_a, grad_b))
}

fn self_cosine_backward(v: &Matrix, grad: &Matrix) -> Result<Matrix> {
    let (mut d1, d2) = cosine_backward(v, v, grad)?;
    d1.add_scaled(1.0, &d2)?;
    Ok(d1)
}

/// `∫₀¹ |Q_x(t) − Q_y(t)|^p dt` between the uniform empirical measures on
/// `x` and `y` (both sorted ascending).
fn quantile_distance(x: &[f64], y: &[f64], power: i32) -> f64 {
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut t = 0.0;
    let mut acc = 0.0;
    while i < x.len() && j < y.len() {
        let next_x = (i + 1) as f64 / n;
        let next_y = (j + 1) as f64 / m;
        let next = next_x.min(next_y);
        acc += (next - t) * (x[i] - y[j]).abs().powi(power);
        t = next;
        if next_x <= next {
            i += 1;
        }
        if next_y <= next {
            j += 1;
        }
    }
    acc
}

/// Node-to-node cost comparing each node's distribution of similarities to
/// the rest of its graph. Its transport plan is a standard starting point for
/// Gromov-Wasserstein: it lower-bounds the objective and ignores node order.
fn signature_cost(sa: &Matrix, sb: &Matrix, loss: GwLoss) -> Matrix {
    let sorted = |s: &Matrix| -> Vec<Vec<f64>> {
        s.iter_rows()
            .map(|r| {
                let mut v = r.to_vec();
                v.sort_by(f64::total_cmp);
                v
            })
            .collect()
    };
    let (ra, rb) = (sorted(sa), sorted(sb));
    let power = match loss {
        GwLoss::Square => 2,
        GwLoss::Absolute => 1,
    };
    Matrix::from_fn(sa.rows(), sb.rows(), |i, j| quantile_distance(&ra[i], &rb[j], power))
}

/// Rounds a coupling to a vertex of the transport polytope: entries are
/// visited from largest to smallest (ties by index) and each receives as much
/// mass as its row and column still allow.
fn greedy_vertex(plan: &TransportPlan) -> TransportPlan {
    let (n, m) = plan.coupling.shape();
    let mut order: Vec<usize> = (0..n * m).collect();
    let t = plan.coupling.as_slice();
    order.sort_by(|&x, &y| t[y].total_cmp(&t[x]).then(x.cmp(&y)));
    let mut row = plan.row_marginal.clone();
    let mut col = plan.col_marginal.clone();
    let mut out = Matrix::zeros(n, m);
    for k in order {
        let (i, j) = (k / m, k % m);
        let mass = row[i].min(col[j]);
        if mass > 0.0 {
            out[(i, j)] = mass;
            row[i] -= mass;
            col[j] -= mass;
        }
    }
    TransportPlan {
        coupling: out,
        row_marginal: plan.row_marginal.clone(),
        col_marginal: plan.col_marginal.clone(),
    }
}

/// Entropic Gromov-Wasserstein distance between two patch graphs.
///
/// Mirror descent: each iteration solves an entropic transport problem whose
/// cost is the gradient `2 L(T)` of the quadratic objective at the current
/// plan. The objective is not convex and symmetric graphs have saddle points
/// that smooth starts never leave, so descent runs from three starts: the
/// product coupling, the transport plan of the similarity-distribution cost,
/// and that plan rounded to a vertex. The lowest-cost iterate seen is kept,
/// or its rounding to a vertex when that is cheaper.
pub fn gromov_wasserstein(a: &StainGraph, b: &StainGraph, cfg: &GotConfig) -> Result<GwResult> {
    if a.n_nodes() == 0 || b.n_nodes() == 0 {
        return Err(Error::EmptyBag);
    }
    let sa = similarity(a)?;
    let sb = similarity(b)?;
    let pa = uniform(a.n_nodes());
    let pb = uniform(b.n_nodes());
    let solve = |cost: &Matrix| {
        sinkhorn(cost, &pa, &pb, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters, cfg.sinkhorn_tol)
    };
    let signature = solve(&signature_cost(&sa, &sb, cfg.gw_loss))?;
    let starts = [TransportPlan::product(&pa, &pb), greedy_vertex(&signature), signature];
    let mut best: Option<(f64, TransportPlan)> = None;
    for mut plan in starts {
        for _ in 0..cfg.gw_outer_iters {
            let mut lin = gw_linear_cost(&sa, &sb, &plan.coupling, cfg.gw_loss)?;
            lin.scale(2.0);
            plan = solve(&lin)?;
            let cost = plan.cost(&gw_linear_cost(&sa, &sb, &plan.coupling, cfg.gw_loss)?)?;
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((cost, plan.clone()));
            }
        }
    }
    let (best_cost, mut plan) = best.expect("at least one iteration");
    // the entropic blur can cost more than the nearest vertex
    let vertex = greedy_vertex(&plan);
    if vertex.cost(&gw_linear_cost(&sa, &sb, &vertex.coupling, cfg.gw_loss)?)? < best_cost {
        plan = vertex;
    }
    let (cost, grad_a, grad_b) = gw_cost_with_plan(a, b, &plan, cfg.gw_loss)?;
    Ok(GwResult { cost, plan, grad_a, grad_b })
}
