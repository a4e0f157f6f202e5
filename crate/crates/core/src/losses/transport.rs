use super::GotConfig;
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity_matrix, logsumexp, row_norms, solve_spd, Matrix};

/// Coupling between two uniform empirical measures.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub coupling: Matrix,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
}

impl TransportPlan {
    /// The independent coupling `a bᵀ`.
    pub fn product(a: &[f64], b: &[f64]) -> Self {
        Self {
            coupling: Matrix::from_fn(a.len(), b.len(), |i, j| a[i] * b[j]),
            row_marginal: a.to_vec(),
            col_marginal: b.to_vec(),
        }
    }

    /// Largest absolute deviation of row or column sums from their targets.
    pub fn marginal_violation(&self) -> f64 {
        let rows = self
            .coupling
            .iter_rows()
            .zip(&self.row_marginal)
            .map(|(r, a)| (r.iter().sum::<f64>() - a).abs());
        let cols = self
            .coupling
            .sum_rows()
            .into_iter()
            .zip(&self.col_marginal)
            .map(|(s, b)| (s - b).abs())
            .collect::<Vec<_>>();
        rows.chain(cols).fold(0.0, f64::max)
    }

    /// `⟨T, C⟩`
    pub fn cost(&self, cost: &Matrix) -> Result<f64> {
        if cost.shape() != self.coupling.shape() {
            return Err(Error::dims("TransportPlan::cost", self.coupling.shape_str(), cost.shape_str()));
        }
        Ok(self.coupling.as_slice().iter().zip(cost.as_slice()).map(|(t, c)| t * c).sum())
    }
}

pub(crate) fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Violation above which an exhausted iteration budget is an error.
const FAIL_RESIDUAL: f64 = 1e-4;

/// Entropic optimal transport by log-domain Sinkhorn iterations.
///
/// Alternates the dual updates
/// `f_i = ε ln a_i − ε LSE_j((g_j − C_ij)/ε)` and
/// `g_j = ε ln b_j − ε LSE_i((f_i − C_ij)/ε)`
/// until the row marginals are within `tol`; column marginals are exact after
/// every update. The potentials are warm-started by a short pass over a
/// decreasing sequence of larger regularizations (ε-scaling), which leaves
/// the fixed point unchanged. Errors if the violation is still above `1e-4`
/// once `max_iters` updates are spent.
pub fn sinkhorn(
    cost: &Matrix,
    a: &[f64],
    b: &[f64],
    epsilon: f64,
    max_iters: usize,
    tol: f64,
) -> Result<TransportPlan> {
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return Err(Error::dims("sinkhorn", "nonempty cost", cost.shape_str()));
    }
    if a.len() != n || b.len() != m {
        return Err(Error::dims(
            "sinkhorn",
            cost.shape_str(),
            format!("marginals of length {} and {}", a.len(), b.len()),
        ));
    }
    if !(epsilon > 0.0) {
        return Err(Error::config("sinkhorn_epsilon", "must be positive"));
    }
    cost.ensure_finite("sinkhorn cost")?;
    let mut solver = Duals::new(cost, a, b);
    let range = cost.as_slice().iter().fold(0.0f64, |r, &c| r.max(c))
        - cost.as_slice().iter().fold(f64::INFINITY, |r, &c| r.min(c));
    let mut iters = 0;
    let mut stage = range;
    while stage > 2.0 * epsilon && iters < max_iters / 2 {
        for _ in 0..WARM_ITERS.min(max_iters / 2 - iters) {
            solver.update(stage);
            iters += 1;
        }
        stage /= 2.0;
    }
    let mut residual = f64::INFINITY;
    let mut plain = 0;
    while iters < max_iters {
        iters += 1;
        // Sinkhorn slows down on nearly degenerate problems; Newton steps on
        // the dual potentials finish those quadratically.
        if plain >= NEWTON_AFTER && solver.newton_step(epsilon) {
            residual = solver.residual(epsilon);
        } else {
            plain += 1;
            solver.update(epsilon);
            residual = solver.residual(epsilon);
        }
        if residual <= tol {
            break;
        }
    }
    if !(residual <= FAIL_RESIDUAL) {
        return Err(Error::NotConverged { residual, iterations: iters });
    }
    if residual > tol {
        log::debug!("sinkhorn stopped at residual {residual:.3e} after {iters} iterations");
    }
    Ok(TransportPlan {
        coupling: solver.plan(epsilon),
        row_marginal: a.to_vec(),
        col_marginal: b.to_vec(),
    })
}

/// Updates spent at each warm-start regularization.
const WARM_ITERS: usize = 4;
/// Plain updates before Newton steps are tried.
const NEWTON_AFTER: usize = 50;

struct Duals<'a> {
    cost: &'a Matrix,
    a: &'a [f64],
    b: &'a [f64],
    log_a: Vec<f64>,
    log_b: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    buf_m: Vec<f64>,
    buf_n: Vec<f64>,
}

impl<'a> Duals<'a> {
    fn new(cost: &'a Matrix, a: &'a [f64], b: &'a [f64]) -> Self {
        let (n, m) = cost.shape();
        Self {
            cost,
            a,
            b,
            log_a: a.iter().map(|x| x.ln()).collect(),
            log_b: b.iter().map(|x| x.ln()).collect(),
            f: vec![0.0; n],
            g: vec![0.0; m],
            buf_m: vec![0.0; m],
            buf_n: vec![0.0; n],
        }
    }

    fn update(&mut self, eps: f64) {
        let (n, m) = self.cost.shape();
        for i in 0..n {
            let c = self.cost.row(i);
            for j in 0..m {
                self.buf_m[j] = (self.g[j] - c[j]) / eps;
            }
            self.f[i] = eps * (self.log_a[i] - logsumexp(&self.buf_m));
        }
        for j in 0..m {
            for i in 0..n {
                self.buf_n[i] = (self.f[i] - self.cost[(i, j)]) / eps;
            }
            self.g[j] = eps * (self.log_b[j] - logsumexp(&self.buf_n));
        }
    }

    /// Max-norm violation of both marginals.
    fn residual(&self, eps: f64) -> f64 {
        let t = self.plan(eps);
        let rows = t.iter_rows().zip(self.a).map(|(r, a)| (r.iter().sum::<f64>() - a).abs());
        let cols = t.sum_rows().into_iter().zip(self.b).map(|(c, b)| (c - b).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }

    /// One damped Newton step on the marginal equations, with the last column
    /// potential held fixed to remove the additive gauge. Returns false (and
    /// leaves the potentials untouched) if no step size reduces the residual.
    fn newton_step(&mut self, eps: f64) -> bool {
        let (n, m) = self.cost.shape();
        if m < 2 {
            return false;
        }
        let t = self.plan(eps);
        let row: Vec<f64> = t.iter_rows().map(|r| r.iter().sum()).collect();
        let col = t.sum_rows();
        let k = n + m - 1;
        let mut jac = Matrix::zeros(k, k);
        let mut rhs = vec![0.0; k];
        for i in 0..n {
            jac[(i, i)] = row[i] / eps;
            rhs[i] = self.a[i] - row[i];
            for j in 0..m - 1 {
                jac[(i, n + j)] = t[(i, j)] / eps;
                jac[(n + j, i)] = t[(i, j)] / eps;
            }
        }
        for j in 0..m - 1 {
            jac[(n + j, n + j)] = col[j] / eps;
            rhs[n + j] = self.b[j] - col[j];
        }
        let Some(step) = solve_spd(jac, rhs) else {
            return false;
        };
        let start = self.residual(eps);
        let (f0, g0) = (self.f.clone(), self.g.clone());
        let mut alpha = 1.0;
        for _ in 0..30 {
            for i in 0..n {
                self.f[i] = f0[i] + alpha * step[i];
            }
            for j in 0..m - 1 {
                self.g[j] = g0[j] + alpha * step[n + j];
            }
            let r = self.residual(eps);
            if r.is_finite() && r < start {
                return true;
            }
            alpha *= 0.5;
        }
        self.f = f0;
        self.g = g0;
        false
    }

    fn plan(&self, eps: f64) -> Matrix {
        Matrix::from_fn(self.f.len(), self.g.len(), |i, j| {
            ((self.f[i] + self.g[j] - self.cost[(i, j)]) / eps).exp()
        })
    }
}

/// Backpropagates through `C = cos(A, B)` (row-wise cosine similarity).
///
/// `grad` is `d loss / d C`; returns `(d loss / d A, d loss / d B)`.
pub fn cosine_backward(a: &Matrix, b: &Matrix, grad: &Matrix) -> Result<(Matrix, Matrix)> {
    let c = cosine_similarity_matrix(a, b)?;
    if grad.shape() != c.shape() {
        return Err(Error::dims("cosine_backward", c.shape_str(), grad.shape_str()));
    }
    let na = row_norms(a)?;
    let nb = row_norms(b)?;
    // ∂c_ij/∂a_i = b_j/(|a_i||b_j|) − c_ij a_i/|a_i|²
    let mut ub = b.clone();
    for (j, r) in (0..b.rows()).zip(nb.iter()) {
        ub.row_mut(j).iter_mut().for_each(|x| *x /= r);
    }
    let mut ua = a.clone();
    for (i, r) in (0..a.rows()).zip(na.iter()) {
        ua.row_mut(i).iter_mut().for_each(|x| *x /= r);
    }
    let gc = grad.hadamard(&c)?;
    let mut da = grad.matmul(&ub)?;
    for i in 0..a.rows() {
        let w: f64 = gc.row(i).iter().sum();
        let u = ua.row(i);
        for (d, &uk) in da.row_mut(i).iter_mut().zip(u) {
            *d = (*d - w * uk) / na[i];
        }
    }
    let mut db = grad.t_matmul(&ua)?;
    let col_w = gc.sum_rows();
    for j in 0..b.rows() {
        let u = ub.row(j);
        for (d, &uk) in db.row_mut(j).iter_mut().zip(u) {
            *d = (*d - col_w[j] * uk) / nb[j];
        }
    }
    Ok((da, db))
}

/// Node-term result.
#[derive(Clone, Debug)]
pub struct WdResult {
    /// `⟨T, C⟩` without the entropy term.
    pub cost: f64,
    pub plan: TransportPlan,
    pub grad_a: Matrix,
    pub grad_b: Matrix,
}

/// `⟨T, 1 − cos(A, B)⟩` for a fixed plan, with gradients.
pub fn wd_cost_with_plan(a: &Matrix, b: &Matrix, plan: &TransportPlan) -> Result<(f64, Matrix, Matrix)> {
    let cost = cosine_similarity_matrix(a, b)?.map(|c| 1.0 - c);
    let value = plan.cost(&cost)?;
    let grad = plan.coupling.map(|t| -t);
    let (ga, gb) = cosine_backward(a, b, &grad)?;
    Ok((value, ga, gb))
}

/// Entropic Wasserstein distance between two node sets under cosine distance.
pub fn wasserstein(a: &Matrix, b: &Matrix, cfg: &GotConfig) -> Result<WdResult> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::EmptyBag);
    }
    let cost = cosine_similarity_matrix(a, b)?.map(|c| 1.0 - c);
    let plan = sinkhorn(
        &cost,
        &uniform(a.rows()),
        &uniform(b.rows()),
        cfg.sinkhorn_epsilon,
        cfg.sinkhorn_iters,
        cfg.sinkhorn_tol,
    )?;
    let (value, grad_a, grad_b) = wd_cost_with_plan(a, b, &plan)?;
    Ok(WdResult { cost: value, plan, grad_a, grad_b })
}
