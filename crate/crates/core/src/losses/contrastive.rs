use super::ContrastiveConfig;
use crate::error::{Error, Result};
use crate::numerics::{logsumexp, norm, softmax_inplace, Matrix};

/// A loss value with its gradients with respect to both inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGrad {
    pub loss: f64,
    pub grad_a: Matrix,
    pub grad_b: Matrix,
}

fn normalize_rows(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if n == 0.0 {
            return Err(Error::ZeroNormRow { row: i });
        }
        out.row_mut(i).iter_mut().for_each(|x| *x /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Pulls a gradient on `x / ‖x‖` back to `x`, row by row.
fn normalize_backward(unit: &Matrix, norms: &[f64], grad: &Matrix) -> Matrix {
    let mut out = grad.clone();
    for i in 0..unit.rows() {
        let u = unit.row(i);
        let g = grad.row(i);
        let proj: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((o, &ui), &gi) in out.row_mut(i).iter_mut().zip(u).zip(g) {
            *o = (gi - proj * ui) / norms[i];
        }
    }
    out
}

/// Symmetric infoNCE between two row-matched batches.
///
/// With `S = A Bᵀ / τ` the loss is
/// `(1/2B) Σ_i [LSE_j S_ij − S_ii] + [LSE_j S_ji − S_ii]`.
pub fn info_nce_pair(a: &Matrix, b: &Matrix, cfg: &ContrastiveConfig) -> Result<PairGrad> {
    cfg.validate()?;
    if a.shape() != b.shape() {
        return Err(Error::dims("info_nce", a.shape_str(), b.shape_str()));
    }
    let n = a.rows();
    if n == 0 {
        return Err(Error::dims("info_nce", "at least one row", "0 rows"));
    }
    let normed = if cfg.normalize {
        Some((normalize_rows(a)?, normalize_rows(b)?))
    } else {
        None
    };
    let (xa, xb) = match &normed {
        Some(((ua, _), (ub, _))) => (ua, ub),
        None => (a, b),
    };
    let tau = cfg.temperature;
    let mut s = xa.matmul_t(xb)?;
    s.scale(1.0 / tau);

    // Row and column terms are summed separately so that swapping the
    // arguments (S ↦ Sᵀ) reproduces the loss bit for bit.
    let scale = 1.0 / (2.0 * n as f64);
    let st = s.transpose();
    let directional = |m: &Matrix| -> (f64, Matrix) {
        let mut total = 0.0;
        let mut p = m.clone();
        for i in 0..n {
            let row = p.row_mut(i);
            total += logsumexp(row) - row[i];
            softmax_inplace(row);
        }
        (total, p)
    };
    let (row_loss, p) = directional(&s);
    let (col_loss, q) = directional(&st);
    let loss = scale * (row_loss + col_loss);
    // d loss / d S = (P − I + Qᵀ − I) / 2B
    let ds = Matrix::from_fn(n, n, |i, j| {
        let v = p[(i, j)] + q[(j, i)];
        scale * if i == j { v - 2.0 } else { v }
    });

    let mut grad_a = ds.matmul(xb)?;
    grad_a.scale(1.0 / tau);
    let mut grad_b = ds.t_matmul(xa)?;
    grad_b.scale(1.0 / tau);
    if let Some(((ua, na), (ub, nb))) = &normed {
        grad_a = normalize_backward(ua, na, &grad_a);
        grad_b = normalize_backward(ub, nb, &grad_b);
    }
    Ok(PairGrad { loss, grad_a, grad_b })
}

/// infoNCE of the anchor batch against each stain batch, averaged over
/// stains. Returns the loss, the anchor gradient and one gradient per stain.
pub fn info_nce(
    anchor: &Matrix,
    stains: &[&Matrix],
    cfg: &ContrastiveConfig,
) -> Result<(f64, Matrix, Vec<Matrix>)> {
    if stains.is_empty() {
        return Err(Error::dims("info_nce", "at least one stain", "none"));
    }
    let k = stains.len() as f64;
    let mut loss = 0.0;
    let mut grad_anchor = Matrix::zeros(anchor.rows(), anchor.cols());
    let mut grads = Vec::with_capacity(stains.len());
    for s in stains {
        let mut g = info_nce_pair(anchor, s, cfg)?;
        loss += g.loss / k;
        grad_anchor.add_scaled(1.0 / k, &g.grad_a)?;
        g.grad_b.scale(1.0 / k);
        grads.push(g.grad_b);
    }
    Ok((loss, grad_anchor, grads))
}

/// Mean squared difference over all entries.
pub fn mse_pair(a: &Matrix, b: &Matrix) -> Result<PairGrad> {
    if a.shape() != b.shape() {
        return Err(Error::dims("mse", a.shape_str(), b.shape_str()));
    }
    let count = a.as_slice().len();
    if count == 0 {
        return Err(Error::dims("mse", "nonempty", "empty"));
    }
    let mut diff = a.clone();
    diff.add_scaled(-1.0, b)?;
    let loss = diff.as_slice().iter().map(|x| x * x).sum::<f64>() / count as f64;
    let mut grad_a = diff;
    grad_a.scale(2.0 / count as f64);
    let mut grad_b = grad_a.clone();
    grad_b.scale(-1.0);
    Ok(PairGrad { loss, grad_a, grad_b })
}

/// [`mse_pair`] of the anchor against each stain, averaged over stains.
pub fn mse_cross_modal(anchor: &Matrix, stains: &[&Matrix]) -> Result<(f64, Matrix, Vec<Matrix>)> {
    if stains.is_empty() {
        return Err(Error::dims("mse_cross_modal", "at least one stain", "none"));
    }
    let k = stains.len() as f64;
    let mut loss = 0.0;
    let mut grad_anchor = Matrix::zeros(anchor.rows(), anchor.cols());
    let mut grads = Vec::with_capacity(stains.len());
    for s in stains {
        let mut g = mse_pair(anchor, s)?;
        loss += g.loss / k;
        grad_anchor.add_scaled(1.0 / k, &g.grad_a)?;
        g.grad_b.scale(1.0 / k);
        grads.push(g.grad_b);
    }
    Ok((loss, grad_anchor, grads))
}
