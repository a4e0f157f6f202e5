//! Singular values by one-sided (Hestenes) Jacobi rotations.

use super::matrix::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 60;

/// Singular values of `a`, sorted descending, `min(rows, cols)` of them.
pub fn svd_values(a: &Matrix) -> Result<Vec<f64>> {
    if !a.is_finite() {
        return Err(Error::NonFinite("svd_values input".into()));
    }
    // Rotate columns of the taller orientation; store columns contiguously.
    let (m, n, mut cols) = if a.rows() >= a.cols() {
        let t = a.transpose();
        (a.rows(), a.cols(), t.into_vec())
    } else {
        (a.cols(), a.rows(), a.as_slice().to_vec())
    };
    if n == 0 {
        return Ok(Vec::new());
    }

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let cp = &cols[p * m..(p + 1) * m];
                    let cq = &cols[q * m..(q + 1) * m];
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q * m);
                let cp = &mut left[p * m..(p + 1) * m];
                let cq = &mut right[..m];
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let xp = *x;
                    let yq = *y;
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut values: Vec<f64> = cols
        .chunks_exact(m)
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}
