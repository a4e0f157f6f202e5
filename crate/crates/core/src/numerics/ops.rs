//! Elementwise and row-wise neural primitives.

use super::matrix::{dot, norm, Matrix};
use crate::error::{Error, Result};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

/// Derivative of [`gelu`]: `Φ(x) + x·φ(x)`.
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place softmax of a slice with max subtraction.
pub fn softmax_inplace(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `log Σ exp(v)` with max subtraction.
pub fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax of `a / temperature`.
pub fn softmax_rows(a: &Matrix, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::config(
            "temperature",
            format!("must be positive and finite, got {temperature}"),
        ));
    }
    let mut out = a.map(|x| x / temperature);
    for i in 0..out.rows() {
        softmax_inplace(out.row_mut(i));
    }
    Ok(out)
}

/// Normalization statistics of one row, kept for the backward pass.
#[derive(Clone, Copy, Debug)]
pub struct RowStats {
    pub mean: f64,
    pub inv_std: f64,
}

/// Normalizes a row to zero mean and unit (biased) variance, returning the
/// statistics used.
pub fn layer_norm(row: &[f64], eps: f64) -> (Vec<f64>, RowStats) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let out = row.iter().map(|x| (x - mean) * inv_std).collect();
    (out, RowStats { mean, inv_std })
}

/// Backward of [`layer_norm`] for one row: given the normalized output
/// `xhat` and the gradient w.r.t. it, returns the gradient w.r.t. the input.
pub fn layer_norm_backward(xhat: &[f64], grad_xhat: &[f64], inv_std: f64) -> Vec<f64> {
    let n = xhat.len() as f64;
    let mean_g = grad_xhat.iter().sum::<f64>() / n;
    let mean_gx = dot(grad_xhat, xhat) / n;
    xhat.iter()
        .zip(grad_xhat)
        .map(|(x, g)| inv_std * (g - mean_g - x * mean_gx))
        .collect()
}

/// Pairwise cosine similarity between the rows of `a` and the rows of `b`.
pub fn cosine_similarity_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::dims("cosine_similarity_matrix", a.shape_str(), b.shape_str()));
    }
    let na = row_norms(a)?;
    let nb = row_norms(b)?;
    let mut out = a.matmul_t(b)?;
    for i in 0..out.rows() {
        for (j, x) in out.row_mut(i).iter_mut().enumerate() {
            *x = (*x / (na[i] * nb[j])).clamp(-1.0, 1.0);
        }
    }
    Ok(out)
}

/// Euclidean norms of each row; errors on a zero row.
pub fn row_norms(a: &Matrix) -> Result<Vec<f64>> {
    a.iter_rows()
        .enumerate()
        .map(|(i, r)| {
            let n = norm(r);
            if n > 0.0 {
                Ok(n)
            } else {
                Err(Error::ZeroNormRow { row: i })
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn softmax_identical_row_is_uniform() {
        let a = Matrix::filled(1, 5, 3.7);
        let s = softmax_rows(&a, 1.0).unwrap();
        for &x in s.row(0) {
            assert!((x - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let a = Matrix::row_vector(&[0.0, 3f64.ln()]);
        let s = softmax_rows(&a, 1.0).unwrap();
        assert!((s[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((s[(0, 1)] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let a = Matrix::zeros(1, 2);
        assert!(softmax_rows(&a, 0.0).is_err());
        assert!(softmax_rows(&a, -1.0).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(0);
        for &tau in &[1e-3, 1.0, 10.0] {
            let a = Matrix::from_fn(1000, 9, |_, _| 5.0 * rng.normal());
            let s = softmax_rows(&a, tau).unwrap();
            for r in s.iter_rows() {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_basics() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-12);
        assert!(gelu(-10.0).abs() < 1e-12);
        for &x in &[-2.0, -0.3, 0.0, 0.7, 1.9] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_moments() {
        let (y, _) = layer_norm(&[1.0, 2.0, 3.0, 10.0], 1e-12);
        let mean = y.iter().sum::<f64>() / 4.0;
        let var = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_backward_matches_fd() {
        let x = [0.3, -1.2, 2.0, 0.5, 0.9];
        let w = [0.7, 0.1, -0.4, 1.3, -0.2];
        let f = |x: &[f64]| dot(&layer_norm(x, 1e-5).0, &w);
        let (xhat, st) = layer_norm(&x, 1e-5);
        let g = layer_norm_backward(&xhat, &w, st.inv_std);
        for i in 0..x.len() {
            let mut p = x;
            let mut m = x;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn cosine_cases() {
        let v = Matrix::from_rows(&[[1.0, 2.0, -0.5]]).unwrap();
        assert!((cosine_similarity_matrix(&v, &v).unwrap()[(0, 0)] - 1.0).abs() < 1e-15);
        let e1 = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let e2 = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_eq!(cosine_similarity_matrix(&e1, &e2).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn cosine_zero_row_is_reported() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        match cosine_similarity_matrix(&a, &a) {
            Err(Error::ZeroNormRow { row }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
