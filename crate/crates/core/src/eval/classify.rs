use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{solve_spd, Matrix};

#[derive(Clone, Debug)]
pub struct Prototypes {
    /// Class means, one row per class.
    pub centers: Matrix,
    /// Predicted class per query.
    pub predictions: Vec<usize>,
    /// Negative L2 distance from each query to each prototype.
    pub scores: Matrix,
}

fn n_classes(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |&m| m + 1)
}

/// Nearest class-mean classification under L2 distance.
///
/// Classes are `0..=max(labels)`, each needs a training example. Equal
/// distances resolve to the lower class index.
pub fn prototype_classify(train: &Matrix, labels: &[usize], queries: &Matrix) -> Result<Prototypes> {
    if train.rows() != labels.len() {
        return Err(Error::dims("prototype_classify", train.rows(), labels.len()));
    }
    if train.cols() != queries.cols() {
        return Err(Error::dims("prototype_classify", train.shape_str(), queries.shape_str()));
    }
    let c = n_classes(labels);
    if c == 0 {
        return Err(Error::InsufficientClass { class: 0, found: 0, needed: 1 });
    }
    let mut centers = Matrix::zeros(c, train.cols());
    let mut counts = vec![0usize; c];
    for (row, &l) in train.iter_rows().zip(labels) {
        counts[l] += 1;
        for (s, v) in centers.row_mut(l).iter_mut().zip(row) {
            *s += v;
        }
    }
    for (k, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::InsufficientClass { class: k, found: 0, needed: 1 });
        }
        centers.row_mut(k).iter_mut().for_each(|s| *s /= n as f64);
    }
    let scores = Matrix::from_fn(queries.rows(), c, |i, k| {
        let d2: f64 = queries.row(i).iter().zip(centers.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
        -d2.sqrt()
    });
    let predictions = scores
        .iter_rows()
        .map(|r| {
            let mut best = 0;
            for k in 1..r.len() {
                if r[k] > r[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    Ok(Prototypes { centers, predictions, scores })
}

impl Prototypes {
    /// Row-wise softmax of the scores. With two classes, column 1 ranks
    /// queries by how much nearer they are to the positive prototype than to
    /// the negative one.
    pub fn probabilities(&self) -> Matrix {
        let mut p = self.scores.clone();
        for i in 0..p.rows() {
            softmax_row(p.row_mut(i));
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// `λ` in `Σ cross-entropy + λ/2 ‖W‖²`; the bias is not penalized.
    pub l2_strength: f64,
    pub max_iters: usize,
    /// Stop once the largest gradient component is at most this.
    pub tolerance: f64,
    /// Standardize features with training means and deviations first.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { l2_strength: 1.0, max_iters: 10_000, tolerance: 1e-6, standardize: false }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2_strength >= 0.0) || !self.l2_strength.is_finite() {
            return Err(Error::config("l2_strength", "must be non-negative and finite"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::config("tolerance", "must be positive"));
        }
        Ok(())
    }
}

/// Fitted multinomial logistic regression.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    /// `d × C`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    /// Per-feature `(mean, scale)` applied before the linear map.
    pub standardization: Option<Vec<(f64, f64)>>,
    /// Penalized objective at the returned parameters.
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

impl LinearProbe {
    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.weights.rows() {
            return Err(Error::dims("linear_probe", self.weights.rows(), x.cols()));
        }
        let x = self.prepare(x);
        let mut logits = x.matmul(&self.weights)?;
        logits.add_row_broadcast(&self.bias)?;
        let mut p = logits;
        for i in 0..p.rows() {
            softmax_row(p.row_mut(i));
        }
        Ok(p)
    }

    fn prepare(&self, x: &Matrix) -> Matrix {
        match &self.standardization {
            Some(st) => Matrix::from_fn(x.rows(), x.cols(), |i, j| (x[(i, j)] - st[j].0) / st[j].1),
            None => x.clone(),
        }
    }
}

fn softmax_row(r: &mut [f64]) {
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in r.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    r.iter_mut().for_each(|v| *v /= s);
}

/// Objective, gradient and (optionally) Hessian of the penalized
/// multinomial cross-entropy. Parameters are laid out `[W (d×C row-major), b]`.
fn probe_terms(x: &Matrix, y: &[usize], c: usize, theta: &[f64], l2: f64, hessian: bool) -> (f64, Vec<f64>, Option<Matrix>) {
    let d = x.cols();
    let p_len = (d + 1) * c;
    let mut f = 0.0;
    let mut g = vec![0.0; p_len];
    let mut h = hessian.then(|| Matrix::zeros(p_len, p_len));
    let mut logits = vec![0.0; c];
    for (i, row) in x.iter_rows().enumerate() {
        for (k, l) in logits.iter_mut().enumerate() {
            *l = theta[d * c + k] + (0..d).map(|j| row[j] * theta[j * c + k]).sum::<f64>();
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        f += lse - logits[y[i]];
        let p: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
        // augmented input [row, 1]
        let xa = |j: usize| if j < d { row[j] } else { 1.0 };
        for j in 0..=d {
            for k in 0..c {
                let r = p[k] - if k == y[i] { 1.0 } else { 0.0 };
                g[j * c + k] += xa(j) * r;
            }
        }
        if let Some(h) = h.as_mut() {
            for j in 0..=d {
                for k in 0..c {
                    for j2 in 0..=d {
                        for k2 in 0..c {
                            let w = p[k] * (if k == k2 { 1.0 } else { 0.0 } - p[k2]);
                            h[(j * c + k, j2 * c + k2)] += xa(j) * xa(j2) * w;
                        }
                    }
                }
            }
        }
    }
    for j in 0..d * c {
        f += 0.5 * l2 * theta[j] * theta[j];
        g[j] += l2 * theta[j];
        if let Some(h) = h.as_mut() {
            h[(j, j)] += l2;
        }
    }
    (f, g, h)
}

/// Fits a multinomial logistic regression by damped Newton steps with a
/// backtracking line search.
pub fn fit_linear_probe(train: &Matrix, labels: &[usize], cfg: &ProbeConfig) -> Result<LinearProbe> {
    cfg.validate()?;
    if train.rows() != labels.len() {
        return Err(Error::dims("linear_probe", train.rows(), labels.len()));
    }
    let c = n_classes(labels);
    let present = (0..c).filter(|k| labels.contains(k)).count();
    if present < 2 {
        return Err(Error::SingleClass);
    }
    let standardization = cfg.standardize.then(|| {
        (0..train.cols())
            .map(|j| {
                let col = train.column(j);
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
                (mean, if var > 0.0 { var.sqrt() } else { 1.0 })
            })
            .collect::<Vec<_>>()
    });
    let mut probe = LinearProbe {
        weights: Matrix::zeros(train.cols(), c),
        bias: vec![0.0; c],
        standardization,
        objective: 0.0,
        grad_norm: f64::INFINITY,
        iterations: 0,
    };
    let x = probe.prepare(train);
    let d = x.cols();
    let mut theta = vec![0.0; (d + 1) * c];
    let (mut f, mut g, _) = probe_terms(&x, labels, c, &theta, cfg.l2_strength, false);
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax <= cfg.tolerance {
            break;
        }
        iterations += 1;
        let (_, _, h) = probe_terms(&x, labels, c, &theta, cfg.l2_strength, true);
        let mut h = h.expect("hessian requested");
        // the softmax is invariant to a common shift of the biases (and of
        // every weight row when λ = 0); a tiny ridge fixes that gauge
        let ridge = 1e-10 * (1.0 + x.rows() as f64);
        for i in 0..h.rows() {
            h[(i, i)] += ridge;
        }
        let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
        let dir = solve_spd(h, neg_g.clone()).unwrap_or(neg_g);
        let slope: f64 = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
            let (fc, gc, _) = probe_terms(&x, labels, c, &cand, cfg.l2_strength, false);
            if fc <= f + 1e-4 * t * slope || t < 1e-12 {
                theta = cand;
                f = fc;
                g = gc;
                break;
            }
            t *= 0.5;
        }
    }
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if gmax > cfg.tolerance {
        log::warn!("linear probe stopped after {iterations} iterations at gradient {gmax:.3e}");
    }
    probe.weights = Matrix::new(d, c, theta[..d * c].to_vec())?;
    probe.bias = theta[d * c..].to_vec();
    probe.objective = f;
    probe.grad_norm = gmax;
    probe.iterations = iterations;
    Ok(probe)
}

/// Fits a probe on `train` and returns class probabilities for `queries`.
pub fn linear_probe(train: &Matrix, labels: &[usize], queries: &Matrix, cfg: &ProbeConfig) -> Result<Matrix> {
    fit_linear_probe(train, labels, cfg)?.predict_proba(queries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn query_at_prototype_and_ties() {
        let train = Matrix::from_rows(&[[0.0, 0.0], [2.0, 0.0], [10.0, 0.0], [10.0, 2.0]]).unwrap();
        let labels = [0, 0, 1, 1];
        let q = Matrix::from_rows(&[[1.0, 0.0], [10.0, 1.0], [5.5, 0.5]]).unwrap();
        let p = prototype_classify(&train, &labels, &q).unwrap();
        assert_eq!(p.predictions[0], 0);
        assert_eq!(p.predictions[1], 1);
        // (5.5, 0.5) is equidistant from (1, 0) and (10, 1)
        assert_eq!(p.scores[(2, 0)], p.scores[(2, 1)]);
        assert_eq!(p.predictions[2], 0);
        assert_eq!(p.scores[(0, 0)], 0.0);
    }

    #[test]
    fn separated_blobs() {
        let mut rng = Rng::new(3);
        let centers = [[5.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 5.0]];
        let mut blob = |n: usize| {
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let x = Matrix::from_fn(n, 3, |i, j| centers[labels[i]][j] + 0.5 * rng.normal());
            (x, labels)
        };
        let (tx, ty) = blob(30);
        let (qx, qy) = blob(300);
        let p = prototype_classify(&tx, &ty, &qx).unwrap();
        let acc = p.predictions.iter().zip(&qy).filter(|(a, b)| a == b).count() as f64 / 300.0;
        assert!(acc >= 0.95, "{acc}");
    }

    #[test]
    fn orthogonal_maps_keep_predictions() {
        let mut rng = Rng::new(9);
        let train = Matrix::from_fn(12, 2, |_, _| rng.normal());
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let q = Matrix::from_fn(20, 2, |_, _| rng.normal());
        let (s, c) = 0.7f64.sin_cos();
        let rot = Matrix::from_rows(&[[c, -s], [s, c]]).unwrap();
        let a = prototype_classify(&train, &labels, &q).unwrap();
        let b = prototype_classify(&train.matmul(&rot).unwrap(), &labels, &q.matmul(&rot).unwrap()).unwrap();
        assert_eq!(a.predictions, b.predictions);
    }

    #[test]
    fn missing_class_is_an_error() {
        let train = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let err = prototype_classify(&train, &[0, 2], &train).unwrap_err();
        assert!(matches!(err, Error::InsufficientClass { class: 1, .. }));
    }

    #[test]
    fn separable_set_is_fit() {
        let x = Matrix::from_rows(&[[-2.0, 1.0], [-1.0, 0.5], [-1.5, -1.0], [1.0, 0.0], [2.0, 1.0], [1.5, -0.5]]).unwrap();
        let y = [0, 0, 0, 1, 1, 1];
        let p = linear_probe(&x, &y, &x, &ProbeConfig::default()).unwrap();
        for (i, &l) in y.iter().enumerate() {
            assert!(p[(i, l)] > 0.5);
        }
    }

    #[test]
    fn heavy_penalty_gives_priors() {
        let mut rng = Rng::new(1);
        let x = Matrix::from_fn(10, 3, |_, _| rng.normal());
        let y = [0, 1, 1, 1, 0, 1, 1, 2, 1, 1];
        let cfg = ProbeConfig { l2_strength: 1e9, ..Default::default() };
        let probe = fit_linear_probe(&x, &y, &cfg).unwrap();
        assert!(probe.weights.max_abs() < 1e-7);
        let p = probe.predict_proba(&x).unwrap();
        for (k, prior) in [0.2, 0.7, 0.1].iter().enumerate() {
            assert!((p[(0, k)] - prior).abs() < 1e-6);
        }
    }

    #[test]
    fn optimum_matches_gradient_descent() {
        let mut rng = Rng::new(7);
        let x = Matrix::from_fn(20, 3, |_, _| rng.normal());
        let y: Vec<usize> = (0..20).map(|i| if x[(i, 0)] + 0.5 * rng.normal() > 0.0 { 1 } else { 0 }).collect();
        let cfg = ProbeConfig::default();
        let probe = fit_linear_probe(&x, &y, &cfg).unwrap();
        assert!(probe.grad_norm <= 1e-6);

        // plain gradient descent on the same objective, written out directly
        let c = 2;
        let mut w = [[0.0f64; 2]; 3];
        let mut b = [0.0f64; 2];
        let obj = |w: &[[f64; 2]; 3], b: &[f64; 2]| {
            let mut f = 0.0;
            for i in 0..20 {
                let l: Vec<f64> = (0..c).map(|k| b[k] + (0..3).map(|j| x[(i, j)] * w[j][k]).sum::<f64>()).collect();
                let lse = (l[0].exp() + l[1].exp()).ln();
                f += lse - l[y[i]];
            }
            f + 0.5 * w.iter().flatten().map(|v| v * v).sum::<f64>()
        };
        for _ in 0..20_000 {
            let mut gw = [[0.0f64; 2]; 3];
            let mut gb = [0.0f64; 2];
            for i in 0..20 {
                let l: Vec<f64> = (0..c).map(|k| b[k] + (0..3).map(|j| x[(i, j)] * w[j][k]).sum::<f64>()).collect();
                let z = l[0].exp() + l[1].exp();
                for k in 0..c {
                    let r = l[k].exp() / z - if y[i] == k { 1.0 } else { 0.0 };
                    gb[k] += r;
                    for j in 0..3 {
                        gw[j][k] += r * x[(i, j)];
                    }
                }
            }
            for j in 0..3 {
                for k in 0..c {
                    w[j][k] -= 0.02 * (gw[j][k] + w[j][k]);
                }
            }
            for k in 0..c {
                b[k] -= 0.02 * gb[k];
            }
        }
        assert!((probe.objective - obj(&w, &b)).abs() < 1e-5, "{} vs {}", probe.objective, obj(&w, &b));
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        assert!(matches!(fit_linear_probe(&x, &[1, 1], &ProbeConfig::default()), Err(Error::SingleClass)));
    }
}
