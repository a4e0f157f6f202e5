//! Downstream evaluation of frozen slide embeddings.

mod classify;
mod cox;
mod metrics;
mod split;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub use classify::{fit_linear_probe, linear_probe, prototype_classify, LinearProbe, ProbeConfig, Prototypes};
pub use cox::{cox_fit, CoxModel, SurvivalRecord};
pub use metrics::{auc, c_index, macro_auc};
pub use split::{kshot_sample, stratified_folds};

pub const METRIC_COLUMNS: [&str; 5] = ["task", "k", "repeat", "metric", "value"];
pub const PROBE_AUC: &str = "probe_auc";
pub const PROTOTYPE_AUC: &str = "prototype_auc";
pub const C_INDEX: &str = "c_index";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotProtocol {
    pub k: usize,
    pub n_repeats: usize,
    pub seed: u64,
}

impl Default for FewShotProtocol {
    fn default() -> Self {
        Self { k: 10, n_repeats: 10, seed: 0 }
    }
}

impl FewShotProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        if self.n_repeats == 0 {
            return Err(Error::config("n_repeats", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurvivalProtocol {
    pub n_folds: usize,
    pub l2: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for SurvivalProtocol {
    fn default() -> Self {
        Self { n_folds: 5, l2: 1.0, max_iters: 100, seed: 0 }
    }
}

/// One line of the results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task: String,
    pub k: Option<usize>,
    pub repeat: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: String,
    pub k: Option<usize>,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation over repeats.
    pub std: f64,
}

fn one_repeat(emb: &Matrix, labels: &[usize], k: usize, probe: &ProbeConfig, rng: &mut Rng) -> Result<(f64, f64)> {
    let (train, test) = kshot_sample(labels, k, rng)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let (tx, ty) = (emb.select_rows(&train), pick(&train));
    let (qx, qy) = (emb.select_rows(&test), pick(&test));
    let probs = linear_probe(&tx, &ty, &qx, probe)?;
    let protos = prototype_classify(&tx, &ty, &qx)?;
    Ok((macro_auc(&probs, &qy)?, macro_auc(&protos.probabilities(), &qy)?))
}

/// Repeated k-shot linear probing and prototyping.
///
/// Each repeat draws its own split from a stream forked off `seed`, so rows
/// do not depend on thread count. Emits `probe_auc` then `prototype_auc` for
/// every repeat, in repeat order.
pub fn few_shot(
    task: &str,
    embeddings: &Matrix,
    labels: &[usize],
    protocol: &FewShotProtocol,
    probe: &ProbeConfig,
) -> Result<Vec<MetricRow>> {
    protocol.validate()?;
    probe.validate()?;
    if embeddings.rows() != labels.len() {
        return Err(Error::dims("few_shot", embeddings.rows(), labels.len()));
    }
    let mut master = Rng::new(protocol.seed);
    let streams: Vec<Rng> = (0..protocol.n_repeats).map(|_| master.fork()).collect();
    let results = streams
        .into_par_iter()
        .map(|mut rng| one_repeat(embeddings, labels, protocol.k, probe, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let row = |repeat, metric: &str, value| MetricRow {
        task: task.to_string(),
        k: Some(protocol.k),
        repeat,
        metric: metric.to_string(),
        value,
    };
    Ok(results
        .into_iter()
        .enumerate()
        .flat_map(|(r, (p, q))| [row(r, PROBE_AUC, p), row(r, PROTOTYPE_AUC, q)])
        .collect())
}

/// Cross-validated Cox regression scored by c-index, one row per fold.
///
/// Folds are stratified by event status and, when `groups` is given, keep
/// each group whole. Folds with no comparable pair are skipped with a
/// warning.
pub fn survival_cv(
    task: &str,
    records: &[SurvivalRecord],
    groups: Option<&[usize]>,
    protocol: &SurvivalProtocol,
) -> Result<Vec<MetricRow>> {
    if !records.iter().any(|r| r.event) {
        return Err(Error::NoEvents);
    }
    let strata: Vec<usize> = records.iter().map(|r| r.event as usize).collect();
    let folds = stratified_folds(&strata, groups, protocol.n_folds, &mut Rng::new(protocol.seed))?;
    let rows = (0..protocol.n_folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<SurvivalRecord> =
                records.iter().zip(&folds).filter(|(_, &g)| g != f).map(|(r, _)| r.clone()).collect();
            let test: Vec<&SurvivalRecord> = records.iter().zip(&folds).filter(|(_, &g)| g == f).map(|(r, _)| r).collect();
            let model = cox_fit(&train, protocol.l2, protocol.max_iters)?;
            let risk: Vec<f64> = test.iter().map(|r| model.risk(&r.embedding)).collect();
            let times: Vec<f64> = test.iter().map(|r| r.time).collect();
            let events: Vec<bool> = test.iter().map(|r| r.event).collect();
            match c_index(&risk, &times, &events) {
                Ok(c) => Ok(Some(MetricRow {
                    task: task.to_string(),
                    k: None,
                    repeat: f,
                    metric: C_INDEX.to_string(),
                    value: c,
                })),
                Err(Error::NoComparablePairs) => {
                    log::warn!("fold {f}: no comparable pairs, skipped");
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<MetricRow> = rows.into_iter().flatten().collect();
    if rows.is_empty() {
        return Err(Error::NoComparablePairs);
    }
    Ok(rows)
}

/// Mean and population standard deviation per `(task, k, metric)`, in
/// sorted key order.
pub fn summarize(rows: &[MetricRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(&str, Option<usize>, &str), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry((&r.task, r.k, &r.metric)).or_default().push(r.value);
    }
    groups
        .into_iter()
        .map(|((task, k, metric), v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            SummaryRow {
                task: task.to_string(),
                k,
                metric: metric.to_string(),
                n: v.len(),
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(METRIC_COLUMNS).map_err(csv_err)?;
    for r in rows {
        let k = r.k.map(|k| k.to_string()).unwrap_or_default();
        w.write_record([r.task.as_str(), &k, &r.repeat.to_string(), &r.metric, &r.value.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_summary_json(summary: &[SummaryRow], path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
