//! CSV files exchanged between subcommands.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use stainalign::encoder::AttentionRecord;
use stainalign::{Dataset, SlideEmbedding};

use crate::failure::{CliResult, Failure};

pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const ATTENTION_FILE: &str = "attention.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const TIME_COLUMN: &str = "time";
pub const EVENT_COLUMN: &str = "event";

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::new(1, format!("{}: {e}", path.display()))
}

fn writer(path: &Path) -> CliResult<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| io_err(path, e))
}

/// `case_id, stain, e0, …, e{d-1}`.
pub fn write_embeddings(path: &Path, rows: &[SlideEmbedding]) -> CliResult<()> {
    let d = rows.first().map_or(0, |r| r.vector.len());
    let mut w = writer(path)?;
    let mut header = vec!["case_id".to_string(), "stain".to_string()];
    header.extend((0..d).map(|i| format!("e{i}")));
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for r in rows {
        let mut rec = vec![r.case_id.clone(), r.stain.name.clone()];
        rec.extend(r.vector.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// `case_id, stain, patch_index, head, weight`, one row per patch and head.
pub fn write_attention(path: &Path, records: &[AttentionRecord]) -> CliResult<()> {
    let mut w = writer(path)?;
    w.write_record(["case_id", "stain", "patch_index", "head", "weight"]).map_err(|e| io_err(path, e))?;
    for r in records {
        let n = r.weights.first().map_or(0, |h| h.len());
        for j in 0..n {
            for (m, head) in r.weights.iter().enumerate() {
                w.write_record([r.case_id.as_str(), &r.stain.name, &j.to_string(), &m.to_string(), &head[j].to_string()])
                    .map_err(|e| io_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// `case_id`, one column per label task, then `time, event` when any case
/// has survival data. Missing values are empty cells.
pub fn write_labels(path: &Path, dataset: &Dataset) -> CliResult<()> {
    let tasks: BTreeSet<&str> = dataset.cases.iter().flat_map(|c| c.labels.keys().map(String::as_str)).collect();
    let survival = dataset.cases.iter().any(|c| c.survival.is_some());
    let mut w = writer(path)?;
    let mut header = vec!["case_id"];
    header.extend(tasks.iter().copied());
    if survival {
        header.extend([TIME_COLUMN, EVENT_COLUMN]);
    }
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for c in &dataset.cases {
        let mut rec = vec![c.case_id.clone()];
        rec.extend(tasks.iter().map(|t| c.labels.get(*t).map(|l| l.to_string()).unwrap_or_default()));
        if survival {
            match c.survival {
                Some(s) => rec.extend([s.time.to_string(), (s.event as u8).to_string()]),
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub case_id: String,
    pub stain: String,
    pub vector: Vec<f64>,
}

pub fn read_embeddings(path: &Path) -> CliResult<Vec<EmbeddingRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let width = r.headers().map_err(|e| io_err(path, e))?.len();
    if width < 3 {
        return Err(Failure::data(format!("{}: expected case_id, stain and at least one value column", path.display())));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let vector = rec
            .iter()
            .skip(2)
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Failure::data(format!("{} row {}: {e}", path.display(), line + 2)))?;
        rows.push(EmbeddingRow { case_id: rec[0].to_string(), stain: rec[1].to_string(), vector });
    }
    Ok(rows)
}

#[derive(Clone, Debug, Default)]
pub struct LabelTable {
    pub tasks: Vec<String>,
    /// Per case: one optional value per task.
    pub labels: BTreeMap<String, Vec<Option<String>>>,
    pub survival: BTreeMap<String, (f64, bool)>,
}

pub fn read_labels(path: &Path) -> CliResult<LabelTable> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header: Vec<String> = r.headers().map_err(|e| io_err(path, e))?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("case_id") {
        return Err(Failure::data(format!("{}: first column must be case_id", path.display())));
    }
    let col = |name: &str| header.iter().position(|h| h == name);
    let (time_col, event_col) = (col(TIME_COLUMN), col(EVENT_COLUMN));
    let task_cols: Vec<usize> = (1..header.len()).filter(|&i| Some(i) != time_col && Some(i) != event_col).collect();
    let mut table = LabelTable {
        tasks: task_cols.iter().map(|&i| header[i].clone()).collect(),
        ..Default::default()
    };
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let id = rec[0].to_string();
        let values = task_cols
            .iter()
            .map(|&i| Some(rec[i].trim()).filter(|v| !v.is_empty()).map(str::to_string))
            .collect();
        if let (Some(t), Some(e)) = (time_col, event_col) {
            let (t, e) = (rec[t].trim(), rec[e].trim());
            if !t.is_empty() && !e.is_empty() {
                let bad = |what: &str| Failure::data(format!("{} row {}: bad {what}", path.display(), line + 2));
                let time: f64 = t.parse().map_err(|_| bad("time"))?;
                let event = match e {
                    "1" | "true" => true,
                    "0" | "false" => false,
                    _ => return Err(bad("event")),
                };
                table.survival.insert(id.clone(), (time, event));
            }
        }
        if table.labels.insert(id.clone(), values).is_some() {
            return Err(Failure::data(format!("{}: duplicate case_id {id}", path.display())));
        }
    }
    Ok(table)
}

/// Dense class indices for string labels, numbered in numeric order when
/// every label is an integer and in lexical order otherwise.
pub fn encode_classes(values: &[&str]) -> Vec<usize> {
    if let Ok(ints) = values.iter().map(|v| v.parse::<i64>()).collect::<Result<Vec<_>, _>>() {
        let distinct: Vec<i64> = ints.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        return ints.iter().map(|v| distinct.binary_search(v).expect("value collected above")).collect();
    }
    let names: Vec<&str> = values.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    values.iter().map(|v| names.binary_search(v).expect("name collected above")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_are_dense() {
        assert_eq!(encode_classes(&["3", "0", "10", "3"]), vec![1, 0, 2, 1]);
        assert_eq!(encode_classes(&["pos", "neg", "pos"]), vec![1, 0, 1]);
    }
}
