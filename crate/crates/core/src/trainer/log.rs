use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::LossReport;

pub const LOG_COLUMNS: [&str; 9] = ["step", "total", "info_nce", "got_node", "got_edge", "intra", "mse", "lr", "rankme"];

/// One optimizer step of the training log. `rankme` is filled on the last
/// step of every epoch where it was evaluated.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub info_nce: f64,
    pub got_node: f64,
    pub got_edge: f64,
    pub intra: f64,
    pub mse: f64,
    pub lr: f64,
    pub rankme: Option<f64>,
}

impl LogRow {
    pub fn new(step: usize, epoch: usize, report: &LossReport, lr: f64) -> Self {
        Self {
            step,
            epoch,
            total: report.total,
            info_nce: report.info_nce,
            got_node: report.got_node,
            got_edge: report.got_edge,
            intra: report.intra,
            mse: report.mse,
            lr,
            rankme: None,
        }
    }

    pub(crate) fn record(&self) -> [String; 9] {
        [
            self.step.to_string(),
            self.total.to_string(),
            self.info_nce.to_string(),
            self.got_node.to_string(),
            self.got_edge.to_string(),
            self.intra.to_string(),
            self.mse.to_string(),
            self.lr.to_string(),
            self.rankme.map(|r| r.to_string()).unwrap_or_default(),
        ]
    }
}

pub(crate) struct LogWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> LogWriter<W> {
    pub fn new(sink: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(sink);
        inner.write_record(LOG_COLUMNS).map_err(csv_err)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, rows: &[LogRow]) -> Result<()> {
        for r in rows {
            self.inner.write_record(r.record()).map_err(csv_err)?;
        }
        self.inner.flush().map_err(|e| Error::io("training log", e))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::io("training log", std::io::Error::other(e))
}

/// Writes a complete log to `path`.
pub fn write_log_csv(rows: &[LogRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    LogWriter::new(file)?.write(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_empty_rankme() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let report = LossReport { total: 1.5, info_nce: 1.5, ..Default::default() };
        let mut rows = vec![LogRow::new(0, 1, &report, 1e-9), LogRow::new(1, 1, &report, 2e-5)];
        rows[1].rankme = Some(3.25);
        write_log_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,total,info_nce,got_node,got_edge,intra,mse,lr,rankme");
        assert_eq!(lines[1], "0,1.5,1.5,0,0,0,0,0.000000001,");
        assert_eq!(lines[2], "1,1.5,1.5,0,0,0,0,0.00002,3.25");
    }
}
