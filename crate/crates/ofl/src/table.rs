//! CSV output for logs and metric tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ofl_core::train::{EpochLog, EvalReport};

use crate::error::{OflError, Result};

/// Headline metric columns shared by every metrics table.
pub const METRIC_COLUMNS: [&str; 5] = ["epe", "as", "ar", "out", "occ_acc"];

pub fn level_columns(levels: usize) -> Vec<String> {
    (0..levels).map(|l| format!("epe_l{l}")).collect()
}

pub fn log_header(levels: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "loss", "flow_loss", "occ_loss"]
        .map(String::from)
        .to_vec();
    h.extend(METRIC_COLUMNS.map(String::from));
    h.extend(level_columns(levels));
    h
}

fn fmt(v: f64) -> String {
    // shortest round-trip representation
    format!("{v:?}")
}

pub fn log_row(log: &EpochLog) -> Vec<String> {
    let m = &log.metrics;
    let mut row = vec![
        log.epoch.to_string(),
        fmt(log.loss),
        fmt(log.flow_loss),
        fmt(log.occ_loss),
    ];
    row.extend(
        [
            m.epe,
            m.acc_strict,
            m.acc_relax,
            m.outliers,
            log.occlusion_accuracy,
        ]
        .map(fmt),
    );
    row.extend(log.level_epe.iter().copied().map(fmt));
    row
}

pub fn metrics_header(levels: usize) -> Vec<String> {
    let mut h: Vec<String> = METRIC_COLUMNS.map(String::from).to_vec();
    h.extend(level_columns(levels));
    h
}

pub fn metrics_row(r: &EvalReport) -> Vec<String> {
    let m = &r.metrics;
    let mut row: Vec<String> = [
        m.epe,
        m.acc_strict,
        m.acc_relax,
        m.outliers,
        r.occlusion_accuracy,
    ]
    .map(fmt)
    .to_vec();
    row.extend(r.level_epe.iter().copied().map(fmt));
    row
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Csv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(header: Vec<String>) -> Self {
        Self {
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.header.join(","));
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.join(","));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| OflError::io(path, e))
    }

    pub fn parse(text: &str) -> Self {
        let mut lines = text.lines().filter(|l| !l.is_empty());
        let split = |l: &str| l.split(',').map(String::from).collect::<Vec<_>>();
        let header = lines.next().map(split).unwrap_or_default();
        Self {
            header,
            rows: lines.map(split).collect(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| OflError::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn value(&self, row: usize, name: &str) -> Option<f64> {
        self.rows.get(row)?.get(self.column(name)?)?.parse().ok()
    }
}
