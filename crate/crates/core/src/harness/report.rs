use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::metrics::Metric;

/// One aggregated system score. `value` is a percentage in `[0, 100]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub system: String,
    pub split: String,
    pub metric: Metric,
    pub value: f64,
    pub n_examples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn push(&mut self, row: ResultRow) {
        self.rows.push(row);
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, system: &str, split: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.system == system && r.split == split)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["system", "split", "metric", "value", "n_examples", "seed"])
            .expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.system.clone(),
                r.split.clone(),
                r.metric.to_string(),
                format!("{:.2}", r.value),
                r.n_examples.to_string(),
                r.seed.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn from_csv(text: &str) -> Result<Self, HarnessError> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let rows = rdr
            .deserialize()
            .collect::<Result<Vec<ResultRow>, _>>()
            .map_err(|e| HarnessError::Config(format!("results csv: {e}")))?;
        Ok(Self { rows })
    }

    /// Systems as rows, splits as columns, both in first-appearance order.
    /// Cells average over seeds.
    pub fn to_markdown(&self) -> String {
        let mut systems: Vec<&str> = Vec::new();
        let mut splits: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !systems.contains(&r.system.as_str()) {
                systems.push(&r.system);
            }
            if !splits.contains(&r.split.as_str()) {
                splits.push(&r.split);
            }
        }
        let metric = self.rows.first().map(|r| r.metric.to_string()).unwrap_or_default();
        let mut out = String::new();
        let _ = write!(out, "| System ({metric}) |");
        for s in &splits {
            let _ = write!(out, " {s} |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(splits.len()));
        out.push('\n');
        for sys in &systems {
            let _ = write!(out, "| {sys} |");
            for split in &splits {
                let vals: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.system == *sys && r.split == *split)
                    .map(|r| r.value)
                    .collect();
                if vals.is_empty() {
                    out.push_str(" - |");
                } else {
                    let _ = write!(out, " {:.2} |", vals.iter().sum::<f64>() / vals.len() as f64);
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

/// Write `table` to `path` in `format`.
pub fn emit_report(table: &ResultTable, format: ReportFormat, path: &Path) -> Result<(), HarnessError> {
    if table.is_empty() {
        return Err(HarnessError::Missing("no result rows to report".into()));
    }
    let body = match format {
        ReportFormat::Csv => table.to_csv(),
        ReportFormat::Markdown => format!("# Results\n\n{}", table.to_markdown()),
    };
    std::fs::write(path, body).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}
