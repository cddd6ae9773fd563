//! Result tables and their CSV or text rendering.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{OweError, Result};
use crate::scenario::{ExperimentKind, Scenario};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Text(String),
    /// Decibels, printed with two decimals.
    Db(f64),
    /// Printed with enough digits to round-trip.
    Raw(f64),
}

impl Cell {
    pub fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Db(v) if v.is_infinite() => if *v > 0.0 { "inf" } else { "-inf" }.to_string(),
            Cell::Db(v) => format!("{v:.2}"),
            Cell::Raw(v) => format!("{v:e}"),
        }
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self { name: name.to_string(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len(), "table {}", self.name);
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Ok,
    CoverageLoss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub kind: ExperimentKind,
    pub scenario_name: String,
    pub scenario_digest: String,
    pub seed: u64,
    pub version: String,
    /// Only written to the text report so CSV output stays reproducible.
    pub generated_at: Option<String>,
    pub status: RunStatus,
    pub summary: Vec<(String, String)>,
    pub tables: Vec<Table>,
}

impl RunReport {
    pub fn new(kind: ExperimentKind, scenario: &Scenario) -> Self {
        Self {
            kind,
            scenario_name: scenario.name.clone(),
            scenario_digest: scenario.digest(),
            seed: scenario.optimizer.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            generated_at: None,
            status: RunStatus::Ok,
            summary: Vec::new(),
            tables: Vec::new(),
        }
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.summary.push((key.to_string(), value.to_string()));
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    fn status_str(&self) -> &'static str {
        match self.status {
            RunStatus::Ok => "ok",
            RunStatus::CoverageLoss => "coverage-loss",
        }
    }

    fn provenance(&self) -> Vec<(String, String)> {
        let mut v = vec![
            ("experiment".to_string(), self.kind.as_str().to_string()),
            ("scenario".to_string(), self.scenario_name.clone()),
            ("scenario_digest".to_string(), self.scenario_digest.clone()),
            ("seed".to_string(), self.seed.to_string()),
            ("version".to_string(), self.version.clone()),
            ("status".to_string(), self.status_str().to_string()),
        ];
        v.extend(self.summary.iter().cloned());
        v
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.provenance() {
            let _ = writeln!(out, "{k}: {v}");
        }
        if let Some(t) = &self.generated_at {
            let _ = writeln!(out, "generated_at: {t}");
        }
        for table in &self.tables {
            let cells: Vec<Vec<String>> = table.rows.iter().map(|r| r.iter().map(Cell::render).collect()).collect();
            let widths: Vec<usize> = (0..table.columns.len())
                .map(|c| cells.iter().map(|r| r[c].len()).chain([table.columns[c].len()]).max().unwrap_or(0))
                .collect();
            let _ = writeln!(out, "\n[{}]", table.name);
            let line = |cols: &[String]| {
                cols.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ")
            };
            let _ = writeln!(out, "{}", line(&table.columns));
            for r in &cells {
                let _ = writeln!(out, "{}", line(r));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| OweError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| OweError::io(path, e))
}

fn csv_bytes(columns: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(columns)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| OweError::Csv(e.into_error().into()))
}

/// Write the report into `dir`; returns the files written.
pub fn emit_report(report: &RunReport, dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| OweError::io(dir, e))?;
    let mut written = Vec::new();
    match format {
        ReportFormat::Csv => {
            let path = dir.join("run.csv");
            let cols = vec!["key".to_string(), "value".to_string()];
            write_atomic(&path, &csv_bytes(&cols, report.provenance().into_iter().map(|(k, v)| vec![k, v]))?)?;
            written.push(path);
            for t in &report.tables {
                let path = dir.join(format!("{}.csv", t.name));
                let rows = t.rows.iter().map(|r| r.iter().map(Cell::render).collect());
                write_atomic(&path, &csv_bytes(&t.columns, rows)?)?;
                written.push(path);
            }
        }
        ReportFormat::Text => {
            let path = dir.join("report.txt");
            write_atomic(&path, report.render_text().as_bytes())?;
            written.push(path);
        }
    }
    Ok(written)
}
