//! Report assembly and CSV emission. Every report embeds the exact problem
//! file and seed it was produced from, and re-running from the embedded
//! file reproduces the numbers bit for bit under the same solver settings.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use ccmpc_core::mpc::ClosedLoopTrace;

use crate::problem::{ProblemError, ProblemFile};

/// Number format used everywhere on disk: 17 significant decimal digits,
/// enough to round-trip an f64 exactly.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// One experiment series destined for a CSV file.
#[derive(Debug, Clone, Serialize)]
pub struct Series {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Series {
    pub fn new(name: impl Into<String>, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len(), "row width mismatch");
        self.rows.push(row);
    }

    pub fn from_trace(name: impl Into<String>, trace: &ClosedLoopTrace) -> Self {
        let nx = trace.states[0].len();
        let nu = trace.inputs[0].len();
        let mut columns: Vec<String> = vec!["t".into()];
        columns.extend((0..nx).map(|i| format!("x{i}")));
        columns.extend((0..nu).map(|i| format!("u{i}")));
        columns.extend(
            ["stage_cost", "V_N", "solve_time_s"]
                .iter()
                .map(|s| s.to_string()),
        );
        let mut series = Series {
            name: name.into(),
            columns,
            rows: Vec::new(),
        };
        for t in 0..trace.inputs.len() {
            let mut row = vec![t as f64];
            row.extend(trace.states[t].iter());
            row.extend(trace.inputs[t].iter());
            row.push(trace.stage_costs[t]);
            row.push(trace.values[t]);
            row.push(trace.solve_times[t]);
            series.rows.push(row);
        }
        series
    }
}

/// An experiment report: summary values plus the emitted series, with the
/// provenance needed to reproduce it.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub name: String,
    pub seed: u64,
    pub problem: ProblemFile,
    pub summary: serde_json::Map<String, serde_json::Value>,
    pub series: Vec<Series>,
}

impl Report {
    pub fn new(name: impl Into<String>, seed: u64, problem: ProblemFile) -> Self {
        Self {
            name: name.into(),
            seed,
            problem,
            summary: serde_json::Map::new(),
            series: Vec::new(),
        }
    }

    pub fn record(&mut self, key: &str, value: impl Serialize) {
        self.summary.insert(
            key.to_string(),
            serde_json::to_value(value).expect("serialisable summary value"),
        );
    }

    pub fn push_series(&mut self, series: Series) {
        self.series.push(series);
    }

    /// Write the summary JSON and one CSV file per series into a directory.
    pub fn emit(&self, dir: &Path) -> Result<(), ProblemError> {
        std::fs::create_dir_all(dir)?;
        let summary_path = dir.join(format!("{}_summary.json", self.name));
        let mut file = std::fs::File::create(summary_path)?;
        serde_json::to_writer_pretty(&mut file, &self)?;
        file.write_all(b"\n")?;
        for series in &self.series {
            emit_csv(series, &dir.join(format!("{}_{}.csv", self.name, series.name)))?;
        }
        Ok(())
    }
}

/// Deterministic CSV emission: fixed column order, 17-digit decimals.
pub fn emit_csv(series: &Series, path: &Path) -> Result<(), ProblemError> {
    let mut out = String::new();
    out.push_str(&series.columns.join(","));
    out.push('\n');
    for row in &series.rows {
        let cells: Vec<String> = row.iter().map(|&v| fmt17(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
