//! The `report` subcommand: one CSV row per run, one summary line per k.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::Serialize;

use crate::run::{read_run, KChoice};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub run: String,
    pub k: KChoice,
    pub seed: u64,
    pub input: String,
    pub first_response_s: f64,
    pub rtf: f64,
    pub accuracy: Option<f64>,
    pub token_error_rate: Option<f64>,
    pub params: usize,
    pub flops_per_frame: usize,
}

/// Means over the runs sharing one `k`; metrics no run carried stay empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub k: KChoice,
    pub runs: usize,
    pub first_response_s: f64,
    pub rtf: f64,
    pub accuracy: Option<f64>,
    pub token_error_rate: Option<f64>,
    pub params: f64,
    pub flops_per_frame: f64,
}

pub fn collect(runs: &[PathBuf]) -> Result<Vec<Row>> {
    let mut rows = Vec::with_capacity(runs.len());
    for dir in runs {
        let (record, report) = read_run(dir)?;
        rows.push(Row {
            run: dir.display().to_string(),
            k: record.k,
            seed: record.seed,
            input: record.input,
            first_response_s: report.first_response_s,
            rtf: report.rtf,
            accuracy: record.accuracy,
            token_error_rate: record.token_error_rate,
            params: report.params,
            flops_per_frame: report.flops_per_frame,
        });
    }
    rows.sort_by(|a, b| (a.k, a.seed, &a.input, &a.run).cmp(&(b.k, b.seed, &b.input, &b.run)));
    Ok(rows)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Expects `rows` sorted by k, as [`collect`] returns them.
pub fn summarize(rows: &[Row]) -> Vec<Summary> {
    rows.chunk_by(|a, b| a.k == b.k)
        .map(|group| Summary {
            k: group[0].k,
            runs: group.len(),
            first_response_s: mean(group.iter().map(|r| r.first_response_s)).unwrap_or_default(),
            rtf: mean(group.iter().map(|r| r.rtf)).unwrap_or_default(),
            accuracy: mean(group.iter().filter_map(|r| r.accuracy)),
            token_error_rate: mean(group.iter().filter_map(|r| r.token_error_rate)),
            params: mean(group.iter().map(|r| r.params as f64)).unwrap_or_default(),
            flops_per_frame: mean(group.iter().map(|r| r.flops_per_frame as f64)).unwrap_or_default(),
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

pub fn report_cmd(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let rows = collect(runs)?;
    if let Some(path) = out {
        let mut w = csv::Writer::from_path(path)?;
        for row in &rows {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    let mut stdout = std::io::stdout().lock();
    writeln!(
        stdout,
        "{:>9} {:>5} {:>12} {:>8} {:>9} {:>8} {:>10} {:>14}",
        "k", "runs", "response_s", "rtf", "accuracy", "ter", "params", "flops/frame"
    )?;
    for s in summarize(&rows) {
        writeln!(
            stdout,
            "{:>9} {:>5} {:>12.4} {:>8.4} {:>9} {:>8} {:>10.0} {:>14.0}",
            s.k.to_string(),
            s.runs,
            s.first_response_s,
            s.rtf,
            opt(s.accuracy),
            opt(s.token_error_rate),
            s.params,
            s.flops_per_frame
        )?;
    }
    Ok(())
}
