//! Aggregation of `metrics/eval.jsonl` records across run directories into a
//! mean ± sample-stdev table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{read_jsonl, write_bytes, EvalRecord};

/// Cell key: (track, metric, regime, fusion, members).
type Key = (String, String, String, String, String);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub track: String,
    pub metric: String,
    pub regime: String,
    pub fusion: String,
    pub members: String,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub stdev: f64,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<PathBuf>,
    pub cells: Vec<ReportCell>,
}

fn key(r: &EvalRecord) -> Key {
    (r.track.clone(), r.metric.clone(), r.regime.clone(), r.fusion.clone(), r.members.clone())
}

/// Expand `dirs` into run directories: a directory holding
/// `metrics/eval.jsonl` is a run; otherwise its `seed-*` children are.
pub fn discover_runs(dirs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut runs = Vec::new();
    for d in dirs {
        if !d.exists() {
            return Err(Error::MissingPath(d.clone()));
        }
        if d.join("metrics").join("eval.jsonl").is_file() {
            runs.push(d.clone());
            continue;
        }
        let entries = std::fs::read_dir(d).map_err(|e| Error::io(d, e))?;
        let mut children: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("metrics").join("eval.jsonl").is_file())
            .collect();
        children.sort();
        runs.extend(children);
    }
    if runs.is_empty() {
        return Err(Error::Data("no run directories with metrics/eval.jsonl".into()));
    }
    Ok(runs)
}

pub fn build_report(runs: &[PathBuf]) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::Data("no runs to report".into()));
    }
    let mut cells: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    let mut first_keys: Option<Vec<Key>> = None;
    for run in runs {
        let records: Vec<EvalRecord> = read_jsonl(&run.join("metrics").join("eval.jsonl"))?;
        let mut keys: Vec<Key> = records.iter().map(key).collect();
        keys.sort();
        if keys.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Data(format!("{}: duplicate report cells", run.display())));
        }
        match &first_keys {
            None => first_keys = Some(keys),
            Some(k) if *k != keys => {
                return Err(Error::Data(format!(
                    "{}: its cells (regime × fusion × members) differ from {}",
                    run.display(),
                    runs[0].display()
                )))
            }
            Some(_) => {}
        }
        for r in &records {
            cells.entry(key(r)).or_default().push(r.value);
        }
    }
    let cells = cells
        .into_iter()
        .map(|((track, metric, regime, fusion, members), values)| {
            let (mean, stdev) = mean_stdev(&values);
            ReportCell {
                track,
                metric,
                regime,
                fusion,
                members,
                mean,
                stdev,
                values,
            }
        })
        .collect();
    Ok(Report {
        runs: runs.to_vec(),
        cells,
    })
}

pub fn mean_stdev(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Report {
    pub fn cell(&self, track: &str, regime: &str, fusion: &str, members: &str) -> Option<&ReportCell> {
        self.cells
            .iter()
            .find(|c| c.track == track && c.regime == regime && c.fusion == fusion && c.members == members)
    }

    /// Aligned text table; accuracy and EER are shown in percent.
    pub fn render(&self) -> String {
        let header = ["track", "regime", "fusion", "members", "metric", "mean", "stdev", "n"];
        let rows: Vec<[String; 8]> = self
            .cells
            .iter()
            .map(|c| {
                let pct = matches!(c.metric.as_str(), "accuracy" | "eer");
                let f = if pct { 100.0 } else { 1.0 };
                let metric = if pct { format!("{} (%)", c.metric) } else { c.metric.clone() };
                [
                    c.track.clone(),
                    c.regime.clone(),
                    c.fusion.clone(),
                    c.members.clone(),
                    metric,
                    format!("{:.2}", c.mean * f),
                    format!("{:.2}", c.stdev * f),
                    c.values.len().to_string(),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for r in &rows {
            for (w, cell) in widths.iter_mut().zip(r) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[&str]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (c, w))| if i >= 5 { format!("{c:>w$}") } else { format!("{c:<w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &header);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        line(&mut out, &rule.iter().map(String::as_str).collect::<Vec<_>>());
        for r in &rows {
            line(&mut out, &r.iter().map(String::as_str).collect::<Vec<_>>());
        }
        let _ = writeln!(out, "\nruns: {}", self.runs.len());
        out
    }

    /// Write `report.txt` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_bytes(&dir.join("report.txt"), self.render().as_bytes())?;
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        write_bytes(&dir.join("report.json"), &json)
    }
}
