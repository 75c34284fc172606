//! CSV and text tables over run summaries.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pipeline::{read_json, read_jsonl};
use super::RunDir;
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::judge::JudgeMode;
use crate::metrics::{EvalRecord, Summary, METRIC_COLUMNS};
use crate::trainer::Scheme;

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// `in_distribution` or `ood`.
    pub kind: String,
    pub scheme: Scheme,
    pub layer: usize,
    pub n: usize,
    pub k: usize,
    pub f: f64,
    pub judge_mode: JudgeMode,
    pub metrics: Summary,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub kind: String,
    pub count: usize,
    /// `mean±std` per metric, in column order.
    pub cells: Vec<String>,
    /// OOD rows: fraction of records above the reference mean, per metric.
    pub exceedance: Option<[Option<f64>; 7]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub csv: String,
    pub table: String,
}

/// Per metric, the fraction of records whose value is strictly above the
/// reference mean. Records lacking the metric are not counted.
pub fn exceedance(records: &[EvalRecord], reference: &Summary) -> [Option<f64>; 7] {
    let refs = reference.columns();
    std::array::from_fn(|i| {
        let mean = refs[i].mean?;
        let values: Vec<f64> = records.iter().filter_map(|r| r.columns()[i]).collect();
        if values.is_empty() {
            return None;
        }
        Some(values.iter().filter(|&&v| v > mean).count() as f64 / values.len() as f64)
    })
}

fn label(dir: &Path) -> String {
    dir.file_name().map_or_else(
        || dir.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    )
}

/// Reference summary: a `summary.json` file, or a run directory whose
/// in-distribution summary is used.
fn reference_summary(path: &Path) -> Result<Summary> {
    let file = if path.is_dir() {
        RunDir::new(path).summary()
    } else {
        path.to_path_buf()
    };
    let s: RunSummary = read_json(&file)?;
    Ok(s.metrics)
}

/// One row per in-distribution summary and per OOD summary found under
/// `runs`. OOD rows are compared against `reference`, or against the same
/// run's in-distribution summary when no reference is given. Writes
/// `report.csv` and `report.txt` into `out` when set.
pub fn emit_report(
    runs: &[PathBuf],
    reference: Option<&Path>,
    out: Option<&Path>,
) -> Result<Report> {
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    let fixed_ref = reference.map(reference_summary).transpose()?;
    for dir in runs {
        let run = RunDir::new(dir);
        let ood_summary = run.ood().join("summary.json");
        let (has_in, has_ood) = (run.summary().exists(), ood_summary.exists());
        if !has_in && !has_ood {
            missing.push(dir.display().to_string());
            continue;
        }
        let mut own: Option<Summary> = None;
        if has_in {
            let s: RunSummary = read_json(&run.summary())?;
            rows.push(row(label(dir), &s, None));
            own = Some(s.metrics);
        }
        if has_ood {
            let s: RunSummary = read_json(&ood_summary)?;
            let records: Vec<EvalRecord> = read_jsonl(&run.ood().join("records.jsonl"))?;
            let reference = fixed_ref.as_ref().or(own.as_ref()).ok_or_else(|| {
                Error::Report(format!(
                    "{}: OOD summary without a reference run",
                    dir.display()
                ))
            })?;
            rows.push(row(label(dir), &s, Some(exceedance(&records, reference))));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Report(format!(
            "no summaries in: {}",
            missing.join(", ")
        )));
    }
    let report = Report {
        csv: to_csv(&rows),
        table: to_table(&rows),
        rows,
    };
    if let Some(dir) = out {
        write_atomic(&dir.join("report.csv"), report.csv.as_bytes())?;
        write_atomic(&dir.join("report.txt"), report.table.as_bytes())?;
    }
    Ok(report)
}

fn row(run: String, s: &RunSummary, exceedance: Option<[Option<f64>; 7]>) -> ReportRow {
    ReportRow {
        run,
        kind: s.kind.clone(),
        count: s.metrics.count,
        cells: s.metrics.columns().iter().map(|m| m.cell()).collect(),
        exceedance,
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn to_csv(rows: &[ReportRow]) -> String {
    let mut header = vec!["run".to_string(), "kind".into(), "count".into()];
    header.extend(METRIC_COLUMNS.iter().map(|c| c.to_string()));
    header.extend(METRIC_COLUMNS.iter().map(|c| format!("exceed_{c}")));
    let mut out = header.join(",") + "\n";
    for r in rows {
        let mut f = vec![csv_field(&r.run), r.kind.clone(), r.count.to_string()];
        f.extend(r.cells.iter().cloned());
        match &r.exceedance {
            Some(ex) => f.extend(
                ex.iter()
                    .map(|v| v.map_or(String::new(), |x| format!("{x:.4}"))),
            ),
            None => f.extend(std::iter::repeat_n(String::new(), 7)),
        }
        out += &f.join(",");
        out.push('\n');
    }
    out
}

fn to_table(rows: &[ReportRow]) -> String {
    let mut grid: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["run".to_string(), "kind".into(), "count".into()];
    header.extend(METRIC_COLUMNS.iter().map(|c| c.to_string()));
    grid.push(header);
    for r in rows {
        let mut line = vec![r.run.clone(), r.kind.clone(), r.count.to_string()];
        line.extend(r.cells.iter().cloned());
        grid.push(line);
    }
    let widths: Vec<usize> = (0..grid[0].len())
        .map(|c| grid.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for line in &grid {
        let cells: Vec<String> = line
            .iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
            .collect();
        out += cells.join("  ").trim_end();
        out.push('\n');
    }
    for r in rows.iter().filter(|r| r.exceedance.is_some()) {
        let ex = r.exceedance.as_ref().unwrap();
        let parts: Vec<String> = METRIC_COLUMNS
            .iter()
            .zip(ex)
            .filter_map(|(c, v)| v.map(|x| format!("{c} {:.0}%", 100.0 * x)))
            .collect();
        out += &format!(
            "{} ({}) above reference mean: {}\n",
            r.run,
            r.kind,
            parts.join(", ")
        );
    }
    out
}
