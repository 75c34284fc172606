//! One trained inverter per axis value, everything else held fixed.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::pipeline::{run_pipeline, run_stage, Stage};
use super::report::RunSummary;
use super::{ExperimentConfig, RunDir};
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::metrics::METRIC_COLUMNS;

/// Depth that absolute layer values refer to.
pub const REFERENCE_DEPTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Layers,
    Lengths,
    Factor,
    Tokens,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Layers => "layers",
            SweepAxis::Lengths => "lengths",
            SweepAxis::Factor => "factor",
            SweepAxis::Tokens => "tokens",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::Layers => vec![5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            SweepAxis::Lengths => vec![8.0, 16.0, 32.0, 64.0],
            SweepAxis::Factor => vec![0.5, 1.0, 2.0, 4.0, 8.0],
            SweepAxis::Tokens => vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layers" | "layer" => Ok(SweepAxis::Layers),
            "lengths" | "length" | "n" => Ok(SweepAxis::Lengths),
            "factor" | "f" => Ok(SweepAxis::Factor),
            "tokens" | "k" => Ok(SweepAxis::Tokens),
            _ => Err(Error::Config(format!("unknown sweep axis `{s}`"))),
        }
    }
}

/// Maps layer indices of a [`REFERENCE_DEPTH`]-layer model onto `depth`
/// layers by relative position, clamped to `1..=depth`.
pub fn layer_mapping(values: &[f64], depth: usize) -> Vec<(f64, usize)> {
    values
        .iter()
        .map(|&v| {
            let l = (v / REFERENCE_DEPTH as f64 * depth as f64).round() as usize;
            (v, l.clamp(1, depth))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: f64,
    /// Model layer actually used, for the layer axis.
    pub mapped_layer: Option<usize>,
    pub dir: PathBuf,
    pub summary: Option<RunSummary>,
    pub error: Option<String>,
}

impl SweepCell {
    pub fn rouge1(&self) -> Option<f64> {
        self.summary.as_ref().and_then(|s| s.metrics.rouge1.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub cells: Vec<SweepCell>,
    /// Whether the expected trend holds, when it can be judged.
    pub trend_holds: Option<bool>,
    pub verdict: String,
}

fn fmt_value(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn cell_config(
    base: &ExperimentConfig,
    axis: SweepAxis,
    value: f64,
    mapped: Option<usize>,
) -> Result<ExperimentConfig> {
    let mut c = base.clone();
    let as_count = || {
        if value >= 1.0 && value.fract() == 0.0 {
            Ok(value as usize)
        } else {
            Err(Error::Config(format!(
                "{} value {value} must be a positive integer",
                axis.name()
            )))
        }
    };
    match axis {
        SweepAxis::Layers => c.layer = mapped.expect("layer axis is mapped"),
        SweepAxis::Lengths => c.n = as_count()?,
        SweepAxis::Factor => c.adapter.f = value,
        SweepAxis::Tokens => c.adapter.k = Some(as_count()?),
    }
    Ok(c)
}

fn verdict(
    axis: SweepAxis,
    cells: &[SweepCell],
    base: &ExperimentConfig,
) -> (Option<bool>, String) {
    let r1 = |v: f64| {
        cells
            .iter()
            .find(|c| c.value == v)
            .and_then(SweepCell::rouge1)
    };
    let scored: Vec<(f64, f64)> = cells
        .iter()
        .filter_map(|c| c.rouge1().map(|r| (c.value, r)))
        .collect();
    let best = scored
        .iter()
        .cloned()
        .fold(None, |b: Option<(f64, f64)>, x| {
            if b.is_none_or(|b| x.1 > b.1) {
                Some(x)
            } else {
                b
            }
        });
    match axis {
        SweepAxis::Lengths => match (scored.first(), scored.last()) {
            (Some(&(a, ra)), Some(&(b, rb))) if a != b => (
                Some(ra > rb),
                format!(
                    "ROUGE-1 at n={} is {ra:.4}, at n={} is {rb:.4}",
                    fmt_value(a),
                    fmt_value(b)
                ),
            ),
            _ => (None, "fewer than two scored lengths".into()),
        },
        SweepAxis::Tokens => match (r1(base.n as f64), r1(1.0)) {
            (Some(at_n), Some(at_1)) => (
                Some(at_n >= at_1),
                format!(
                    "ROUGE-1 at k=n={} is {at_n:.4}, at k=1 is {at_1:.4}",
                    base.n
                ),
            ),
            _ => (None, "k=n or k=1 not scored".into()),
        },
        SweepAxis::Layers | SweepAxis::Factor => match best {
            Some((v, r)) => (
                None,
                format!(
                    "best {} value {} with ROUGE-1 {r:.4}",
                    axis.name(),
                    fmt_value(v)
                ),
            ),
            None => (None, "no cell scored".into()),
        },
    }
}

/// Trains and evaluates one run per value under `<out>/sweep-<axis>/`.
/// Corpus, tokenizer, and models are shared with the base run directory;
/// a failing cell is recorded and the sweep continues.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: Option<Vec<f64>>,
) -> Result<SweepTable> {
    let values = values.unwrap_or_else(|| axis.default_values());
    let shared = RunDir::new(&base.out);
    run_stage(base, &shared, Stage::TrainLm)?;
    let root = base.out.join(format!("sweep-{}", axis.name()));
    let mapped: Vec<Option<usize>> = match axis {
        SweepAxis::Layers => {
            let m = layer_mapping(&values, base.target.n_layers);
            for (v, l) in &m {
                log::info!(
                    "layer {} of {REFERENCE_DEPTH} -> layer {l} of {}",
                    fmt_value(*v),
                    base.target.n_layers
                );
            }
            m.into_iter().map(|(_, l)| Some(l)).collect()
        }
        _ => vec![None; values.len()],
    };
    let mut cells = Vec::new();
    for (&value, &m) in values.iter().zip(&mapped) {
        let dir = root.join(format!("{}={}", axis.name(), fmt_value(value)));
        let run = RunDir {
            shared: base.out.clone(),
            dir: dir.clone(),
        };
        let outcome = cell_config(base, axis, value, m).and_then(|c| run_pipeline(&c, &run));
        let (summary, error) = match outcome {
            Ok(s) => (Some(s), None),
            Err(e) => {
                log::warn!(
                    "sweep cell {}={} failed: {e}",
                    axis.name(),
                    fmt_value(value)
                );
                (None, Some(e.to_string()))
            }
        };
        cells.push(SweepCell {
            value,
            mapped_layer: m,
            dir,
            summary,
            error,
        });
    }
    let (trend_holds, verdict) = verdict(axis, &cells, base);
    let table = SweepTable {
        axis,
        cells,
        trend_holds,
        verdict,
    };
    write_atomic(
        &root.join("sweep.json"),
        serde_json::to_string_pretty(&table)?.as_bytes(),
    )?;
    write_atomic(&root.join("sweep.csv"), to_csv(&table).as_bytes())?;
    Ok(table)
}

fn to_csv(t: &SweepTable) -> String {
    let mut out = format!(
        "{},mapped_layer,status,{}\n",
        t.axis.name(),
        METRIC_COLUMNS.join(",")
    );
    for c in &t.cells {
        let cells: Vec<String> = match &c.summary {
            Some(s) => s.metrics.columns().iter().map(|m| m.cell()).collect(),
            None => vec![String::new(); 7],
        };
        let status = match &c.error {
            None => "ok".to_string(),
            Some(e) => format!("\"failed: {}\"", e.replace('"', "'")),
        };
        out += &format!(
            "{},{},{},{}\n",
            fmt_value(c.value),
            c.mapped_layer.map_or(String::new(), |l| l.to_string()),
            status,
            cells.join(",")
        );
    }
    out
}
