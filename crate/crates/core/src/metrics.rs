//! Token-level recovery scores and their aggregation.
//!
//! ROUGE operates on token ids. `beta = 1` everywhere in the pipeline, which
//! makes every F-measure symmetric in its two arguments.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn f_measure(recall: f64, precision: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = recall + b2 * precision;
    if denom <= 0.0 {
        return 0.0;
    }
    (1.0 + b2) * recall * precision / denom
}

fn gram_counts<Tok: Eq + Hash>(seq: &[Tok], n: usize) -> HashMap<&[Tok], usize> {
    let mut counts = HashMap::new();
    if n > 0 && seq.len() >= n {
        for g in seq.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-N F-measure with clipped n-gram overlap.
///
/// Returns 0 when either side has no n-grams.
pub fn rouge_n<Tok: Eq + Hash>(reference: &[Tok], candidate: &[Tok], n: usize, beta: f64) -> f64 {
    let r = gram_counts(reference, n);
    let c = gram_counts(candidate, n);
    let total_r: usize = r.values().sum();
    let total_c: usize = c.values().sum();
    if total_r == 0 || total_c == 0 {
        return 0.0;
    }
    let overlap: usize = r
        .iter()
        .filter_map(|(g, &cr)| c.get(g).map(|&cc| cr.min(cc)))
        .sum();
    f_measure(
        overlap as f64 / total_r as f64,
        overlap as f64 / total_c as f64,
        beta,
    )
}

/// Length of the longest common subsequence, `O(n·m)` time, `O(m)` space.
pub fn lcs_len<Tok: Eq>(a: &[Tok], b: &[Tok]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure from the longest common subsequence.
///
/// Recall and precision divide the LCS length by the candidate and
/// reference lengths; with `beta = 1` the orientation does not affect F.
pub fn rouge_l<Tok: Eq>(reference: &[Tok], candidate: &[Tok], beta: f64) -> f64 {
    if reference.is_empty() || candidate.is_empty() {
        return 0.0;
    }
    let l = lcs_len(reference, candidate) as f64;
    f_measure(l / candidate.len() as f64, l / reference.len() as f64, beta)
}

fn cosine<T: Real>(a: &[T], b: &[T]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64().unwrap(), y.to_f64().unwrap());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Greedy max-cosine matching F1 over rows of an embedding table.
///
/// A stand-in for BERTScore built on the decoder's own token embeddings,
/// not comparable to scores from a pretrained encoder.
pub fn embed_sim_f1<T: Real>(
    reference: &[u32],
    candidate: &[u32],
    table: &Tensor<T>,
) -> Result<f64> {
    let vocab = table.shape()[0];
    if let Some(bad) = reference
        .iter()
        .chain(candidate)
        .find(|&&t| t as usize >= vocab)
    {
        return Err(Error::Index(format!(
            "token {bad} outside embedding table of {vocab} rows"
        )));
    }
    if reference.is_empty() || candidate.is_empty() {
        log::warn!("embed_sim_f1 on an empty sequence scores 0");
        return Ok(0.0);
    }
    let best = |from: &[u32], to: &[u32]| -> f64 {
        from.iter()
            .map(|&i| {
                to.iter()
                    .map(|&j| cosine(table.row(i as usize), table.row(j as usize)))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    let precision = best(candidate, reference);
    let recall = best(reference, candidate);
    Ok(f_measure(recall, precision, 1.0).clamp(0.0, 1.0))
}

/// Scores for one (reference, inversion) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub embed_f1: f64,
    #[serde(default)]
    pub structure: Option<f64>,
    #[serde(default)]
    pub entity: Option<f64>,
    #[serde(default)]
    pub topic: Option<f64>,
}

impl EvalRecord {
    /// Token-level scores; judge scores are filled in later.
    pub fn score<T: Real>(
        id: usize,
        reference: &[u32],
        candidate: &[u32],
        table: &Tensor<T>,
    ) -> Result<Self> {
        Ok(EvalRecord {
            id,
            rouge1: rouge_n(reference, candidate, 1, 1.0),
            rouge2: rouge_n(reference, candidate, 2, 1.0),
            rouge_l: rouge_l(reference, candidate, 1.0),
            embed_f1: embed_sim_f1(reference, candidate, table)?,
            structure: None,
            entity: None,
            topic: None,
        })
    }

    /// Values in report column order.
    pub fn columns(&self) -> [Option<f64>; 7] {
        [
            Some(self.rouge1),
            Some(self.rouge2),
            Some(self.rouge_l),
            Some(self.embed_f1),
            self.structure,
            self.entity,
            self.topic,
        ]
    }
}

/// Report column names, in order.
pub const METRIC_COLUMNS: [&str; 7] = [
    "ROUGE-1",
    "ROUGE-2",
    "ROUGE-L",
    "embed_f1",
    "Structure",
    "Entity",
    "Topic",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    /// Population standard deviation.
    pub std: Option<f64>,
    pub present: usize,
    pub absent: usize,
}

impl MetricSummary {
    /// `0.48±0.23` style cell, `-` when nothing was measured.
    pub fn cell(&self) -> String {
        match (self.mean, self.std) {
            (Some(m), Some(s)) => format!("{m:.2}±{s:.2}"),
            _ => "-".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub rouge1: MetricSummary,
    pub rouge2: MetricSummary,
    pub rouge_l: MetricSummary,
    pub embed_f1: MetricSummary,
    pub structure: MetricSummary,
    pub entity: MetricSummary,
    pub topic: MetricSummary,
}

impl Summary {
    pub fn columns(&self) -> [&MetricSummary; 7] {
        [
            &self.rouge1,
            &self.rouge2,
            &self.rouge_l,
            &self.embed_f1,
            &self.structure,
            &self.entity,
            &self.topic,
        ]
    }
}

fn summarize(values: impl Iterator<Item = Option<f64>>) -> MetricSummary {
    let all: Vec<Option<f64>> = values.collect();
    let present: Vec<f64> = all.iter().flatten().copied().collect();
    let absent = all.len() - present.len();
    if present.is_empty() {
        return MetricSummary {
            mean: None,
            std: None,
            present: 0,
            absent,
        };
    }
    let n = present.len() as f64;
    let mean = present.iter().sum::<f64>() / n;
    let var = present.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MetricSummary {
        mean: Some(mean),
        std: Some(var.sqrt()),
        present: present.len(),
        absent,
    }
}

/// Per-metric mean and population standard deviation.
pub fn aggregate(records: &[EvalRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::Aggregation("no records to aggregate".into()));
    }
    let col = |i: usize| summarize(records.iter().map(|r| r.columns()[i]));
    Ok(Summary {
        count: records.len(),
        rouge1: col(0),
        rouge2: col(1),
        rouge_l: col(2),
        embed_f1: col(3),
        structure: col(4),
        entity: col(5),
        topic: col(6),
    })
}
