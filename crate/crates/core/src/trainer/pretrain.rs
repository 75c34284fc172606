//! Next-token pretraining of the toy LM on a token stream.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lr_at, mix, AdamW};
use crate::error::{Error, Result};
use crate::model::{LmParams, LmSpec, TokenId};
use crate::tensor::{Real, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Input window length; defaults to the model's `max_seq`.
    pub window: Option<usize>,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub max_steps: Option<usize>,
    /// Windows held back for perplexity.
    pub eval_windows: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 2,
            batch_size: 16,
            window: None,
            lr: 3e-3,
            warmup_ratio: 0.05,
            weight_decay: 0.01,
            seed: 0,
            max_steps: None,
            eval_windows: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub initial_perplexity: f64,
    pub final_perplexity: f64,
    pub step_losses: Vec<f64>,
}

/// Non-overlapping `window + 1` slices; inputs are the first `window`
/// tokens, targets the last `window`.
fn windows(stream: &[TokenId], window: usize) -> Vec<&[TokenId]> {
    if window == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + window < stream.len() {
        out.push(&stream[start..start + window + 1]);
        start += window;
    }
    out
}

/// Returns the loss and the parameter leaves in named order.
fn window_loss<T: Real>(
    tape: &mut Tape<T>,
    lm: &LmParams<T>,
    batch: &[&[TokenId]],
) -> Result<(Var, Vec<Var>)> {
    let bound = lm.bind(tape, None)?;
    let w = batch[0].len() - 1;
    let ids: Vec<usize> = batch
        .iter()
        .flat_map(|s| s[..w].iter().map(|&t| t as usize))
        .collect();
    let x = tape.embedding_gather(bound.tok_emb, &ids)?;
    let (logits, _) = bound.forward(tape, x, batch.len(), w, 0)?;
    let targets: Vec<Option<usize>> = batch
        .iter()
        .flat_map(|s| s[1..].iter().map(|&t| Some(t as usize)))
        .collect();
    Ok((
        tape.smoothed_cross_entropy(logits, &targets, 0.0)?,
        bound.params,
    ))
}

/// `exp` of the mean next-token cross-entropy over `windows`.
pub fn perplexity<T: Real>(lm: &LmParams<T>, windows: &[&[TokenId]]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Contract("no windows to score".into()));
    }
    let mut total = 0.0;
    for chunk in windows.chunks(16) {
        let mut tape = Tape::new();
        let (loss, _) = window_loss(&mut tape, lm, chunk)?;
        total += tape.value(loss)[0].to_f64().unwrap_or(f64::NAN) * chunk.len() as f64;
    }
    Ok((total / windows.len() as f64).exp())
}

/// Trains a fresh LM on `stream`; the returned parameters are frozen.
pub fn pretrain_lm<T: Real>(
    cfg: &PretrainConfig,
    spec: &LmSpec,
    stream: &[TokenId],
    log_path: Option<&Path>,
) -> Result<(LmParams<T>, PretrainReport)> {
    let mut lm = LmParams::<T>::init(spec, cfg.seed)?;
    let window = cfg.window.unwrap_or(spec.max_seq);
    if window == 0 || window > spec.max_seq {
        return Err(Error::Config(format!(
            "window {window} outside 1..={}",
            spec.max_seq
        )));
    }
    if let Some(&bad) = stream.iter().find(|&&t| t as usize >= spec.vocab_size) {
        return Err(Error::Index(format!(
            "token {bad} outside vocabulary of {}",
            spec.vocab_size
        )));
    }
    let all = windows(stream, window);
    if all.is_empty() {
        return Err(Error::Ingest(format!(
            "corpus shorter than one {window}-token window"
        )));
    }
    let n_eval = cfg.eval_windows.min(all.len() / 10).max(1).min(all.len());
    let (eval, train) = all.split_at(n_eval);
    let train = if train.is_empty() { eval } else { train };
    let initial_perplexity = perplexity(&lm, eval)?;

    let batch = cfg.batch_size.max(1).min(train.len());
    let per_epoch = train.len().div_ceil(batch);
    let mut total = cfg.epochs * per_epoch;
    if let Some(m) = cfg.max_steps {
        total = total.min(m);
    }
    let sizes: Vec<usize> = lm.named().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = AdamW::<T>::new(&sizes, cfg.weight_decay);
    let mut log = match log_path {
        Some(p) => Some(BufWriter::new(
            std::fs::File::create(p).map_err(|e| Error::io(p, e))?,
        )),
        None => None,
    };
    lm.set_requires_grad(true);
    let mut step_losses = Vec::with_capacity(total);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..total {
        let pos = step % per_epoch;
        if pos == 0 {
            order = (0..train.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(
                cfg.seed,
                4,
                (step / per_epoch) as u64,
            )));
        }
        let b: Vec<&[TokenId]> = order[pos * batch..((pos + 1) * batch).min(train.len())]
            .iter()
            .map(|&i| train[i])
            .collect();
        let mut tape = Tape::new();
        let (loss, leaves) = window_loss(&mut tape, &lm, &b)?;
        let value = tape.value(loss)[0].to_f64().unwrap_or(f64::NAN);
        if !value.is_finite() {
            lm.set_requires_grad(false);
            return Err(Error::Divergence { step, loss: value });
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Option<&[T]>> = leaves.iter().map(|&v| grads.get(v)).collect();
        let lr = lr_at(step, total, cfg.lr, cfg.warmup_ratio);
        let mut params: Vec<_> = lm.named_mut().into_iter().map(|(_, t)| t).collect();
        opt.step(&mut params, &g, &vec![lr; sizes.len()])?;
        step_losses.push(value);
        if let Some(w) = log.as_mut() {
            writeln!(
                w,
                "{}",
                serde_json::json!({ "step": step, "lr": lr, "loss": value })
            )
            .map_err(|e| Error::io(log_path.unwrap_or(Path::new("")), e))?;
        }
        if step % 50 == 0 {
            log::info!("pretrain step {step}/{total} loss {value:.4}");
        }
    }
    lm.set_requires_grad(false);
    let final_perplexity = perplexity(&lm, eval)?;
    Ok((
        lm,
        PretrainReport {
            steps: total,
            initial_perplexity,
            final_perplexity,
            step_losses,
        },
    ))
}
