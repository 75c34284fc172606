//! Teacher-forced inverter training and toy LM pretraining.
//!
//! The decoder input for a pair `(h, S)` is `[X_e; X_sys; X_u; embed(S[..T-1])]`
//! where `X_e` is the adapter output and `X_sys`, `X_u` embed the prompt
//! texts. Only positions that predict a token of `S` contribute to the loss.

mod optim;
mod pretrain;

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AdapterParams, BoundAdapter};
use crate::checkpoint::{self, TensorFile};
use crate::dataset::{InversionPair, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{generate_greedy_batch, BoundLm, Decoder, LmParams, LoraParams, TokenId};
use crate::tensor::{Real, Tape, Tensor, Var};
pub use optim::{lr_at, AdamW};
pub use pretrain::{perplexity, pretrain_lm, PretrainConfig, PretrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Only the adapter is optimized; the decoder is frozen.
    AdapterOnly,
    /// A trained adapter is refined together with LoRA updates of the decoder.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub epochs: usize,
    pub batch_size: usize,
    /// Defaults to 1e-3 for adapter-only training and 5e-4 for joint.
    pub lr_adapter: Option<f64>,
    pub lr_lora: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub seed: u64,
    pub prompt_sys: String,
    pub prompt_user: String,
    /// Caps the total number of optimizer steps.
    pub max_steps: Option<usize>,
    pub lora_targets: Vec<String>,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Add position embeddings to the projected prefix rows too.
    pub prefix_positions: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: Scheme::AdapterOnly,
            epochs: 3,
            batch_size: 64,
            lr_adapter: None,
            lr_lora: 2e-4,
            warmup_ratio: 0.15,
            weight_decay: 0.01,
            label_smoothing: 0.075,
            dropout: 0.1,
            seed: 0,
            prompt_sys: "Reconstruct the original text from the prefix.".into(),
            prompt_user: "Text:".into(),
            max_steps: None,
            lora_targets: vec!["attn.wq".into(), "attn.wv".into()],
            lora_rank: 8,
            lora_alpha: 16.0,
            prefix_positions: true,
        }
    }
}

impl TrainConfig {
    pub fn lr_adapter(&self) -> f64 {
        self.lr_adapter.unwrap_or(match self.scheme {
            Scheme::AdapterOnly => 1e-3,
            Scheme::Joint => 5e-4,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {} outside [0,1)",
                self.label_smoothing
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup ratio {} outside [0,1)",
                self.warmup_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size and epochs must be at least 1".into(),
            ));
        }
        if self.lr_adapter() < 0.0 || self.lr_lora < 0.0 {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }

    fn unpositioned_prefix(&self, k: usize) -> usize {
        if self.prefix_positions {
            0
        } else {
            k
        }
    }
}

/// `(1 − ε)·onehot(s_t) + ε/V`.
pub fn smoothed_targets(s_t: TokenId, vocab: usize, eps: f64) -> Vec<f64> {
    let mut q = vec![eps / vocab as f64; vocab];
    q[s_t as usize] += 1.0 - eps;
    q
}

/// Token ids of the two prompt texts.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Prompt {
    pub sys: Vec<TokenId>,
    pub user: Vec<TokenId>,
}

impl Prompt {
    pub fn encode(tok: &Tokenizer, cfg: &TrainConfig) -> Self {
        Prompt {
            sys: tok.encode(&cfg.prompt_sys),
            user: tok.encode(&cfg.prompt_user),
        }
    }

    pub fn len(&self) -> usize {
        self.sys.len() + self.user.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[X_sys; X_u]` rows from the decoder's embedding table.
    pub fn embeddings<T: Real>(&self, decoder: &LmParams<T>) -> Result<Tensor<T>> {
        let ids: Vec<TokenId> = self.sys.iter().chain(&self.user).copied().collect();
        decoder.embed_tokens(&ids)
    }
}

/// Loss over `rows` of the decoder output, where `rows[i]` predicts
/// `targets[i]`.
#[allow(clippy::too_many_arguments)]
fn masked_loss<T: Real>(
    tape: &mut Tape<T>,
    lm: &BoundLm,
    x: Var,
    batch: usize,
    seq: usize,
    unpositioned: usize,
    rows: &[usize],
    targets: &[TokenId],
    eps: f64,
) -> Result<Var> {
    if seq > lm.spec.max_seq {
        return Err(Error::Length {
            len: seq,
            max: lm.spec.max_seq,
        });
    }
    let logits = lm.forward_rows(tape, x, batch, seq, unpositioned, rows)?;
    let t: Vec<Option<usize>> = targets.iter().map(|&s| Some(s as usize)).collect();
    tape.smoothed_cross_entropy(logits, &t, eps)
}

/// Records the smoothed loss of one decoder input assembled from explicit
/// embedding blocks, all `[rows × d']`.
#[allow(clippy::too_many_arguments)]
pub fn sequence_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    lm: &BoundLm,
    x_e: Var,
    x_sys: Var,
    x_u: Var,
    s: &[TokenId],
    eps: f64,
    unpositioned: usize,
) -> Result<Var> {
    if s.is_empty() {
        return Err(Error::Contract("target sequence is empty".into()));
    }
    let prefix = tape.shape(x_e)[0] + tape.shape(x_sys)[0] + tape.shape(x_u)[0];
    let len = prefix + s.len() - 1;
    if len > lm.spec.max_seq {
        return Err(Error::Length {
            len,
            max: lm.spec.max_seq,
        });
    }
    let mut parts = vec![x_e, x_sys, x_u];
    if s.len() > 1 {
        let ids: Vec<usize> = s[..s.len() - 1].iter().map(|&t| t as usize).collect();
        parts.push(tape.embedding_gather(lm.tok_emb, &ids)?);
    }
    let x = tape.concat_rows(&parts)?;
    let rows: Vec<usize> = (0..s.len()).map(|t| prefix - 1 + t).collect();
    masked_loss(tape, lm, x, 1, len, unpositioned, &rows, s, eps)
}

/// Mean smoothed cross-entropy of `s` given the prefix `[X_e; X_sys; X_u]`.
pub fn sequence_loss<T: Real>(
    decoder: &Decoder<'_, T>,
    x_e: &Tensor<T>,
    x_sys: &Tensor<T>,
    x_u: &Tensor<T>,
    s: &[TokenId],
    eps: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let lm = decoder.base.bind(&mut tape, decoder.lora)?;
    let (a, b, c) = (tape.leaf(x_e), tape.leaf(x_sys), tape.leaf(x_u));
    let loss = sequence_loss_on_tape(&mut tape, &lm, a, b, c, s, eps, decoder.unpositioned_prefix)?;
    Ok(tape.value(loss)[0].to_f64().unwrap_or(f64::NAN))
}

/// Records the teacher-forced loss for a batch of equal-length targets.
/// `h` is `[B × d]`; passing an RNG enables adapter dropout.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    adapter: &BoundAdapter,
    acfg: &AdapterConfig,
    lm: &BoundLm,
    h: Var,
    seqs: &[&[TokenId]],
    prompt: &Prompt,
    eps: f64,
    prefix_positions: bool,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let batch = seqs.len();
    let t_len = seqs.first().map_or(0, |s| s.len());
    if t_len == 0 || seqs.iter().any(|s| s.len() != t_len) {
        return Err(Error::Contract(
            "a batch needs non-empty targets of one length".into(),
        ));
    }
    let k = acfg.k;
    let pq = prompt.len();
    let m = pq + t_len - 1;
    let seq = k + m;
    if seq > lm.spec.max_seq {
        return Err(Error::Length {
            len: seq,
            max: lm.spec.max_seq,
        });
    }
    let x_e = adapter.forward(tape, acfg, h, dropout_rng)?;
    let mut ids = Vec::with_capacity(batch * m);
    for s in seqs {
        ids.extend(prompt.sys.iter().chain(&prompt.user).map(|&t| t as usize));
        ids.extend(s[..t_len - 1].iter().map(|&t| t as usize));
    }
    let rest = tape.embedding_gather(lm.tok_emb, &ids)?;
    let all = tape.concat_rows(&[x_e, rest])?;
    // interleave so sample b occupies rows b·seq .. (b+1)·seq
    let perm: Vec<usize> = (0..batch)
        .flat_map(|b| (b * k..(b + 1) * k).chain(batch * k + b * m..batch * k + (b + 1) * m))
        .collect();
    let x = tape.embedding_gather(all, &perm)?;
    let rows: Vec<usize> = (0..batch)
        .flat_map(|b| (0..t_len).map(move |t| b * seq + k + pq - 1 + t))
        .collect();
    let targets: Vec<TokenId> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
    let unpositioned = if prefix_positions { 0 } else { k };
    masked_loss(tape, lm, x, batch, seq, unpositioned, &rows, &targets, eps)
}

fn stack_h<T: Real>(pairs: &[&InversionPair<T>]) -> Result<Tensor<T>> {
    let d = pairs.first().map_or(0, |p| p.h.numel());
    let mut data = Vec::with_capacity(pairs.len() * d);
    for p in pairs {
        if p.h.numel() != d {
            return Err(Error::Shape("representations differ in width".into()));
        }
        data.extend_from_slice(p.h.data());
    }
    Tensor::from_vec([pairs.len(), d], data)
}

/// Groups pair indices by target length, preserving order within a group.
fn length_groups<T>(pairs: &[&InversionPair<T>]) -> Vec<Vec<usize>> {
    let mut lens: Vec<usize> = pairs.iter().map(|p| p.tokens.len()).collect();
    lens.sort_unstable();
    lens.dedup();
    lens.iter()
        .map(|&l| {
            (0..pairs.len())
                .filter(|&i| pairs[i].tokens.len() == l)
                .collect()
        })
        .collect()
}

/// Mean loss over `pairs` without dropout.
pub fn mean_loss<T: Real>(
    adapter: &AdapterParams<T>,
    decoder: &Decoder<'_, T>,
    pairs: &[InversionPair<T>],
    prompt: &Prompt,
    eps: f64,
    prefix_positions: bool,
    batch_size: usize,
) -> Result<f64> {
    let refs: Vec<&InversionPair<T>> = pairs.iter().collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for group in length_groups(&refs) {
        for idx in group.chunks(batch_size.max(1)) {
            let batch: Vec<&InversionPair<T>> = idx.iter().map(|&i| refs[i]).collect();
            let mut tape = Tape::new();
            let a = adapter.bind(&mut tape);
            let lm = decoder.base.bind(&mut tape, decoder.lora)?;
            let h = stack_h(&batch)?;
            let hv = tape.leaf(&h);
            let seqs: Vec<&[TokenId]> = batch.iter().map(|p| p.tokens.as_slice()).collect();
            let loss = batch_loss_on_tape(
                &mut tape,
                &a,
                &adapter.config,
                &lm,
                hv,
                &seqs,
                prompt,
                eps,
                prefix_positions,
                None,
            )?;
            let n_tok = batch.len() * batch[0].tokens.len();
            total += tape.value(loss)[0].to_f64().unwrap_or(f64::NAN) * n_tok as f64;
            count += n_tok;
        }
    }
    if count == 0 {
        return Err(Error::Contract("no pairs to score".into()));
    }
    Ok(total / count as f64)
}

/// Greedy inversion of each representation, `max_new` tokens at most.
pub fn invert<T: Real>(
    adapter: &AdapterParams<T>,
    decoder: &Decoder<'_, T>,
    prompt: &Prompt,
    hs: &[&Tensor<T>],
    max_new: usize,
) -> Result<Vec<Vec<TokenId>>> {
    const CHUNK: usize = 64;
    let tail = prompt.embeddings(decoder.base)?;
    let (k, d) = (adapter.config.k, adapter.config.d_out);
    let mut out = Vec::with_capacity(hs.len());
    for chunk in hs.chunks(CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * adapter.config.d);
        for h in chunk {
            data.extend_from_slice(h.data());
        }
        let x_e = adapter.project(&Tensor::from_vec([chunk.len(), adapter.config.d], data)?)?;
        let prefixes: Vec<Tensor<T>> = (0..chunk.len())
            .map(|b| {
                let mut rows = x_e.data()[b * k * d..(b + 1) * k * d].to_vec();
                rows.extend_from_slice(tail.data());
                Tensor::from_vec([k + prompt.len(), d], rows)
            })
            .collect::<Result<_>>()?;
        out.extend(generate_greedy_batch(decoder, &prefixes, max_new)?);
    }
    Ok(out)
}

/// Decoder view matching how a config trains: prefix rows optionally
/// without positions.
pub fn decoder_for<'a, T: Real>(
    cfg: &TrainConfig,
    base: &'a LmParams<T>,
    lora: Option<&'a LoraParams<T>>,
    k: usize,
) -> Decoder<'a, T> {
    Decoder {
        base,
        lora,
        unpositioned_prefix: cfg.unpositioned_prefix(k),
    }
}

/// Optimizer state plus trainable parameters; enough to resume a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub adapter: AdapterParams<T>,
    pub lora: Option<LoraParams<T>>,
    pub opt: AdamW<T>,
    pub step: usize,
    pub step_losses: Vec<f64>,
}

impl<T: Real> TrainState<T> {
    fn new(adapter: AdapterParams<T>, lora: Option<LoraParams<T>>, weight_decay: f64) -> Self {
        let mut sizes: Vec<usize> = adapter.named().iter().map(|(_, t)| t.numel()).collect();
        if let Some(l) = &lora {
            sizes.extend(l.named().iter().map(|(_, t)| t.numel()));
        }
        TrainState {
            opt: AdamW::new(&sizes, weight_decay),
            adapter,
            lora,
            step: 0,
            step_losses: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = checkpoint::adapter_meta(&self.adapter.config);
        meta["kind"] = "train_state".into();
        meta["step"] = self.step.into();
        meta["opt_t"] = self.opt.t.into();
        meta["step_losses"] = serde_json::to_value(&self.step_losses)?;
        if let Some(l) = &self.lora {
            let lm = checkpoint::lora_meta(l);
            for key in ["rank", "alpha", "targets"] {
                meta[key] = lm[key].clone();
            }
        }
        let mut owned: Vec<(String, Tensor<T>)> = Vec::new();
        for (i, (m, v)) in self.opt.m.iter().zip(&self.opt.v).enumerate() {
            owned.push((
                format!("opt.m.{i}"),
                Tensor::from_vec([m.len()], m.clone())?,
            ));
            owned.push((
                format!("opt.v.{i}"),
                Tensor::from_vec([v.len()], v.clone())?,
            ));
        }
        let mut tensors: Vec<(String, &Tensor<T>)> = self
            .adapter
            .named()
            .into_iter()
            .map(|(n, t)| (format!("adapter.{n}"), t))
            .collect();
        if let Some(l) = &self.lora {
            tensors.extend(l.named().into_iter().map(|(n, t)| (format!("lora.{n}"), t)));
        }
        tensors.extend(owned.iter().map(|(n, t)| (n.clone(), t)));
        checkpoint::save(path, &meta, &tensors)
    }

    pub fn load(path: &Path, decoder: &LmParams<T>, weight_decay: f64) -> Result<Self> {
        let mut file: TensorFile<T> = checkpoint::load(path)?;
        if file.meta.get("kind").and_then(|k| k.as_str()) != Some("train_state") {
            return Err(Error::Checkpoint(format!(
                "{} is not a training state",
                path.display()
            )));
        }
        let adapter = checkpoint::adapter_from_file(&mut file, "adapter.")?;
        let lora = if file.meta.get("rank").is_some() {
            Some(checkpoint::lora_from_file(&mut file, "lora.", decoder)?)
        } else {
            None
        };
        let mut state = TrainState::new(adapter, lora, weight_decay);
        let field = |k: &str| {
            file.meta
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::Checkpoint(format!("training state lacks `{k}`")))
        };
        state.step = field("step")?;
        state.opt.t = field("opt_t")?;
        state.step_losses = serde_json::from_value(file.meta["step_losses"].clone())?;
        for i in 0..state.opt.m.len() {
            for (key, slot) in [("m", &mut state.opt.m[i]), ("v", &mut state.opt.v[i])] {
                let t = file.get(&format!("opt.{key}.{i}")).ok_or_else(|| {
                    Error::Checkpoint(format!("missing optimizer moment {key}.{i}"))
                })?;
                if t.numel() != slot.len() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer moment {key}.{i} has the wrong size"
                    )));
                }
                slot.copy_from_slice(t.data());
            }
        }
        Ok(state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub step_losses: Vec<f64>,
    /// Mean step loss per completed epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss over the whole training set before the first update.
    pub initial_loss: Option<f64>,
    /// Loss over the whole training set after the last update, no dropout.
    pub final_loss: Option<f64>,
}

/// Side effects of a run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// JSON Lines `{step, lr, loss}` per step.
    pub log_path: Option<PathBuf>,
    /// Training state written after every epoch and on early stop.
    pub checkpoint_path: Option<PathBuf>,
    /// Stop after this many total steps, as if interrupted.
    pub stop_after: Option<usize>,
    /// Evaluate the full training loss before and after.
    pub measure_loss: bool,
}

fn mix(seed: u64, salt: u64, i: u64) -> u64 {
    let mut z = seed
        ^ salt.wrapping_mul(0xD6E8_FEB8_6659_FD93)
        ^ i.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, 1, epoch as u64)));
    idx
}

struct Plan {
    batch: usize,
    steps_per_epoch: usize,
    total: usize,
}

fn plan(cfg: &TrainConfig, n: usize) -> Plan {
    let batch = cfg.batch_size.min(n).max(1);
    let steps_per_epoch = n.div_ceil(batch);
    let mut total = cfg.epochs * steps_per_epoch;
    if let Some(m) = cfg.max_steps {
        total = total.min(m);
    }
    Plan {
        batch,
        steps_per_epoch,
        total,
    }
}

fn check_pairs<T: Real>(pairs: &[InversionPair<T>], cfg: &AdapterConfig) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Contract("no training pairs".into()));
    }
    let n = pairs[0].tokens.len();
    for p in pairs {
        if p.h.numel() != cfg.d {
            return Err(Error::Shape(format!(
                "representation width {} != adapter d {}",
                p.h.numel(),
                cfg.d
            )));
        }
        if p.tokens.len() != n || n == 0 {
            return Err(Error::Contract(
                "training pairs must share one non-zero length".into(),
            ));
        }
    }
    Ok(())
}

fn run<T: Real>(
    cfg: &TrainConfig,
    mut state: TrainState<T>,
    decoder: &LmParams<T>,
    pairs: &[InversionPair<T>],
    prompt: &Prompt,
    opts: &RunOptions,
) -> Result<(TrainState<T>, TrainReport)> {
    cfg.validate()?;
    check_pairs(pairs, &state.adapter.config)?;
    if decoder.named().iter().any(|(_, t)| t.requires_grad) {
        return Err(Error::Contract("decoder weights must be frozen".into()));
    }
    let plan = plan(cfg, pairs.len());
    let acfg = AdapterConfig {
        dropout: cfg.dropout,
        ..state.adapter.config.clone()
    };
    let eps = cfg.label_smoothing;
    let measure = |s: &TrainState<T>| -> Result<f64> {
        let dec = decoder_for(cfg, decoder, s.lora.as_ref(), acfg.k);
        mean_loss(
            &s.adapter,
            &dec,
            pairs,
            prompt,
            eps,
            cfg.prefix_positions,
            plan.batch,
        )
    };
    let initial_loss = if opts.measure_loss && state.step == 0 {
        Some(measure(&state)?)
    } else {
        None
    };
    let mut log = match &opts.log_path {
        Some(p) => {
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(state.step > 0)
                .write(true)
                .truncate(state.step == 0)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            Some((BufWriter::new(f), p.clone()))
        }
        None => None,
    };
    let n_adapter = state.adapter.named().len();
    let mut order_epoch = usize::MAX;
    let mut order = Vec::new();
    while state.step < plan.total {
        let step = state.step;
        let epoch = step / plan.steps_per_epoch;
        if epoch != order_epoch {
            order = epoch_order(cfg.seed, epoch, pairs.len());
            order_epoch = epoch;
        }
        let pos = step % plan.steps_per_epoch;
        let idx = &order[pos * plan.batch..((pos + 1) * plan.batch).min(pairs.len())];
        let batch: Vec<&InversionPair<T>> = idx.iter().map(|&i| &pairs[i]).collect();

        let mut tape = Tape::new();
        let a = state.adapter.bind(&mut tape);
        let lm = decoder.bind(&mut tape, state.lora.as_ref())?;
        let h = tape.leaf(&stack_h(&batch)?);
        let seqs: Vec<&[TokenId]> = batch.iter().map(|p| p.tokens.as_slice()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 2, step as u64));
        let loss = batch_loss_on_tape(
            &mut tape,
            &a,
            &acfg,
            &lm,
            h,
            &seqs,
            prompt,
            eps,
            cfg.prefix_positions,
            Some(&mut rng),
        )?;
        let loss_value = tape.value(loss)[0].to_f64().unwrap_or(f64::NAN);
        if !loss_value.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: loss_value,
            });
        }
        let grads = tape.backward(loss)?;

        let lr_a = lr_at(step, plan.total, cfg.lr_adapter(), cfg.warmup_ratio);
        let lr_l = lr_at(step, plan.total, cfg.lr_lora, cfg.warmup_ratio);
        let mut vars: Vec<Var> = a.params.clone();
        vars.extend(lm.lora.iter().flat_map(|&(x, y)| [x, y]));
        let g: Vec<Option<&[T]>> = vars.iter().map(|&v| grads.get(v)).collect();
        let mut params: Vec<&mut Tensor<T>> = state
            .adapter
            .named_mut()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        if let Some(l) = state.lora.as_mut() {
            params.extend(l.named_mut().into_iter().map(|(_, t)| t));
        }
        let lrs: Vec<f64> = (0..params.len())
            .map(|i| if i < n_adapter { lr_a } else { lr_l })
            .collect();
        state.opt.step(&mut params, &g, &lrs)?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                step,
                loss: f64::NAN,
            });
        }
        drop(params);

        state.step_losses.push(loss_value);
        state.step += 1;
        if let Some((w, p)) = log.as_mut() {
            let line = serde_json::json!({ "step": step, "lr": lr_a, "loss": loss_value });
            writeln!(w, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
        }
        let epoch_done =
            state.step.is_multiple_of(plan.steps_per_epoch) || state.step == plan.total;
        let stopping = opts.stop_after == Some(state.step);
        if epoch_done || stopping {
            if let Some((w, p)) = log.as_mut() {
                w.flush().map_err(|e| Error::io(p.as_path(), e))?;
            }
            if let Some(p) = &opts.checkpoint_path {
                state.save(p)?;
            }
        }
        if stopping {
            break;
        }
    }
    let epoch_losses = state
        .step_losses
        .chunks(plan.steps_per_epoch)
        .filter(|c| c.len() == plan.steps_per_epoch)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let final_loss = if opts.measure_loss && state.step == plan.total {
        Some(measure(&state)?)
    } else {
        None
    };
    let report = TrainReport {
        steps: state.step,
        step_losses: state.step_losses.clone(),
        epoch_losses,
        initial_loss,
        final_loss,
    };
    Ok((state, report))
}

/// Optimizes the adapter only; `decoder` stays bit-identical.
pub fn train_adapter_only<T: Real>(
    cfg: &TrainConfig,
    adapter: AdapterParams<T>,
    decoder: &LmParams<T>,
    pairs: &[InversionPair<T>],
    prompt: &Prompt,
    opts: &RunOptions,
) -> Result<(AdapterParams<T>, TrainReport)> {
    let state = TrainState::new(adapter, None, cfg.weight_decay);
    let (state, report) = run(cfg, state, decoder, pairs, prompt, opts)?;
    Ok((state.adapter, report))
}

/// Refines a trained adapter together with fresh LoRA updates on
/// `cfg.lora_targets`; base decoder weights stay frozen.
pub fn train_joint<T: Real>(
    cfg: &TrainConfig,
    adapter: AdapterParams<T>,
    decoder: &LmParams<T>,
    pairs: &[InversionPair<T>],
    prompt: &Prompt,
    opts: &RunOptions,
) -> Result<(AdapterParams<T>, LoraParams<T>, TrainReport)> {
    let lora = LoraParams::init(
        decoder,
        &cfg.lora_targets,
        cfg.lora_rank,
        cfg.lora_alpha,
        mix(cfg.seed, 3, 0),
    )?;
    let state = TrainState::new(adapter, Some(lora), cfg.weight_decay);
    let (state, report) = run(cfg, state, decoder, pairs, prompt, opts)?;
    Ok((
        state.adapter,
        state.lora.expect("joint state has LoRA"),
        report,
    ))
}

/// Continues a run from a state written by an earlier run with the same
/// config and data.
pub fn resume<T: Real>(
    cfg: &TrainConfig,
    state_path: &Path,
    decoder: &LmParams<T>,
    pairs: &[InversionPair<T>],
    prompt: &Prompt,
    opts: &RunOptions,
) -> Result<(TrainState<T>, TrainReport)> {
    let state = TrainState::load(state_path, decoder, cfg.weight_decay)?;
    run(cfg, state, decoder, pairs, prompt, opts)
}

/// Reads a JSON Lines training log.
pub fn read_log(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests;
