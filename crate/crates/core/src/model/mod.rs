//! Micro decoder-only transformer.
//!
//! One type serves as both the representation source and the text
//! generator. Blocks are pre-norm; the output projection is tied to the
//! token embedding table; positions are learned absolute embeddings.

mod generate;
mod lora;

pub use generate::generate_greedy_batch;
pub use lora::{resolve_targets, LoraPair, LoraParams, LoraTarget};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub type TokenId = u32;

/// Reserved end-of-sequence / padding id.
pub const EOS: TokenId = 0;

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PositionKind {
    #[default]
    LearnedAbsolute,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    #[serde(default)]
    pub position_kind: PositionKind,
}

impl LmSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("LmSpec: {m}")));
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_seq == 0 {
            return bad("all dimensions must be at least 1");
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w_fc: Tensor<T>,
    pub b_fc: Tensor<T>,
    pub w_proj: Tensor<T>,
    pub b_proj: Tensor<T>,
}

/// Names of the per-block matrices, in checkpoint order.
pub const BLOCK_TENSORS: [&str; 16] = [
    "ln1.g",
    "ln1.b",
    "attn.wq",
    "attn.bq",
    "attn.wk",
    "attn.bk",
    "attn.wv",
    "attn.bv",
    "attn.wo",
    "attn.bo",
    "ln2.g",
    "ln2.b",
    "mlp.w_fc",
    "mlp.b_fc",
    "mlp.w_proj",
    "mlp.b_proj",
];

impl<T: Real> Block<T> {
    fn tensors(&self) -> [&Tensor<T>; 16] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w_fc,
            &self.b_fc,
            &self.w_proj,
            &self.b_proj,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w_fc,
            &mut self.b_fc,
            &mut self.w_proj,
            &mut self.b_proj,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmParams<T> {
    pub spec: LmSpec,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_f_g: Tensor<T>,
    pub ln_f_b: Tensor<T>,
}

/// Output of a full-sequence forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `[len × V]`
    pub logits: Tensor<T>,
    /// `residual_streams[l - 1]` is the `[len × d]` stream after block `l`.
    pub residual_streams: Vec<Tensor<T>>,
}

impl<T: Real> LmParams<T> {
    /// GPT-2 style init: N(0, 0.02), residual projections scaled by
    /// `1/sqrt(2L)`, unit norms.
    pub fn init(spec: &LmSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, v) = (spec.d_model, spec.d_ff, spec.vocab_size);
        let std = 0.02;
        let resid_std = std / (2.0 * spec.n_layers as f64).sqrt();
        let tok_emb = Tensor::normal([v, d], std, &mut rng);
        let pos_emb = Tensor::normal([spec.max_seq, d], std, &mut rng);
        let blocks = (0..spec.n_layers)
            .map(|_| Block {
                ln1_g: Tensor::filled([d], T::one()),
                ln1_b: Tensor::zeros([d]),
                wq: Tensor::normal([d, d], std, &mut rng),
                bq: Tensor::zeros([d]),
                wk: Tensor::normal([d, d], std, &mut rng),
                bk: Tensor::zeros([d]),
                wv: Tensor::normal([d, d], std, &mut rng),
                bv: Tensor::zeros([d]),
                wo: Tensor::normal([d, d], resid_std, &mut rng),
                bo: Tensor::zeros([d]),
                ln2_g: Tensor::filled([d], T::one()),
                ln2_b: Tensor::zeros([d]),
                w_fc: Tensor::normal([d, f], std, &mut rng),
                b_fc: Tensor::zeros([f]),
                w_proj: Tensor::normal([f, d], resid_std, &mut rng),
                b_proj: Tensor::zeros([d]),
            })
            .collect();
        Ok(LmParams {
            spec: spec.clone(),
            tok_emb,
            pos_emb,
            blocks,
            ln_f_g: Tensor::filled([d], T::one()),
            ln_f_b: Tensor::zeros([d]),
        })
    }

    /// All parameters with stable names, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_TENSORS.iter().zip(b.tensors()) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("ln_f.g".to_string(), &self.ln_f_g));
        out.push(("ln_f.b".to_string(), &self.ln_f_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in BLOCK_TENSORS.iter().zip(b.tensors_mut()) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("ln_f.g".to_string(), &mut self.ln_f_g));
        out.push(("ln_f.b".to_string(), &mut self.ln_f_b));
        out
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.named()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for (_, t) in self.named_mut() {
            t.requires_grad = on;
        }
    }

    /// FNV-1a over the little-endian parameter bytes; used to assert that
    /// frozen weights are untouched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut buf = Vec::new();
        for (_, t) in self.named() {
            buf.clear();
            t.data().iter().for_each(|v| v.write_le(&mut buf));
            for b in &buf {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every parameter on `tape`, optionally with LoRA deltas
    /// folded into the targeted matrices.
    pub fn bind(&self, tape: &mut Tape<T>, lora: Option<&LoraParams<T>>) -> Result<BoundLm> {
        if let Some(l) = lora {
            l.validate_against(self)?;
        }
        let mut params = Vec::new();
        let mut lora_vars = Vec::new();
        let tok_emb = tape.leaf(&self.tok_emb);
        let pos_emb = tape.leaf(&self.pos_emb);
        params.extend([tok_emb, pos_emb]);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let mut vars = Vec::with_capacity(BLOCK_TENSORS.len());
            for (name, t) in BLOCK_TENSORS.iter().zip(b.tensors()) {
                let base = tape.leaf(t);
                params.push(base);
                vars.push(
                    match lora.and_then(|l| l.pair_for(i, name).map(|p| (l, p))) {
                        Some((l, pair)) => {
                            let (eff, a, b) = pair.fold_into(tape, base, l.scaling())?;
                            lora_vars.push((pair.target.clone(), a, b));
                            eff
                        }
                        None => base,
                    },
                );
            }
            blocks.push(BoundBlock(vars));
        }
        let ln_f_g = tape.leaf(&self.ln_f_g);
        let ln_f_b = tape.leaf(&self.ln_f_b);
        params.extend([ln_f_g, ln_f_b]);
        // align LoRA handles with `lora.pairs`
        let lora_vars = match lora {
            Some(l) => l
                .pairs
                .iter()
                .map(|p| {
                    let (_, a, b) = lora_vars
                        .iter()
                        .find(|(t, _, _)| *t == p.target)
                        .expect("every pair was bound");
                    (*a, *b)
                })
                .collect(),
            None => Vec::new(),
        };
        Ok(BoundLm {
            spec: self.spec.clone(),
            tok_emb,
            pos_emb,
            blocks,
            ln_f_g,
            ln_f_b,
            params,
            lora: lora_vars,
        })
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.spec.max_seq {
            return Err(Error::Length {
                len,
                max: self.spec.max_seq,
            });
        }
        Ok(())
    }

    pub fn embed_tokens(&self, tokens: &[TokenId]) -> Result<Tensor<T>> {
        let d = self.spec.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            let t = t as usize;
            if t >= self.spec.vocab_size {
                return Err(Error::Index(format!(
                    "token {t} outside vocabulary {}",
                    self.spec.vocab_size
                )));
            }
            data.extend_from_slice(self.tok_emb.row(t));
        }
        Tensor::from_vec([tokens.len(), d], data)
    }

    /// Full causal forward over token ids, capturing every block's stream.
    pub fn forward_tokens(&self, tokens: &[TokenId]) -> Result<ForwardOutput<T>> {
        if tokens.is_empty() {
            return Err(Error::Contract("forward over an empty sequence".into()));
        }
        self.check_len(tokens.len())?;
        let mut tape = Tape::new();
        let lm = self.bind(&mut tape, None)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let x = tape.embedding_gather(lm.tok_emb, &ids)?;
        let (logits, streams) = lm.forward(&mut tape, x, 1, tokens.len(), 0)?;
        Ok(ForwardOutput {
            logits: tape.to_tensor(logits),
            residual_streams: streams.into_iter().map(|s| tape.to_tensor(s)).collect(),
        })
    }

    /// Last-position residual stream after block `layer` (1-indexed).
    pub fn capture_representation(&self, tokens: &[TokenId], layer: usize) -> Result<Tensor<T>> {
        if layer == 0 || layer > self.spec.n_layers {
            return Err(Error::Layer {
                layer,
                n_layers: self.spec.n_layers,
            });
        }
        let out = self.forward_tokens(tokens)?;
        let stream = &out.residual_streams[layer - 1];
        let last = stream.shape()[0] - 1;
        Tensor::from_vec([self.spec.d_model], stream.row(last).to_vec())
    }

    /// [`capture_representation`](Self::capture_representation) for many
    /// sequences of one length, in a single batched forward.
    pub fn capture_batch(&self, seqs: &[&[TokenId]], layer: usize) -> Result<Vec<Tensor<T>>> {
        if layer == 0 || layer > self.spec.n_layers {
            return Err(Error::Layer {
                layer,
                n_layers: self.spec.n_layers,
            });
        }
        let Some(first) = seqs.first() else {
            return Ok(Vec::new());
        };
        let len = first.len();
        if len == 0 || seqs.iter().any(|s| s.len() != len) {
            return Err(Error::Contract(
                "capture_batch needs non-empty sequences of one length".into(),
            ));
        }
        self.check_len(len)?;
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            for &t in s.iter() {
                if t as usize >= self.spec.vocab_size {
                    return Err(Error::Index(format!(
                        "token {t} outside vocabulary {}",
                        self.spec.vocab_size
                    )));
                }
                ids.push(t as usize);
            }
        }
        let mut tape = Tape::new();
        let lm = self.bind(&mut tape, None)?;
        let x = tape.embedding_gather(lm.tok_emb, &ids)?;
        let (_, streams) = lm.forward_to(&mut tape, x, seqs.len(), len, 0, layer)?;
        let stream = tape.value(streams[layer - 1]);
        let d = self.spec.d_model;
        (0..seqs.len())
            .map(|b| {
                let row = (b * len + len - 1) * d;
                Tensor::from_vec([d], stream[row..row + d].to_vec())
            })
            .collect()
    }

    /// Forward from input embeddings, skipping the token lookup. Position
    /// embeddings are still added.
    pub fn forward_embeddings(&self, embeds: &Tensor<T>) -> Result<Tensor<T>> {
        Decoder::new(self).forward_embeddings(embeds)
    }

    pub fn generate_greedy(&self, prefix: &Tensor<T>, max_new: usize) -> Result<Vec<TokenId>> {
        Decoder::new(self).generate_greedy(prefix, max_new)
    }
}

/// A decoding model, optionally with LoRA updates applied.
#[derive(Debug, Clone, Copy)]
pub struct Decoder<'a, T> {
    pub base: &'a LmParams<T>,
    pub lora: Option<&'a LoraParams<T>>,
    /// Rows at the start of every input that skip position embeddings.
    pub unpositioned_prefix: usize,
}

impl<'a, T: Real> Decoder<'a, T> {
    pub fn new(base: &'a LmParams<T>) -> Self {
        Decoder {
            base,
            lora: None,
            unpositioned_prefix: 0,
        }
    }

    pub fn spec(&self) -> &LmSpec {
        &self.base.spec
    }

    pub fn forward_embeddings(&self, embeds: &Tensor<T>) -> Result<Tensor<T>> {
        let spec = &self.base.spec;
        let [len, width] = embeds.shape() else {
            return Err(Error::Shape(format!(
                "embeddings must be a matrix, got {:?}",
                embeds.shape()
            )));
        };
        if *width != spec.d_model {
            return Err(Error::Shape(format!(
                "embedding width {width} != d_model {}",
                spec.d_model
            )));
        }
        self.base.check_len(*len)?;
        let mut tape = Tape::new();
        let lm = self.base.bind(&mut tape, self.lora)?;
        let x = tape.leaf(embeds);
        let (logits, _) = lm.forward(&mut tape, x, 1, *len, self.unpositioned_prefix)?;
        Ok(tape.to_tensor(logits))
    }

    pub fn generate_greedy(&self, prefix: &Tensor<T>, max_new: usize) -> Result<Vec<TokenId>> {
        let mut out = generate_greedy_batch(self, std::slice::from_ref(prefix), max_new)?;
        Ok(out.pop().unwrap_or_default())
    }
}

/// Validates targets and returns the adapted decoder.
pub fn apply_lora<'a, T: Real>(
    base: &'a LmParams<T>,
    lora: &'a LoraParams<T>,
) -> Result<Decoder<'a, T>> {
    lora.validate_against(base)?;
    Ok(Decoder {
        base,
        lora: Some(lora),
        unpositioned_prefix: 0,
    })
}

#[derive(Debug, Clone)]
pub struct BoundBlock(Vec<Var>);

impl BoundBlock {
    fn get(&self, name: &str) -> Var {
        let i = BLOCK_TENSORS
            .iter()
            .position(|n| *n == name)
            .expect("known block tensor");
        self.0[i]
    }
}

/// Model parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundLm {
    pub spec: LmSpec,
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BoundBlock>,
    pub ln_f_g: Var,
    pub ln_f_b: Var,
    /// Base leaves in [`LmParams::named`] order.
    pub params: Vec<Var>,
    /// `(A, B)` leaves aligned with [`LoraParams::pairs`].
    pub lora: Vec<(Var, Var)>,
}

impl BoundLm {
    /// Causal forward over `batch` sequences of `seq` rows each, stacked in
    /// `x: [batch·seq × d]`. Returns the logits and each block's stream.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        batch: usize,
        seq: usize,
        unpositioned_prefix: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let (logits, streams) =
            self.forward_to(tape, x, batch, seq, unpositioned_prefix, self.blocks.len())?;
        Ok((logits.expect("all blocks ran"), streams))
    }

    /// Runs the first `depth` blocks; logits are only produced when every
    /// block ran.
    pub fn forward_to<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        batch: usize,
        seq: usize,
        unpositioned_prefix: usize,
        depth: usize,
    ) -> Result<(Option<Var>, Vec<Var>)> {
        let d = self.spec.d_model;
        if tape.shape(x) != [batch * seq, d] {
            return Err(Error::Shape(format!(
                "decoder input {:?} != [{}x{d}]",
                tape.shape(x),
                batch * seq
            )));
        }
        if seq > self.spec.max_seq {
            return Err(Error::Length {
                len: seq,
                max: self.spec.max_seq,
            });
        }
        let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let mut pos = tape.embedding_gather(self.pos_emb, &pos_ids)?;
        if unpositioned_prefix > 0 {
            let mask: Vec<T> = (0..batch)
                .flat_map(|_| 0..seq)
                .flat_map(|p| {
                    let m = if p < unpositioned_prefix {
                        T::zero()
                    } else {
                        T::one()
                    };
                    std::iter::repeat_n(m, d)
                })
                .collect();
            let mask = tape.constant([batch * seq, d], mask)?;
            pos = tape.mul(pos, mask)?;
        }
        let mut h = tape.add(x, pos)?;
        let mut streams = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks[..depth.min(self.blocks.len())] {
            let n1 = tape.layer_norm(h, b.get("ln1.g"), b.get("ln1.b"), LN_EPS)?;
            let q = linear(tape, n1, b.get("attn.wq"), b.get("attn.bq"))?;
            let k = linear(tape, n1, b.get("attn.wk"), b.get("attn.bk"))?;
            let v = linear(tape, n1, b.get("attn.wv"), b.get("attn.bv"))?;
            let a = tape.causal_attention(q, k, v, batch, seq, self.spec.n_heads)?;
            let o = linear(tape, a, b.get("attn.wo"), b.get("attn.bo"))?;
            h = tape.add(h, o)?;
            let n2 = tape.layer_norm(h, b.get("ln2.g"), b.get("ln2.b"), LN_EPS)?;
            let f = linear(tape, n2, b.get("mlp.w_fc"), b.get("mlp.b_fc"))?;
            let f = tape.gelu(f);
            let f = linear(tape, f, b.get("mlp.w_proj"), b.get("mlp.b_proj"))?;
            h = tape.add(h, f)?;
            streams.push(h);
        }
        if streams.len() < self.blocks.len() {
            return Ok((None, streams));
        }
        Ok((Some(self.head(tape, h)?), streams))
    }

    fn head<T: Real>(&self, tape: &mut Tape<T>, h: Var) -> Result<Var> {
        let nf = tape.layer_norm(h, self.ln_f_g, self.ln_f_b, LN_EPS)?;
        tape.matmul_nt(nf, self.tok_emb)
    }

    /// Logits for the listed rows of the stacked input only, `[rows × V]`.
    pub fn forward_rows<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        batch: usize,
        seq: usize,
        unpositioned_prefix: usize,
        rows: &[usize],
    ) -> Result<Var> {
        let (_, streams) =
            self.forward_to(tape, x, batch, seq, unpositioned_prefix, self.blocks.len())?;
        let last = *streams.last().expect("at least one block");
        let picked = tape.embedding_gather(last, rows)?;
        self.head(tape, picked)
    }
}

pub(crate) fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

#[cfg(test)]
mod tests;
