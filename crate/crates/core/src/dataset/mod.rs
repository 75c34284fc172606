//! Corpus ingestion, chunking, and (representation, tokens) pairs.

pub mod ood;
pub mod synthetic;
pub mod tokenizer;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::model::{LmParams, TokenId};
use crate::tensor::{Precision, Real, Tensor};
pub use tokenizer::Tokenizer;

/// Reserved id prepended to chunks when a BOS token is configured.
pub const BOS: TokenId = 1;

/// Sequences per batched forward during extraction.
const CAPTURE_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    InDistribution,
    Ood,
}

/// One sample: the representation after block `layer` and the tokens that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionPair<T> {
    pub layer: usize,
    pub h: Tensor<T>,
    pub tokens: Vec<TokenId>,
    pub source_tag: SourceTag,
}

/// Reads every file as a list of non-empty lines.
pub fn read_corpus(paths: &[PathBuf]) -> Result<Vec<String>> {
    if paths.is_empty() {
        return Err(Error::Ingest("no corpus paths given".into()));
    }
    let mut docs = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(p)
            .map_err(|e| Error::Ingest(format!("{}: {e}", p.display())))?;
        docs.extend(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from),
        );
    }
    if docs.is_empty() {
        return Err(Error::Ingest("corpus is empty".into()));
    }
    Ok(docs)
}

/// Consecutive disjoint `n`-token chunks; the remainder is dropped.
pub fn chunk_corpus(tokens: &[TokenId], n: usize) -> Vec<Vec<TokenId>> {
    if n == 0 {
        return Vec::new();
    }
    tokens.chunks_exact(n).map(<[TokenId]>::to_vec).collect()
}

/// Chunks each document separately so no chunk spans two documents.
pub fn chunk_documents(tok: &Tokenizer, docs: &[String], n: usize) -> Vec<Vec<TokenId>> {
    docs.iter()
        .flat_map(|d| chunk_corpus(&tok.encode(d), n))
        .collect()
}

/// Captures `h^layer` for every chunk, preserving order. With `bos` set the
/// id is prepended for the forward pass only.
pub fn build_pairs<T: Real>(
    target: &LmParams<T>,
    chunks: &[Vec<TokenId>],
    layer: usize,
    source_tag: SourceTag,
    bos: bool,
) -> Result<Vec<InversionPair<T>>> {
    if layer == 0 || layer > target.spec.n_layers {
        return Err(Error::Layer {
            layer,
            n_layers: target.spec.n_layers,
        });
    }
    let inputs: Vec<Vec<TokenId>> = chunks
        .iter()
        .map(|c| {
            if bos {
                std::iter::once(BOS).chain(c.iter().copied()).collect()
            } else {
                c.clone()
            }
        })
        .collect();
    let mut reprs: Vec<Option<Tensor<T>>> = vec![None; chunks.len()];
    // group equal lengths so each batch is rectangular
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.sort_by_key(|&i| inputs[i].len());
    for group in order.chunk_by(|&a, &b| inputs[a].len() == inputs[b].len()) {
        for batch in group.chunks(CAPTURE_BATCH) {
            let seqs: Vec<&[TokenId]> = batch.iter().map(|&i| inputs[i].as_slice()).collect();
            for (&i, h) in batch.iter().zip(target.capture_batch(&seqs, layer)?) {
                reprs[i] = Some(h);
            }
        }
    }
    Ok(chunks
        .iter()
        .zip(reprs)
        .map(|(c, h)| InversionPair {
            layer,
            h: h.expect("every chunk captured"),
            tokens: c.clone(),
            source_tag,
        })
        .collect())
}

/// Default held-out size: 1000 pairs when there are at least 10k, else 10%.
pub fn default_test_size(total: usize) -> usize {
    (total / 10).min(1000)
}

/// Seeded split by pair index; both halves keep their original order.
pub fn split<T>(pairs: Vec<T>, test_size: usize, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if test_size > pairs.len() {
        return Err(Error::Config(format!(
            "test size {test_size} exceeds the {} available pairs",
            pairs.len()
        )));
    }
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; pairs.len()];
    for &i in &idx[..test_size] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (p, t) in pairs.into_iter().zip(is_test) {
        if t {
            test.push(p);
        } else {
            train.push(p);
        }
    }
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReprRef {
    /// Element offset into the sidecar file.
    pub offset: usize,
    /// Element count.
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PairRecord {
    layer: usize,
    n: usize,
    token_ids: Vec<TokenId>,
    repr_ref: ReprRef,
    source_tag: SourceTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreMeta {
    precision: Precision,
    endianness: String,
    count: usize,
}

fn store_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{name}.jsonl")),
        dir.join(format!("{name}.repr.bin")),
        dir.join(format!("{name}.meta.json")),
    )
}

/// Writes `<name>.jsonl`, the `<name>.repr.bin` sidecar, and
/// `<name>.meta.json` under `dir`.
pub fn save_pairs<T: Real>(dir: &Path, name: &str, pairs: &[InversionPair<T>]) -> Result<()> {
    let (jsonl, bin, meta) = store_paths(dir, name);
    let mut raw = Vec::new();
    let mut lines = Vec::new();
    let mut offset = 0;
    for p in pairs {
        let rec = PairRecord {
            layer: p.layer,
            n: p.tokens.len(),
            token_ids: p.tokens.clone(),
            repr_ref: ReprRef {
                offset,
                length: p.h.numel(),
            },
            source_tag: p.source_tag,
        };
        offset += p.h.numel();
        for &x in p.h.data() {
            x.write_le(&mut raw);
        }
        serde_json::to_writer(&mut lines, &rec)?;
        lines.push(b'\n');
    }
    write_atomic(&bin, &raw)?;
    write_atomic(&jsonl, &lines)?;
    let m = StoreMeta {
        precision: T::PRECISION,
        endianness: "little".into(),
        count: pairs.len(),
    };
    write_atomic(&meta, &serde_json::to_vec_pretty(&m)?)
}

pub fn load_pairs<T: Real>(dir: &Path, name: &str) -> Result<Vec<InversionPair<T>>> {
    let (jsonl, bin, meta) = store_paths(dir, name);
    let m: StoreMeta =
        serde_json::from_slice(&std::fs::read(&meta).map_err(|e| Error::io(&meta, e))?)?;
    if m.precision != T::PRECISION {
        return Err(Error::Checkpoint(format!(
            "{} holds {:?} representations, requested {:?}",
            bin.display(),
            m.precision,
            T::PRECISION
        )));
    }
    let raw = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let width = T::PRECISION.byte_width();
    let file = File::open(&jsonl).map_err(|e| Error::io(&jsonl, e))?;
    let mut out = Vec::with_capacity(m.count);
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&jsonl, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line)?;
        if rec.n != rec.token_ids.len() {
            return Err(Error::Parse(format!(
                "record says n={} but has {} tokens",
                rec.n,
                rec.token_ids.len()
            )));
        }
        let r = rec.repr_ref;
        let bytes = raw
            .get(r.offset * width..(r.offset + r.length) * width)
            .ok_or_else(|| {
                Error::Checkpoint(format!("repr_ref {r:?} outside {}", bin.display()))
            })?;
        let h = Tensor::from_vec(
            [r.length],
            bytes.chunks_exact(width).map(T::read_le).collect(),
        )?;
        out.push(InversionPair {
            layer: rec.layer,
            h,
            tokens: rec.token_ids,
            source_tag: rec.source_tag,
        });
    }
    if out.len() != m.count {
        return Err(Error::Checkpoint(format!(
            "{} lists {} pairs, expected {}",
            jsonl.display(),
            out.len(),
            m.count
        )));
    }
    Ok(out)
}

/// Writes plain lines, for corpora and generated sentence sets.
pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut buf = BufWriter::new(Vec::new());
    for l in lines {
        writeln!(buf, "{l}").map_err(|e| Error::io(path, e))?;
    }
    let bytes = buf
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}
