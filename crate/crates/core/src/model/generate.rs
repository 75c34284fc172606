use super::{Decoder, TokenId, EOS};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor};

/// Greedy decoding for several equal-length prefixes at once.
///
/// Each step runs the full causal forward over the current embeddings (no
/// cache), takes the argmax of the last position (lowest id wins ties),
/// and appends that token's embedding row. A sequence stops at `max_new`
/// tokens or at [`EOS`], which is not included in its output.
pub fn generate_greedy_batch<T: Real>(
    decoder: &Decoder<'_, T>,
    prefixes: &[Tensor<T>],
    max_new: usize,
) -> Result<Vec<Vec<TokenId>>> {
    let spec = decoder.spec();
    let d = spec.d_model;
    let Some(first) = prefixes.first() else {
        return Ok(Vec::new());
    };
    let len = first.shape()[0];
    for p in prefixes {
        if p.shape() != [len, d] {
            return Err(Error::Shape(format!(
                "prefix {:?} differs from [{len}x{d}]",
                p.shape()
            )));
        }
    }
    if len + max_new > spec.max_seq {
        return Err(Error::Length {
            len: len + max_new,
            max: spec.max_seq,
        });
    }
    let batch = prefixes.len();
    let mut outputs: Vec<Vec<TokenId>> = vec![Vec::new(); batch];
    let mut done = vec![false; batch];
    if max_new == 0 {
        return Ok(outputs);
    }
    if len == 0 {
        return Err(Error::Contract(
            "greedy generation needs a non-empty prefix".into(),
        ));
    }
    // per-sequence embedding rows, grown one row per step
    let mut seqs: Vec<Vec<T>> = prefixes.iter().map(|p| p.data().to_vec()).collect();
    let vocab = spec.vocab_size;
    for step in 0..max_new {
        let cur = len + step;
        let active: Vec<usize> = (0..batch).filter(|&b| !done[b]).collect();
        if active.is_empty() {
            break;
        }
        let mut tape = Tape::new();
        let lm = decoder.base.bind(&mut tape, decoder.lora)?;
        let mut stacked = Vec::with_capacity(active.len() * cur * d);
        for &b in &active {
            stacked.extend_from_slice(&seqs[b]);
        }
        let x = tape.constant([active.len() * cur, d], stacked)?;
        let last_rows: Vec<usize> = (0..active.len()).map(|slot| slot * cur + cur - 1).collect();
        let logits = lm.forward_rows(
            &mut tape,
            x,
            active.len(),
            cur,
            decoder.unpositioned_prefix,
            &last_rows,
        )?;
        let lv = tape.value(logits);
        for (slot, &b) in active.iter().enumerate() {
            let row = &lv[slot * vocab..(slot + 1) * vocab];
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            let tok = best as TokenId;
            if tok == EOS {
                done[b] = true;
                continue;
            }
            outputs[b].push(tok);
            seqs[b].extend_from_slice(decoder.base.tok_emb.row(best));
            if outputs[b].len() == max_new {
                done[b] = true;
            }
        }
    }
    Ok(outputs)
}
