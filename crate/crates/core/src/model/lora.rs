use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LmParams, BLOCK_TENSORS};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Matrices that may carry a low-rank update.
const ADAPTABLE: [&str; 6] = [
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "mlp.w_fc",
    "mlp.w_proj",
];

/// One targeted matrix: block index plus per-block matrix name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraTarget {
    pub layer: usize,
    pub matrix: String,
}

impl LoraTarget {
    pub fn full_name(&self) -> String {
        format!("blocks.{}.{}", self.layer, self.matrix)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T> {
    pub target: LoraTarget,
    /// `[d_in × r]`
    pub a: Tensor<T>,
    /// `[r × d_out]`
    pub b: Tensor<T>,
}

impl<T: Real> LoraPair<T> {
    /// Records `W + scaling·A·B`; returns the effective weight and the
    /// `A`, `B` leaves.
    pub(crate) fn fold_into(
        &self,
        tape: &mut Tape<T>,
        base: Var,
        scaling: T,
    ) -> Result<(Var, Var, Var)> {
        let a = tape.leaf(&self.a);
        let b = tape.leaf(&self.b);
        let ab = tape.matmul(a, b)?;
        let delta = tape.scale(ab, scaling);
        Ok((tape.add(base, delta)?, a, b))
    }
}

/// Low-rank updates `(alpha/r)·A·B` for a set of decoder matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraParams<T> {
    pub rank: usize,
    pub alpha: f64,
    pub pairs: Vec<LoraPair<T>>,
}

/// Expands short names (`attn.wq`) to every block; full names
/// (`blocks.1.attn.wq`) select one block.
pub fn resolve_targets(n_layers: usize, names: &[String]) -> Result<Vec<LoraTarget>> {
    let mut out = Vec::new();
    for name in names {
        if let Some(rest) = name.strip_prefix("blocks.") {
            let (layer, matrix) = rest
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("unknown LoRA target `{name}`")))?;
            let layer: usize = layer
                .parse()
                .map_err(|_| Error::Config(format!("unknown LoRA target `{name}`")))?;
            if layer >= n_layers || !ADAPTABLE.contains(&matrix) {
                return Err(Error::Config(format!("unknown LoRA target `{name}`")));
            }
            out.push(LoraTarget {
                layer,
                matrix: matrix.to_string(),
            });
        } else if ADAPTABLE.contains(&name.as_str()) {
            out.extend((0..n_layers).map(|layer| LoraTarget {
                layer,
                matrix: name.clone(),
            }));
        } else {
            return Err(Error::Config(format!("unknown LoRA target `{name}`")));
        }
    }
    out.sort_by(|a, b| (a.layer, &a.matrix).cmp(&(b.layer, &b.matrix)));
    out.dedup();
    Ok(out)
}

impl<T: Real> LoraParams<T> {
    /// A gets a scaled-uniform init, B starts at zero so the adapted model
    /// initially equals the base model.
    pub fn init(
        base: &LmParams<T>,
        targets: &[String],
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::new();
        for target in resolve_targets(base.spec.n_layers, targets)? {
            let w = base.get(&target.full_name()).ok_or_else(|| {
                Error::Config(format!("unknown LoRA target `{}`", target.full_name()))
            })?;
            let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
            pairs.push(LoraPair {
                target,
                a: Tensor::scaled_uniform([d_in, rank], d_in, &mut rng).with_grad(),
                b: Tensor::<T>::zeros([rank, d_out]).with_grad(),
            });
        }
        Ok(LoraParams { rank, alpha, pairs })
    }

    pub fn scaling(&self) -> T {
        T::lit(self.alpha / self.rank as f64)
    }

    pub fn pair_for(&self, layer: usize, matrix: &str) -> Option<&LoraPair<T>> {
        self.pairs
            .iter()
            .find(|p| p.target.layer == layer && p.target.matrix == matrix)
    }

    pub fn validate_against(&self, base: &LmParams<T>) -> Result<()> {
        for p in &self.pairs {
            if !BLOCK_TENSORS.contains(&p.target.matrix.as_str())
                || !ADAPTABLE.contains(&p.target.matrix.as_str())
            {
                return Err(Error::Config(format!(
                    "unknown LoRA target `{}`",
                    p.target.full_name()
                )));
            }
            let w = base.get(&p.target.full_name()).ok_or_else(|| {
                Error::Config(format!("unknown LoRA target `{}`", p.target.full_name()))
            })?;
            let expect_a = [w.shape()[0], self.rank];
            let expect_b = [self.rank, w.shape()[1]];
            if p.a.shape() != expect_a || p.b.shape() != expect_b {
                return Err(Error::Config(format!(
                    "LoRA shapes for `{}`: A {:?} B {:?}, expected {expect_a:?} {expect_b:?}",
                    p.target.full_name(),
                    p.a.shape(),
                    p.b.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        self.pairs
            .iter()
            .flat_map(|p| {
                let n = p.target.full_name();
                [(format!("{n}.lora_a"), &p.a), (format!("{n}.lora_b"), &p.b)]
            })
            .collect()
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.pairs
            .iter_mut()
            .flat_map(|p| {
                let n = p.target.full_name();
                [
                    (format!("{n}.lora_a"), &mut p.a),
                    (format!("{n}.lora_b"), &mut p.b),
                ]
            })
            .collect()
    }
}
