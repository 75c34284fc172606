//! Projection from a target-model representation to decoder token
//! embeddings: a two-layer MLP with a gated skip path.
//!
//! ```text
//! h1  = GELU(LN_in(h)·W1 + b1)            (dropout in training)
//! h2  = h1·W2 + b2                        reshaped to [k × d']
//! X_e = LN_out(h·W_s + g·h2[i])           for every row i
//! ```
//!
//! The skip term is one `d'` vector broadcast over all `k` rows. When
//! `d == d'` the skip is the identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LN_EPS;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Target model width.
    pub d: usize,
    /// Decoder model width.
    pub d_out: usize,
    /// Hidden expansion factor, `d_hid = round(f·d)`.
    pub f: f64,
    /// Number of projected token embeddings.
    pub k: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dropout() -> f64 {
    0.1
}

impl AdapterConfig {
    pub fn new(d: usize, d_out: usize, f: f64, k: usize) -> Self {
        AdapterConfig {
            d,
            d_out,
            f,
            k,
            dropout: default_dropout(),
        }
    }

    pub fn d_hid(&self) -> usize {
        ((self.f * self.d as f64).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_out == 0 || self.k == 0 {
            return Err(Error::Config(
                "adapter dimensions must be at least 1".into(),
            ));
        }
        if !(self.f.is_finite() && self.f > 0.0) {
            return Err(Error::Config(format!(
                "expansion factor {} must be positive",
                self.f
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Skip<T> {
    Identity,
    Projection(Tensor<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<T> {
    pub config: AdapterConfig,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub skip: Skip<T>,
    /// Scalar gate on the MLP path.
    pub gate: Tensor<T>,
    pub ln_in_g: Tensor<T>,
    pub ln_in_b: Tensor<T>,
    pub ln_out_g: Tensor<T>,
    pub ln_out_b: Tensor<T>,
}

/// Adapter parameters recorded on a tape, in [`AdapterParams::named`] order.
#[derive(Debug, Clone)]
pub struct BoundAdapter {
    pub params: Vec<Var>,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    skip: Option<Var>,
    gate: Var,
    ln_in: (Var, Var),
    ln_out: (Var, Var),
}

impl<T: Real> AdapterParams<T> {
    pub fn init(config: AdapterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, dh, kd) = (config.d, config.d_hid(), config.k * config.d_out);
        let w1 = Tensor::scaled_uniform([d, dh], d, &mut rng).with_grad();
        let w2 = Tensor::scaled_uniform([dh, kd], dh, &mut rng).with_grad();
        let skip = if config.d == config.d_out {
            Skip::Identity
        } else {
            Skip::Projection(Tensor::scaled_uniform([d, config.d_out], d, &mut rng).with_grad())
        };
        Ok(AdapterParams {
            w1,
            b1: Tensor::zeros([dh]).with_grad(),
            w2,
            b2: Tensor::zeros([kd]).with_grad(),
            skip,
            gate: Tensor::zeros([1]).with_grad(),
            ln_in_g: Tensor::filled([d], T::one()).with_grad(),
            ln_in_b: Tensor::zeros([d]).with_grad(),
            ln_out_g: Tensor::filled([config.d_out], T::one()).with_grad(),
            ln_out_b: Tensor::zeros([config.d_out]).with_grad(),
            config,
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("w1".to_string(), &self.w1),
            ("b1".to_string(), &self.b1),
            ("w2".to_string(), &self.w2),
            ("b2".to_string(), &self.b2),
        ];
        if let Skip::Projection(w) = &self.skip {
            out.push(("w_s".to_string(), w));
        }
        out.extend([
            ("gate".to_string(), &self.gate),
            ("ln_in.g".to_string(), &self.ln_in_g),
            ("ln_in.b".to_string(), &self.ln_in_b),
            ("ln_out.g".to_string(), &self.ln_out_g),
            ("ln_out.b".to_string(), &self.ln_out_b),
        ]);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("w1".to_string(), &mut self.w1),
            ("b1".to_string(), &mut self.b1),
            ("w2".to_string(), &mut self.w2),
            ("b2".to_string(), &mut self.b2),
        ];
        if let Skip::Projection(w) = &mut self.skip {
            out.push(("w_s".to_string(), w));
        }
        out.extend([
            ("gate".to_string(), &mut self.gate),
            ("ln_in.g".to_string(), &mut self.ln_in_g),
            ("ln_in.b".to_string(), &mut self.ln_in_b),
            ("ln_out.g".to_string(), &mut self.ln_out_g),
            ("ln_out.b".to_string(), &mut self.ln_out_b),
        ]);
        out
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundAdapter {
        let params: Vec<Var> = self.named().iter().map(|(_, t)| tape.leaf(t)).collect();
        let has_skip = matches!(self.skip, Skip::Projection(_));
        let o = usize::from(has_skip);
        BoundAdapter {
            w1: params[0],
            b1: params[1],
            w2: params[2],
            b2: params[3],
            skip: has_skip.then(|| params[4]),
            gate: params[4 + o],
            ln_in: (params[5 + o], params[6 + o]),
            ln_out: (params[7 + o], params[8 + o]),
            params,
        }
    }

    fn check_input(&self, h: &Tensor<T>) -> Result<usize> {
        let d = self.config.d;
        match h.shape() {
            [w] if *w == d => Ok(1),
            [b, w] if *w == d => Ok(*b),
            s => Err(Error::Shape(format!(
                "adapter input {s:?}, expected width {d}"
            ))),
        }
    }

    /// `X_e` for one representation `h: [d]`, as `[k × d']`.
    pub fn project(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.check_input(h)?;
        let mut tape = Tape::new();
        let a = self.bind(&mut tape);
        let x = tape.constant([batch, self.config.d], h.data().to_vec())?;
        let out = a.forward::<T, ChaCha8Rng>(&mut tape, &self.config, x, None)?;
        Ok(tape.to_tensor(out))
    }

    /// Activations entering `LN_out`, `[k × d']`.
    pub fn pre_norm(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.check_input(h)?;
        let mut tape = Tape::new();
        let a = self.bind(&mut tape);
        let x = tape.constant([batch, self.config.d], h.data().to_vec())?;
        let out = a.pre_norm::<T, ChaCha8Rng>(&mut tape, &self.config, x, None)?;
        Ok(tape.to_tensor(out))
    }
}

impl BoundAdapter {
    /// Projects `h: [B × d]` to `[B·k × d']`, sample-major. Passing an RNG
    /// enables training-mode dropout.
    pub fn forward<T: Real, R: Rng>(
        &self,
        tape: &mut Tape<T>,
        cfg: &AdapterConfig,
        h: Var,
        dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        let pre = self.pre_norm(tape, cfg, h, dropout_rng)?;
        tape.layer_norm(pre, self.ln_out.0, self.ln_out.1, LN_EPS)
    }

    fn pre_norm<T: Real, R: Rng>(
        &self,
        tape: &mut Tape<T>,
        cfg: &AdapterConfig,
        h: Var,
        dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        let batch = match tape.shape(h) {
            [b, w] if *w == cfg.d => *b,
            s => {
                return Err(Error::Shape(format!(
                    "adapter input {s:?}, expected [B x {}]",
                    cfg.d
                )))
            }
        };
        let n = tape.layer_norm(h, self.ln_in.0, self.ln_in.1, LN_EPS)?;
        let h1 = tape.matmul(n, self.w1)?;
        let h1 = tape.add_bias(h1, self.b1)?;
        let mut h1 = tape.gelu(h1);
        if let Some(rng) = dropout_rng {
            if cfg.dropout > 0.0 {
                let keep: Vec<bool> = (0..tape.value(h1).len())
                    .map(|_| rng.gen::<f64>() >= cfg.dropout)
                    .collect();
                h1 = tape.dropout(h1, &keep, cfg.dropout)?;
            }
        }
        let h2 = tape.matmul(h1, self.w2)?;
        let h2 = tape.add_bias(h2, self.b2)?;
        let h2 = tape.reshape(h2, [batch * cfg.k, cfg.d_out])?;
        let gated = tape.scale_by(h2, self.gate)?;
        let skip = match self.skip {
            Some(ws) => tape.matmul(h, ws)?,
            None => h,
        };
        let rows: Vec<usize> = (0..batch)
            .flat_map(|b| std::iter::repeat_n(b, cfg.k))
            .collect();
        let skip = tape.embedding_gather(skip, &rows)?;
        tape.add(skip, gated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;

    fn rand_h(d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::normal([d], 1.0, &mut rng)
    }

    /// Direct loop implementation used as an independent oracle.
    fn reference_projection(p: &AdapterParams<f64>, h: &[f64]) -> Vec<f64> {
        let c = &p.config;
        let (d, dh, dp) = (c.d, c.d_hid(), c.d_out);
        let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
            let n = x.len() as f64;
            let mu = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            x.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g[i] + b[i])
                .collect()
        };
        let gelu = |x: f64| {
            0.5 * x
                * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
        };
        let n = ln(h, p.ln_in_g.data(), p.ln_in_b.data());
        let h1: Vec<f64> = (0..dh)
            .map(|j| {
                gelu((0..d).map(|i| n[i] * p.w1.data()[i * dh + j]).sum::<f64>() + p.b1.data()[j])
            })
            .collect();
        let h2: Vec<f64> = (0..c.k * dp)
            .map(|j| {
                (0..dh)
                    .map(|i| h1[i] * p.w2.data()[i * c.k * dp + j])
                    .sum::<f64>()
                    + p.b2.data()[j]
            })
            .collect();
        let skip: Vec<f64> = match &p.skip {
            Skip::Identity => h.to_vec(),
            Skip::Projection(w) => (0..dp)
                .map(|j| (0..d).map(|i| h[i] * w.data()[i * dp + j]).sum())
                .collect(),
        };
        let g = p.gate.data()[0];
        let mut out = Vec::new();
        for r in 0..c.k {
            let row: Vec<f64> = (0..dp).map(|j| skip[j] + g * h2[r * dp + j]).collect();
            out.extend(ln(&row, p.ln_out_g.data(), p.ln_out_b.data()));
        }
        out
    }

    #[test]
    fn shape_arithmetic() {
        let p = AdapterParams::<f64>::init(AdapterConfig::new(64, 64, 0.5, 16), 1).unwrap();
        assert_eq!(p.config.d_hid(), 32);
        assert_eq!(p.w1.shape(), &[64, 32]);
        assert_eq!(p.w2.shape(), &[32, 16 * 64]);
        let x = p.project(&rand_h(64, 2)).unwrap();
        assert_eq!(x.shape(), &[16, 64]);

        let p = AdapterParams::<f64>::init(AdapterConfig::new(12, 20, 2.0, 3), 1).unwrap();
        assert_eq!(p.project(&rand_h(12, 2)).unwrap().shape(), &[3, 20]);
        assert!(matches!(p.project(&rand_h(11, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn d_hid_rounding() {
        assert_eq!(AdapterConfig::new(3, 3, 0.5, 1).d_hid(), 2);
        assert_eq!(AdapterConfig::new(1, 3, 0.5, 1).d_hid(), 1);
        assert_eq!(AdapterConfig::new(1, 3, 0.1, 1).d_hid(), 1);
        assert!(AdapterParams::<f64>::init(AdapterConfig::new(0, 3, 0.5, 1), 0).is_err());
        assert!(AdapterParams::<f64>::init(AdapterConfig::new(3, 3, 0.5, 0), 0).is_err());
    }

    #[test]
    fn init_conventions() {
        let a = AdapterParams::<f64>::init(AdapterConfig::new(8, 8, 0.5, 4), 9).unwrap();
        assert_eq!(a.skip, Skip::Identity);
        assert_eq!(a.gate.data(), &[0.0]);
        assert!(a.b1.data().iter().chain(a.b2.data()).all(|v| *v == 0.0));
        assert_eq!(
            a,
            AdapterParams::init(AdapterConfig::new(8, 8, 0.5, 4), 9).unwrap()
        );
        let b = AdapterParams::<f64>::init(AdapterConfig::new(8, 6, 0.5, 4), 9).unwrap();
        assert!(matches!(b.skip, Skip::Projection(_)));
    }

    #[test]
    fn closed_gate_repeats_normalized_skip() {
        let a = AdapterParams::<f64>::init(AdapterConfig::new(8, 8, 0.5, 4), 3).unwrap();
        let h = rand_h(8, 4);
        let x = a.project(&h).unwrap();
        let mu = h.data().iter().sum::<f64>() / 8.0;
        let var = h.data().iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 8.0;
        for r in 0..4 {
            for i in 0..8 {
                let expect = (h.data()[i] - mu) / (var + 1e-5).sqrt();
                assert!((x.row(r)[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_mlp_path() {
        let mut a = AdapterParams::<f64>::init(AdapterConfig::new(8, 5, 0.5, 3), 3).unwrap();
        a.w2 = Tensor::zeros(a.w2.shape().to_vec());
        a.gate = Tensor::filled([1], 1.0);
        let h = rand_h(8, 5);
        let x = a.project(&h).unwrap();
        let mut b = a.clone();
        b.w1.data_mut().iter_mut().for_each(|v| *v *= -3.0);
        assert_eq!(x, b.project(&h).unwrap());
        assert_eq!(x.row(0), x.row(2));
    }

    #[test]
    fn matches_straight_line_oracle() {
        for (d, dp, f, k) in [(8, 8, 0.5, 4), (6, 10, 2.0, 3), (5, 5, 1.0, 1)] {
            let mut rng = ChaCha8Rng::seed_from_u64(d as u64);
            let mut a = AdapterParams::<f64>::init(AdapterConfig::new(d, dp, f, k), 17).unwrap();
            for (_, t) in a.named_mut() {
                let n = Tensor::<f64>::normal(t.shape().to_vec(), 0.5, &mut rng);
                t.data_mut()
                    .iter_mut()
                    .zip(n.data())
                    .for_each(|(v, e)| *v += e);
            }
            let h = rand_h(d, 99);
            let got = a.project(&h).unwrap();
            let want = reference_projection(&a, h.data());
            for (g, w) in got.data().iter().zip(&want) {
                assert!((g - w).abs() < 1e-6, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn gate_scales_only_the_mlp_contribution() {
        let mut a = AdapterParams::<f64>::init(AdapterConfig::new(8, 8, 0.5, 2), 3).unwrap();
        a.b2.data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = i as f64 * 0.01);
        let h = rand_h(8, 8);
        a.gate = Tensor::filled([1], 0.0);
        let skip_only = a.pre_norm(&h).unwrap();
        a.gate = Tensor::filled([1], 1.0);
        let unit = a.pre_norm(&h).unwrap();
        a.gate = Tensor::filled([1], 2.5);
        let scaled = a.pre_norm(&h).unwrap();
        for i in 0..skip_only.numel() {
            let mlp = unit.data()[i] - skip_only.data()[i];
            assert!((scaled.data()[i] - skip_only.data()[i] - 2.5 * mlp).abs() < 1e-12);
        }
    }

    #[test]
    fn every_parameter_gets_gradient_when_gate_open() {
        let mut a = AdapterParams::<f64>::init(AdapterConfig::new(6, 4, 1.0, 3), 5).unwrap();
        a.gate = Tensor::filled([1], 0.7).with_grad();
        let mut tape = Tape::new();
        let bound = a.bind(&mut tape);
        let h = tape.constant([2, 6], rand_h(12, 1).into_data()).unwrap();
        let x = bound
            .forward::<f64, ChaCha8Rng>(&mut tape, &a.config, h, None)
            .unwrap();
        let w = tape.constant([6, 4], rand_h(24, 3).into_data()).unwrap();
        let y = tape.mul(x, w).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        for (v, (name, _)) in bound.params.iter().zip(a.named()) {
            let g = grads
                .get(*v)
                .unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(g.iter().any(|x| x.abs() > 1e-12), "{name} gradient is zero");
        }
    }

    #[test]
    fn gradient_wrt_input_matches_finite_differences() {
        let mut a = AdapterParams::<f64>::init(AdapterConfig::new(6, 4, 1.0, 3), 5).unwrap();
        a.gate = Tensor::filled([1], 0.7);
        let w = rand_h(24, 3);
        let h = Tensor::from_vec([2, 6], rand_h(12, 1).into_data()).unwrap();
        let r = finite_diff_check(
            |tape, x| {
                let bound = a.bind(tape);
                let out = bound.forward::<f64, ChaCha8Rng>(tape, &a.config, x, None)?;
                let wv = tape.constant([6, 4], w.data().to_vec())?;
                let y = tape.mul(out, wv)?;
                Ok(tape.sum(y))
            },
            &h,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn dropout_only_in_training_mode() {
        let mut a = AdapterParams::<f64>::init(AdapterConfig::new(8, 8, 2.0, 2), 3).unwrap();
        a.gate = Tensor::filled([1], 1.0);
        let h = rand_h(8, 8);
        let eval1 = a.project(&h).unwrap();
        let mut tape = Tape::new();
        let bound = a.bind(&mut tape);
        let x = tape.constant([1, 8], h.data().to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let train = bound
            .forward(&mut tape, &a.config, x, Some(&mut rng))
            .unwrap();
        assert_ne!(tape.value(train), eval1.data());
        assert_eq!(eval1, a.project(&h).unwrap());
    }
}
