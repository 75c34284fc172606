use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Linear warmup from 0 over `warmup_ratio · total_steps`, then cosine decay
/// to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_ratio: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warmup = warmup_ratio * total;
    if step < warmup {
        return base_lr * step / warmup;
    }
    let span = total - warmup;
    if span <= 0.0 {
        return 0.0;
    }
    let progress = (step - warmup) / span;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adaptive moments with decoupled weight decay. Decay applies to
/// parameters with two or more dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far; drives bias correction.
    pub t: usize,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(sizes: &[usize], weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// One update. `lrs[i]` is the learning rate for `params[i]`; a missing
    /// gradient counts as zero.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Option<&[T]>],
        lrs: &[f64],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || lrs.len() != params.len()
        {
            return Err(Error::Contract(
                "optimizer state does not match parameter list".into(),
            ));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (tb1, tb2, teps) = (T::lit(b1), T::lit(b2), T::lit(self.eps));
        let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        for (i, p) in params.iter_mut().enumerate() {
            if p.numel() != self.m[i].len() {
                return Err(Error::Contract(format!("parameter {i} changed size")));
            }
            let lr = lrs[i];
            let decay = if p.shape().len() >= 2 {
                T::lit(1.0 - lr * self.weight_decay)
            } else {
                T::one()
            };
            let step = T::lit(lr / bc1);
            let inv_bc2 = T::lit(1.0 / bc2);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i];
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(T::zero(), |g| g[j]);
                m[j] = tb1 * m[j] + one_b1 * gj;
                v[j] = tb2 * v[j] + one_b2 * gj * gj;
                *x = *x * decay - step * m[j] / ((v[j] * inv_bc2).sqrt() + teps);
            }
        }
        Ok(())
    }
}
