use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    /// Coordinate where the maximum was attained.
    pub worst_index: usize,
}

/// Compares the tape gradient of a scalar function with central differences.
///
/// `f` builds its graph on a fresh tape from the leaf holding `x` and
/// returns the scalar output. The error per coordinate is
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, step: f64) -> Result<FiniteDiffReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if step.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Contract(
            "finite difference step must be positive".into(),
        ));
    }
    let eval = |input: &Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(input);
        let out = f(&mut tape, leaf)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Contract(
                "finite_diff_check needs a scalar function".into(),
            ));
        }
        let y = v[0].to_f64().unwrap_or(f64::NAN);
        if !y.is_finite() {
            return Err(Error::Numeric(format!("function evaluated to {y}")));
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(&x.clone().with_grad());
    let out = f(&mut tape, leaf)?;
    let grads = tape.backward(out)?;
    let zeros = vec![T::zero(); x.numel()];
    let analytic = grads.get(leaf).unwrap_or(&zeros).to_vec();

    let h = T::lit(step);
    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        worst_index: 0,
    };
    let mut probe = x.clone();
    #[allow(clippy::needless_range_loop)]
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        // divide by the perturbation actually representable in T
        let width = ((orig + h) - (orig - h)).to_f64().unwrap();
        let numeric = (up - down) / width;
        let a = analytic[i].to_f64().unwrap();
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::normal([3, 4], 1.0, &mut rng);
        let r = finite_diff_check(|t, x| Ok(t.sum(x)), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn gelu_and_layer_norm_composites() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::normal([4, 6], 1.5, &mut rng);
        let r = finite_diff_check(
            |t, x| {
                let y = t.gelu(x);
                Ok(t.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");

        let gamma = Tensor::<f64>::normal([6], 1.0, &mut rng);
        let beta = Tensor::<f64>::normal([6], 1.0, &mut rng);
        let w = Tensor::<f64>::normal([4, 6], 1.0, &mut rng);
        let r = finite_diff_check(
            |t, x| {
                let g = t.leaf(&gamma);
                let b = t.leaf(&beta);
                let wv = t.leaf(&w);
                let y = t.layer_norm(x, g, b, 1e-5)?;
                let y = t.mul(y, wv)?;
                Ok(t.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    // Debug builds trip the per-op finiteness assertion before the check
    // sees the value.
    #[test]
    #[cfg_attr(debug_assertions, should_panic(expected = "non-finite"))]
    fn non_finite_evaluation_is_an_error() {
        let x = Tensor::<f64>::from_vec([1], vec![1.0]).unwrap();
        let r = finite_diff_check(
            |t, x| {
                let y = t.scale(x, f64::MAX);
                let y = t.scale(y, 10.0);
                Ok(t.sum(y))
            },
            &x,
            1e-5,
        );
        assert!(r.is_err());
    }
}
