use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Tape, Tensor, Var};

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// `f` receives a fresh tape and the variable holding `x` and must return a
/// scalar. The result is the largest element-wise
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<S, F>(f: F, x: &Tensor<S>, epsilon: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    if !(epsilon > S::zero()) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let eval = |input: Tensor<S>| -> Result<S> {
        let mut tape = Tape::new();
        let v = tape.leaf(input);
        let out = f(&mut tape, v)?;
        let value = tape.value(out);
        if !value.is_scalar() {
            return Err(Error::NonScalarLoss(value.shape().to_vec()));
        }
        value.item()
    };

    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros_like(x));

    let two_eps = epsilon + epsilon;
    let floor = S::lit(1e-8);
    let mut worst = S::zero();
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - epsilon;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / two_eps;
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(&[3, 2], 1.0, &mut rng);
        let err = finite_difference_check(|t, v| t.sum(v), &x, 1e-3).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
        let err = finite_difference_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                t.sum(sq)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rejects_non_scalar_output() {
        let x = Tensor::<f64>::ones(&[3]);
        assert!(matches!(
            finite_difference_check(|_, v| Ok(v), &x, 1e-3),
            Err(Error::NonScalarLoss(_))
        ));
    }
}
