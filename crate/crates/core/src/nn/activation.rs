use rayon::prelude::*;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{BackwardRule, Tape, Tensor, Var};

struct ReluBackward;

impl<S: Scalar> BackwardRule<S> for ReluBackward {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let x = inputs[0];
        let mut dx = vec![S::zero(); x.numel()];
        dx.par_iter_mut()
            .zip(x.data().par_iter().zip(grad.data().par_iter()))
            .for_each(|(d, (&v, &g))| *d = if v > S::zero() { g } else { S::zero() });
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))])
    }
}

impl<S: Scalar> Tape<S> {
    /// `max(0, x)`; the subgradient at zero is taken as zero.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.try_value(x)?;
        let data = xv.data().par_iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.record(out, &[x], ReluBackward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clamps_negatives() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn negative_input_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full(&[4], -0.5));
        let y = tape.relu(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::randn(&[5, 7], 1.0, &mut rng));
        let once = tape.relu(x).unwrap();
        let twice = tape.relu(once).unwrap();
        assert_eq!(tape.value(once), tape.value(twice));
    }
}
