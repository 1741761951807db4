use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub const DEFAULT_BETA1: f64 = 0.9;
    pub const DEFAULT_BETA2: f64 = 0.999;
    pub const DEFAULT_EPS: f64 = 1e-8;

    /// Zeroed moments shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<S>>) -> Self {
        let m: Vec<Tensor<S>> = params.into_iter().map(Tensor::zeros_like).collect();
        Adam {
            beta1: Self::DEFAULT_BETA1,
            beta2: Self::DEFAULT_BETA2,
            eps: Self::DEFAULT_EPS,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor<S>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<S>] {
        &self.v
    }

    /// Replaces the whole state; moment shapes must match the current ones.
    pub fn restore(&mut self, t: u64, m: Vec<Tensor<S>>, v: Vec<Tensor<S>>) -> Result<()> {
        let same = |a: &[Tensor<S>], b: &[Tensor<S>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape());
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(Error::InvalidArgument("optimizer moments do not match parameter shapes".into()));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update of every parameter. Nothing is modified if any gradient
    /// is non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Tensor<S>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::ShapeMismatch { op: "adam_step", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
            }
            if let Some(j) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: format!("adam_step: gradient {i} element {j} is {}", g.data()[j]) });
            }
        }
        self.t += 1;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let (c1, c2) = (S::one() - b1, S::one() - b2);
        let bc1 = S::lit(1.0 - self.beta1.powf(self.t as f64));
        let bc2 = S::lit(1.0 - self.beta2.powf(self.t as f64));
        let (lr, eps) = (S::lit(lr), S::lit(self.eps));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, &g), (m, v)) in it {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
