use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BackwardRule, Tape, Tensor, Var};

/// Row-wise softmax of `[N, K]` logits with max subtraction.
pub fn softmax<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    let [_, k] = <[usize; 2]>::try_from(logits.shape())
        .map_err(|_| Error::InvalidShape(format!("softmax expects [N, K], got {:?}", logits.shape())))?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut z = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

struct SoftmaxCrossEntropyBackward<S> {
    probs: Tensor<S>,
    targets: Vec<usize>,
}

impl<S: Scalar> BackwardRule<S> for SoftmaxCrossEntropyBackward<S> {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let k = self.probs.shape()[1];
        let n = self.targets.len();
        let scale = grad.item()? / S::lit(n as f64);
        let mut d = self.probs.data().to_vec();
        for (row, &t) in d.chunks_mut(k).zip(&self.targets) {
            row[t] -= S::one();
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        Ok(vec![Some(Tensor::from_parts(self.probs.shape().to_vec(), d))])
    }
}

impl<S: Scalar> Tape<S> {
    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.try_value(logits)?;
        let probs = softmax(lv)?;
        let (n, k) = (lv.shape()[0], lv.shape()[1]);
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidArgument(format!("target {bad} out of range for {k} classes")));
        }
        // log p_t = (z_t - max) - log sum exp(z - max)
        let mut total = S::zero();
        for (row, &t) in lv.data().chunks(k).zip(targets) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<S>().ln();
            total += lse - (row[t] - max);
        }
        let loss = Tensor::scalar(total / S::lit(n as f64));
        self.record(loss, &[logits], SoftmaxCrossEntropyBackward { probs, targets: targets.to_vec() })
    }
}
