use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::{BackwardRule, Tape, Tensor, Var};

fn check(x: &[usize], w: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (x, w, b) {
        ([n, f], [f2, k], [k2]) if f == f2 && k == k2 => Ok((*n, *f, *k)),
        _ => Err(Error::ShapeMismatch { op: "linear", lhs: x.to_vec(), rhs: w.to_vec() }),
    }
}

struct LinearBackward;

impl<S: Scalar> BackwardRule<S> for LinearBackward {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, f, k) = check(x.shape(), w.shape(), inputs[2].shape())?;
        let g = MatRef::row_major(grad.data(), n, k);
        let dx = needs[0].then(|| {
            let mut dx = vec![S::zero(); n * f];
            gemm(g, MatRef::row_major(w.data(), f, k).t(), S::zero(), &mut dx);
            Tensor::from_parts(vec![n, f], dx)
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![S::zero(); f * k];
            gemm(MatRef::row_major(x.data(), n, f).t(), g, S::zero(), &mut dw);
            Tensor::from_parts(vec![f, k], dw)
        });
        let db = needs[2].then(|| {
            let mut db = vec![S::zero(); k];
            for row in grad.data().chunks(k) {
                for (a, &v) in db.iter_mut().zip(row) {
                    *a += v;
                }
            }
            Tensor::from_parts(vec![k], db)
        });
        Ok(vec![dx, dw, db])
    }
}

impl<S: Scalar> Tape<S> {
    /// Fully connected layer: `x [N, F] . weight [F, K] + bias [K]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.try_value(x)?, self.try_value(weight)?, self.try_value(bias)?);
        let (n, f, k) = check(xv.shape(), wv.shape(), bv.shape())?;
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend_from_slice(bv.data());
        }
        gemm(MatRef::row_major(xv.data(), n, f), MatRef::row_major(wv.data(), f, k), S::one(), &mut out);
        self.record(Tensor::from_parts(vec![n, k], out), &[x, weight, bias], LinearBackward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_affine_map() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1., 2.]).unwrap());
        let w = tape.leaf(Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2], vec![1., 1.]).unwrap());
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[2., 3.]);
    }

    #[test]
    fn shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[1, 3]));
        let w = tape.leaf(Tensor::ones(&[2, 2]));
        let b = tape.leaf(Tensor::ones(&[2]));
        assert!(matches!(tape.linear(x, w, b), Err(Error::ShapeMismatch { .. })));
    }
}
