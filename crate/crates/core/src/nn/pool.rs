use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BackwardRule, Tape, Tensor, Var};

use super::conv::conv3d_output_shape;

fn five_d(shape: &[usize], op: &str) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(shape)
        .map_err(|_| Error::InvalidShape(format!("{op} expects [N, C, T, H, W], got {shape:?}")))
}

/// Window maxima with `-inf` padding. Returns the output and, per output
/// element, the flat input index of the first maximal element in scan order.
pub fn max_pool3d_forward<S: Scalar>(
    x: &Tensor<S>,
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<(Tensor<S>, Vec<usize>)> {
    let [n, c, it, ih, iw] = five_d(x.shape(), "max_pool3d")?;
    let [ot, oh, ow] = conv3d_output_shape([it, ih, iw], kernel, stride, padding)?;
    let plane_in = it * ih * iw;
    let plane_out = ot * oh * ow;
    let mut out = vec![S::zero(); n * c * plane_out];
    let mut arg = vec![0usize; n * c * plane_out];
    let xd = x.data();
    out.par_chunks_mut(plane_out)
        .zip(arg.par_chunks_mut(plane_out))
        .enumerate()
        .try_for_each(|(nc, (o, a))| -> Result<()> {
            let base = nc * plane_in;
            let mut i = 0;
            for t in 0..ot {
                for h in 0..oh {
                    for w in 0..ow {
                        let mut best = S::neg_infinity();
                        let mut best_idx = None;
                        for dt in 0..kernel[0] {
                            let Some(st) = (t * stride[0] + dt).checked_sub(padding[0]) else { continue };
                            if st >= it {
                                continue;
                            }
                            for dh in 0..kernel[1] {
                                let Some(sh) = (h * stride[1] + dh).checked_sub(padding[1]) else { continue };
                                if sh >= ih {
                                    continue;
                                }
                                for dw in 0..kernel[2] {
                                    let Some(sw) = (w * stride[2] + dw).checked_sub(padding[2]) else { continue };
                                    if sw >= iw {
                                        continue;
                                    }
                                    let idx = base + (st * ih + sh) * iw + sw;
                                    if best_idx.is_none() || xd[idx] > best {
                                        best = xd[idx];
                                        best_idx = Some(idx);
                                    }
                                }
                            }
                        }
                        let Some(idx) = best_idx else {
                            return Err(Error::InvalidArgument(
                                "max_pool3d window lies entirely in padding".into(),
                            ));
                        };
                        o[i] = best;
                        a[i] = idx;
                        i += 1;
                    }
                }
            }
            Ok(())
        })?;
    Ok((Tensor::from_parts(vec![n, c, ot, oh, ow], out), arg))
}

struct MaxPoolBackward {
    argmax: Vec<usize>,
}

impl<S: Scalar> BackwardRule<S> for MaxPoolBackward {
    fn name(&self) -> &'static str {
        "max_pool3d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let mut dx = vec![S::zero(); inputs[0].numel()];
        for (&idx, &g) in self.argmax.iter().zip(grad.data()) {
            dx[idx] += g;
        }
        Ok(vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), dx))])
    }
}

struct GlobalAvgPoolBackward;

impl<S: Scalar> BackwardRule<S> for GlobalAvgPoolBackward {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let x = inputs[0];
        let inner: usize = x.shape()[2..].iter().product();
        let scale = S::one() / S::lit(inner as f64);
        let mut dx = vec![S::zero(); x.numel()];
        for (chunk, &g) in dx.chunks_mut(inner).zip(grad.data()) {
            chunk.fill(g * scale);
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))])
    }
}

impl<S: Scalar> Tape<S> {
    pub fn max_pool3d(
        &mut self,
        x: Var,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let (out, argmax) = max_pool3d_forward(self.try_value(x)?, kernel, stride, padding)?;
        self.record(out, &[x], MaxPoolBackward { argmax })
    }

    /// Mean over every axis after the first two: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.try_value(x)?;
        if xv.rank() < 3 {
            return Err(Error::InvalidShape(format!("global_avg_pool input {:?}", xv.shape())));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let inner: usize = xv.shape()[2..].iter().product();
        let denom = S::lit(inner as f64);
        let data = xv.data().chunks(inner).map(|ch| ch.iter().copied().sum::<S>() / denom).collect();
        self.record(Tensor::from_parts(vec![n, c], data), &[x], GlobalAvgPoolBackward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_max() {
        let x = Tensor::<f32>::new(vec![1, 1, 1, 1, 3], vec![1.0, 5.0, 3.0]).unwrap();
        let (y, arg) = max_pool3d_forward(&x, [1, 1, 3], [1; 3], [0; 3]).unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn ties_route_to_first_element() {
        let x = Tensor::<f32>::new(vec![1, 1, 1, 1, 4], vec![2.0, 2.0, 1.0, 2.0]).unwrap();
        let (_, arg) = max_pool3d_forward(&x, [1, 1, 4], [1; 3], [0; 3]).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn padding_only_window_is_an_error() {
        let x = Tensor::<f32>::ones(&[1, 1, 1, 2, 2]);
        assert!(max_pool3d_forward(&x, [1, 1, 1], [1; 3], [0, 1, 1]).is_err());
    }

    #[test]
    fn gradient_is_one_hot_per_window() {
        let x = Tensor::<f64>::new(vec![1, 1, 1, 2, 4], vec![1., 4., 2., 0., 3., 0., 9., 8.]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(x);
        let y = tape.max_pool3d(v, [1, 2, 2], [1, 2, 2], [0; 3]).unwrap();
        assert_eq!(tape.value(y).data(), &[4., 9.]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap().data(), &[0., 1., 0., 0., 0., 0., 1., 0.]);
    }

    #[test]
    fn global_avg_of_pair() {
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::new(vec![1, 1, 2, 1, 1], vec![2.0, 4.0]).unwrap());
        let y = tape.global_avg_pool(v).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1]);
        assert_eq!(tape.value(y).data(), &[3.0]);
    }
}
