//! Per-channel batch normalization over `[N, C, T, H, W]`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BackwardRule, Tape, Tensor, Var};

/// Statistics of one training-mode normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Biased (population) variance.
    pub var: Vec<S>,
    /// Elements per channel.
    pub count: usize,
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::InvalidShape(format!("batch_norm input shape {shape:?}")));
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], inner))
}

fn check_affine<S: Scalar>(c: usize, gamma: &Tensor<S>, beta: &Tensor<S>) -> Result<()> {
    for t in [gamma, beta] {
        if t.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: t.shape().to_vec(),
                rhs: vec![c],
            });
        }
    }
    Ok(())
}

/// Applies `y = gamma * (x - mean) * inv_std + beta` channel by channel.
fn normalize<S: Scalar>(
    x: &Tensor<S>,
    mean: &[S],
    inv_std: &[S],
    gamma: &[S],
    beta: &[S],
) -> Tensor<S> {
    let (_, c, inner) = channel_layout(x.shape()).expect("validated");
    let mut out = vec![S::zero(); x.numel()];
    out.par_chunks_mut(inner).zip(x.data().par_chunks(inner)).enumerate().for_each(
        |(i, (o, xs))| {
            let ch = i % c;
            let scale = gamma[ch] * inv_std[ch];
            let shift = beta[ch] - mean[ch] * scale;
            for (o, &v) in o.iter_mut().zip(xs) {
                *o = v * scale + shift;
            }
        },
    );
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Per-channel mean and biased variance (two-pass).
fn channel_stats<S: Scalar>(x: &Tensor<S>) -> Result<BatchStats<S>> {
    let (n, c, inner) = channel_layout(x.shape())?;
    let count = n * inner;
    let denom = S::lit(count as f64);
    let data = x.data();
    let (mean, var): (Vec<S>, Vec<S>) = (0..c)
        .into_par_iter()
        .map(|ch| {
            let chunks = || (0..n).map(move |b| &data[(b * c + ch) * inner..][..inner]);
            let mut sum = S::zero();
            for xs in chunks() {
                sum += xs.iter().copied().sum::<S>();
            }
            let m = sum / denom;
            let mut sq = S::zero();
            for xs in chunks() {
                for &v in xs {
                    let dv = v - m;
                    sq += dv * dv;
                }
            }
            (m, sq / denom)
        })
        .unzip();
    Ok(BatchStats { mean, var, count })
}

struct BatchNormTrainBackward<S> {
    mean: Vec<S>,
    inv_std: Vec<S>,
}

impl<S: Scalar> BackwardRule<S> for BatchNormTrainBackward<S> {
    fn name(&self) -> &'static str {
        "batch_norm_train"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (n, c, inner) = channel_layout(x.shape())?;
        let m = S::lit((n * inner) as f64);
        let (xd, gd) = (x.data(), grad.data());
        // Per-channel sums of dy and dy * x_hat.
        let sums: Vec<(S, S)> = (0..c)
            .into_par_iter()
            .map(|ch| {
                let (mu, is) = (self.mean[ch], self.inv_std[ch]);
                let mut sdy = S::zero();
                let mut sdyx = S::zero();
                for b in 0..n {
                    let off = (b * c + ch) * inner;
                    for (&dy, &v) in gd[off..off + inner].iter().zip(&xd[off..off + inner]) {
                        sdy += dy;
                        sdyx += dy * (v - mu) * is;
                    }
                }
                (sdy, sdyx)
            })
            .collect();

        let dx = needs[0].then(|| {
            let mut dx = vec![S::zero(); x.numel()];
            dx.par_chunks_mut(inner).enumerate().for_each(|(i, out)| {
                let ch = i % c;
                let (mu, is) = (self.mean[ch], self.inv_std[ch]);
                let (sdy, sdyx) = sums[ch];
                let k = gamma.data()[ch] * is / m;
                let off = i * inner;
                for ((o, &dy), &v) in out.iter_mut().zip(&gd[off..off + inner]).zip(&xd[off..off + inner]) {
                    let xh = (v - mu) * is;
                    *o = k * (m * dy - sdy - xh * sdyx);
                }
            });
            Tensor::from_parts(x.shape().to_vec(), dx)
        });
        let dgamma = needs[1].then(|| Tensor::from_parts(vec![c], sums.iter().map(|s| s.1).collect()));
        let dbeta = needs[2].then(|| Tensor::from_parts(vec![c], sums.iter().map(|s| s.0).collect()));
        Ok(vec![dx, dgamma, dbeta])
    }
}

struct BatchNormEvalBackward<S> {
    mean: Vec<S>,
    inv_std: Vec<S>,
}

impl<S: Scalar> BackwardRule<S> for BatchNormEvalBackward<S> {
    fn name(&self) -> &'static str {
        "batch_norm_eval"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (_, c, inner) = channel_layout(x.shape())?;
        let (xd, gd) = (x.data(), grad.data());
        let mut dgamma = vec![S::zero(); c];
        let mut dbeta = vec![S::zero(); c];
        let mut dx = needs[0].then(|| vec![S::zero(); x.numel()]);
        for (i, (gs, xs)) in gd.chunks(inner).zip(xd.chunks(inner)).enumerate() {
            let ch = i % c;
            let (mu, is) = (self.mean[ch], self.inv_std[ch]);
            for (&dy, &v) in gs.iter().zip(xs) {
                dbeta[ch] += dy;
                dgamma[ch] += dy * (v - mu) * is;
            }
            if let Some(dx) = dx.as_mut() {
                let k = gamma.data()[ch] * is;
                for (o, &dy) in dx[i * inner..(i + 1) * inner].iter_mut().zip(gs) {
                    *o = dy * k;
                }
            }
        }
        Ok(vec![
            dx.map(|v| Tensor::from_parts(x.shape().to_vec(), v)),
            needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
            needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
        ])
    }
}

impl<S: Scalar> Tape<S> {
    /// Normalizes with the statistics of this batch and returns them so the
    /// caller can update its running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: S,
    ) -> Result<(Var, BatchStats<S>)> {
        let xv = self.try_value(x)?;
        let (_, c, _) = channel_layout(xv.shape())?;
        let (g, b) = (self.try_value(gamma)?, self.try_value(beta)?);
        check_affine(c, g, b)?;
        let stats = channel_stats(xv)?;
        if stats.count < 2 {
            return Err(Error::InvalidArgument(
                "batch_norm in training mode needs more than one value per channel".into(),
            ));
        }
        let inv_std: Vec<S> = stats.var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let out = normalize(xv, &stats.mean, &inv_std, g.data(), b.data());
        let rule = BatchNormTrainBackward { mean: stats.mean.clone(), inv_std };
        let y = self.record(out, &[x, gamma, beta], rule)?;
        Ok((y, stats))
    }

    /// Normalizes with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[S],
        running_var: &[S],
        eps: S,
    ) -> Result<Var> {
        let xv = self.try_value(x)?;
        let (_, c, _) = channel_layout(xv.shape())?;
        let (g, b) = (self.try_value(gamma)?, self.try_value(beta)?);
        check_affine(c, g, b)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm running stats",
                lhs: vec![running_mean.len(), running_var.len()],
                rhs: vec![c, c],
            });
        }
        let inv_std: Vec<S> = running_var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let out = normalize(xv, running_mean, &inv_std, g.data(), b.data());
        let rule = BatchNormEvalBackward { mean: running_mean.to_vec(), inv_std };
        self.record(out, &[x, gamma, beta], rule)
    }
}
