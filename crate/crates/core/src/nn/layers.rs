//! Parameter-holding layers built on the tape operations.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

use super::batchnorm::BatchStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running estimates are updated afterwards.
    Train,
    /// Running statistics only.
    Eval,
}

/// State threaded through one forward pass.
pub struct ForwardCtx<S: Scalar> {
    pub mode: Mode,
    /// Record parameters as differentiable leaves.
    pub trainable: bool,
    /// Parameter variables in visiting order (filled when `trainable`).
    pub param_vars: Vec<Var>,
    /// Batch statistics of every normalization layer, in forward order.
    pub bn_stats: Vec<BatchStats<S>>,
}

impl<S: Scalar> ForwardCtx<S> {
    pub fn new(mode: Mode, trainable: bool) -> Self {
        ForwardCtx { mode, trainable, param_vars: Vec::new(), bn_stats: Vec::new() }
    }

    pub fn train() -> Self {
        Self::new(Mode::Train, true)
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, false)
    }

    fn bind(&mut self, tape: &mut Tape<S>, value: &Tensor<S>) -> Var {
        if self.trainable {
            let v = tape.param(value.clone());
            self.param_vars.push(v);
            v
        } else {
            tape.leaf(value.clone())
        }
    }
}

pub struct Conv3d<S> {
    /// `[out, in, kT, kH, kW]`
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl<S: Scalar> Conv3d<S> {
    /// Gaussian weights with standard deviation `sqrt(2 / fan_out)`, where
    /// `fan_out = out * kT * kH * kW`; zero bias when requested.
    pub fn kaiming<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_out = out_ch * kernel.iter().product::<usize>();
        let std = (2.0 / fan_out as f64).sqrt();
        let shape = [out_ch, in_ch, kernel[0], kernel[1], kernel[2]];
        Conv3d {
            weight: Tensor::randn(&shape, std, rng),
            bias: with_bias.then(|| Tensor::zeros(&[out_ch])),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> [usize; 3] {
        let s = self.weight.shape();
        [s[2], s[3], s[4]]
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: Var, ctx: &mut ForwardCtx<S>) -> Result<Var> {
        let w = ctx.bind(tape, &self.weight);
        let b = self.bias.as_ref().map(|b| ctx.bind(tape, b));
        tape.conv3d(x, w, b, self.stride, self.padding)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(format!("{prefix}.bias"), b);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<S>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(format!("{prefix}.bias"), b);
        }
    }
}

pub struct BatchNorm3d<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub momentum: f64,
    pub eps: f64,
}

impl<S: Scalar> BatchNorm3d<S> {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        BatchNorm3d {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: Var, ctx: &mut ForwardCtx<S>) -> Result<Var> {
        let g = ctx.bind(tape, &self.gamma);
        let b = ctx.bind(tape, &self.beta);
        let eps = S::lit(self.eps);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, g, b, eps)?;
                ctx.bn_stats.push(stats);
                Ok(y)
            }
            Mode::Eval => tape.batch_norm_eval(
                x,
                g,
                b,
                self.running_mean.data(),
                self.running_var.data(),
                eps,
            ),
        }
    }

    /// Exponential moving average update; the variance estimate uses the
    /// unbiased correction `count / (count - 1)`.
    pub fn update_running(&mut self, stats: &BatchStats<S>) -> Result<()> {
        let c = self.channels();
        if stats.mean.len() != c || stats.var.len() != c || stats.count < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch statistics for {} channels cannot update a {c}-channel norm",
                stats.mean.len()
            )));
        }
        let m = S::lit(self.momentum);
        let keep = S::one() - m;
        let corr = S::lit(stats.count as f64 / (stats.count - 1) as f64);
        for (r, &v) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * v;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * v * corr;
        }
        Ok(())
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<S>)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }

    pub fn visit_buffers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(format!("{prefix}.running_mean"), &self.running_mean);
        f(format!("{prefix}.running_var"), &self.running_var);
    }

    pub fn visit_buffers_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<S>)) {
        f(format!("{prefix}.running_mean"), &mut self.running_mean);
        f(format!("{prefix}.running_var"), &mut self.running_var);
    }
}

pub struct Linear<S> {
    /// `[in_features, out_features]`
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    /// Gaussian weights with standard deviation `std` and zero bias.
    pub fn normal<R: Rng + ?Sized>(in_features: usize, out_features: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::randn(&[in_features, out_features], std, rng),
            bias: Tensor::zeros(&[out_features]),
        }
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: Var, ctx: &mut ForwardCtx<S>) -> Result<Var> {
        let w = ctx.bind(tape, &self.weight);
        let b = ctx.bind(tape, &self.bias);
        tape.linear(x, w, b)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<S>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}
