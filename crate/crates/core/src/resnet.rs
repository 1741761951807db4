//! 3D ResNet-50: spatial stem, four bottleneck stages, pooled linear head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv3d_output_shape, BatchNorm3d, Conv3d, ForwardCtx, Linear, Mode};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

const STEM_KERNEL: [usize; 3] = [1, 7, 7];
const STEM_STRIDE: [usize; 3] = [1, 2, 2];
const STEM_PADDING: [usize; 3] = [0, 3, 3];
const POOL_KERNEL: [usize; 3] = [1, 3, 3];
const POOL_STRIDE: [usize; 3] = [1, 2, 2];
const POOL_PADDING: [usize; 3] = [0, 1, 1];
const HEAD_INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub input_channels: usize,
    pub model_depth: usize,
    pub num_classes: usize,
    pub stage_block_counts: [usize; 4],
    pub stem_out_channels: usize,
    pub stage_out_channels: [usize; 4],
    pub bottleneck_mid_channels: [usize; 4],
    pub stage_spatial_strides: [usize; 4],
    pub stage_temporal_strides: [usize; 4],
}

impl Default for ResNetConfig {
    fn default() -> Self {
        ResNetConfig {
            input_channels: 3,
            model_depth: 50,
            num_classes: 4,
            stage_block_counts: [3, 4, 6, 3],
            stem_out_channels: 64,
            stage_out_channels: [256, 512, 1024, 2048],
            bottleneck_mid_channels: [64, 128, 256, 512],
            stage_spatial_strides: [1, 2, 2, 2],
            stage_temporal_strides: [1, 1, 1, 1],
        }
    }
}

impl ResNetConfig {
    /// Same topology with bottleneck widths divided by `factor` (the output
    /// width of every stage stays four times its bottleneck width).
    pub fn width_reduced(factor: usize) -> Self {
        let mut cfg = Self::default();
        for i in 0..4 {
            cfg.bottleneck_mid_channels[i] /= factor;
            cfg.stage_out_channels[i] = 4 * cfg.bottleneck_mid_channels[i];
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_depth != 50 {
            return Err(Error::InvalidConfig(format!("unsupported model depth {}", self.model_depth)));
        }
        if self.stage_block_counts != [3, 4, 6, 3] {
            return Err(Error::InvalidConfig(format!(
                "depth 50 requires block counts [3, 4, 6, 3], got {:?}",
                self.stage_block_counts
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be at least 2".into()));
        }
        if self.input_channels == 0 || self.stem_out_channels == 0 {
            return Err(Error::InvalidConfig("channel counts must be positive".into()));
        }
        for i in 0..4 {
            let mid = self.bottleneck_mid_channels[i];
            if mid == 0 || self.stage_out_channels[i] != 4 * mid {
                return Err(Error::InvalidConfig(format!(
                    "stage {i}: output channels {} must be 4 x bottleneck width {mid}",
                    self.stage_out_channels[i]
                )));
            }
            if self.stage_spatial_strides[i] == 0 || self.stage_temporal_strides[i] == 0 {
                return Err(Error::InvalidConfig(format!("stage {i}: strides must be positive")));
            }
        }
        Ok(())
    }

    pub fn head_features(&self) -> usize {
        self.stage_out_channels[3]
    }
}

/// 1x1x1 reduce, 3x3x3 spatiotemporal, 1x1x1 restore, plus skip connection.
pub struct Bottleneck<S> {
    pub reduce: Conv3d<S>,
    pub reduce_bn: BatchNorm3d<S>,
    pub spatiotemporal: Conv3d<S>,
    pub spatiotemporal_bn: BatchNorm3d<S>,
    pub restore: Conv3d<S>,
    pub restore_bn: BatchNorm3d<S>,
    /// Projection used when the block changes channel count or resolution.
    pub shortcut: Option<(Conv3d<S>, BatchNorm3d<S>)>,
}

impl<S: Scalar> Bottleneck<S> {
    pub fn new<R: rand::Rng + ?Sized>(
        in_ch: usize,
        mid_ch: usize,
        out_ch: usize,
        stride: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let reduce = Conv3d::kaiming(in_ch, mid_ch, [1, 1, 1], [1; 3], [0; 3], false, rng);
        let spatiotemporal = Conv3d::kaiming(mid_ch, mid_ch, [3, 3, 3], stride, [1, 1, 1], false, rng);
        let restore = Conv3d::kaiming(mid_ch, out_ch, [1, 1, 1], [1; 3], [0; 3], false, rng);
        let shortcut = (in_ch != out_ch || stride != [1, 1, 1]).then(|| {
            (
                Conv3d::kaiming(in_ch, out_ch, [1, 1, 1], stride, [0; 3], false, rng),
                BatchNorm3d::new(out_ch),
            )
        });
        Bottleneck {
            reduce,
            reduce_bn: BatchNorm3d::new(mid_ch),
            spatiotemporal,
            spatiotemporal_bn: BatchNorm3d::new(mid_ch),
            restore,
            restore_bn: BatchNorm3d::new(out_ch),
            shortcut,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.reduce.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.restore.out_channels()
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: Var, ctx: &mut ForwardCtx<S>) -> Result<Var> {
        let in_shape = tape.try_value(x)?.shape();
        if in_shape.len() != 5 || in_shape[1] != self.in_channels() {
            return Err(Error::ShapeMismatch {
                op: "bottleneck",
                lhs: in_shape.to_vec(),
                rhs: vec![self.in_channels()],
            });
        }
        let h = self.reduce.forward(tape, x, ctx)?;
        let h = self.reduce_bn.forward(tape, h, ctx)?;
        let h = tape.relu(h)?;
        let h = self.spatiotemporal.forward(tape, h, ctx)?;
        let h = self.spatiotemporal_bn.forward(tape, h, ctx)?;
        let h = tape.relu(h)?;
        let h = self.restore.forward(tape, h, ctx)?;
        let h = self.restore_bn.forward(tape, h, ctx)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(tape, x, ctx)?;
                bn.forward(tape, s, ctx)?
            }
            None => x,
        };
        let sum = tape.add(h, skip)?;
        tape.relu(sum)
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm3d<S>> {
        let mut v = vec![&mut self.reduce_bn, &mut self.spatiotemporal_bn, &mut self.restore_bn];
        if let Some((_, bn)) = &mut self.shortcut {
            v.push(bn);
        }
        v
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.reduce.visit(&format!("{prefix}.reduce"), f);
        self.reduce_bn.visit(&format!("{prefix}.reduce_bn"), f);
        self.spatiotemporal.visit(&format!("{prefix}.spatiotemporal"), f);
        self.spatiotemporal_bn.visit(&format!("{prefix}.spatiotemporal_bn"), f);
        self.restore.visit(&format!("{prefix}.restore"), f);
        self.restore_bn.visit(&format!("{prefix}.restore_bn"), f);
        if let Some((conv, bn)) = &self.shortcut {
            conv.visit(&format!("{prefix}.shortcut"), f);
            bn.visit(&format!("{prefix}.shortcut_bn"), f);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<S>)) {
        self.reduce.visit_mut(&format!("{prefix}.reduce"), f);
        self.reduce_bn.visit_mut(&format!("{prefix}.reduce_bn"), f);
        self.spatiotemporal.visit_mut(&format!("{prefix}.spatiotemporal"), f);
        self.spatiotemporal_bn.visit_mut(&format!("{prefix}.spatiotemporal_bn"), f);
        self.restore.visit_mut(&format!("{prefix}.restore"), f);
        self.restore_bn.visit_mut(&format!("{prefix}.restore_bn"), f);
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit_mut(&format!("{prefix}.shortcut"), f);
            bn.visit_mut(&format!("{prefix}.shortcut_bn"), f);
        }
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.reduce_bn.visit_buffers(&format!("{prefix}.reduce_bn"), f);
        self.spatiotemporal_bn.visit_buffers(&format!("{prefix}.spatiotemporal_bn"), f);
        self.restore_bn.visit_buffers(&format!("{prefix}.restore_bn"), f);
        if let Some((_, bn)) = &self.shortcut {
            bn.visit_buffers(&format!("{prefix}.shortcut_bn"), f);
        }
    }

    fn visit_buffers_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<S>)) {
        self.reduce_bn.visit_buffers_mut(&format!("{prefix}.reduce_bn"), f);
        self.spatiotemporal_bn.visit_buffers_mut(&format!("{prefix}.spatiotemporal_bn"), f);
        self.restore_bn.visit_buffers_mut(&format!("{prefix}.restore_bn"), f);
        if let Some((_, bn)) = &mut self.shortcut {
            bn.visit_buffers_mut(&format!("{prefix}.shortcut_bn"), f);
        }
    }
}

/// Activation extents `[C, T, H, W]` at the main checkpoints of the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeTrace {
    /// Stem convolution output, before pooling.
    pub stem_conv: [usize; 4],
    /// Stem output after max pooling; what the first stage receives.
    pub stem: [usize; 4],
    pub stages: [[usize; 4]; 4],
    pub logits: usize,
}

pub struct ResNet3d<S> {
    pub config: ResNetConfig,
    pub stem_conv: Conv3d<S>,
    pub stem_bn: BatchNorm3d<S>,
    pub stages: Vec<Vec<Bottleneck<S>>>,
    pub head: Linear<S>,
}

impl<S: Scalar> ResNet3d<S> {
    /// Builds the network with weights drawn deterministically from `seed`.
    pub fn build(config: &ResNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_conv = Conv3d::kaiming(
            config.input_channels,
            config.stem_out_channels,
            STEM_KERNEL,
            STEM_STRIDE,
            STEM_PADDING,
            false,
            &mut rng,
        );
        let mut in_ch = config.stem_out_channels;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let mut blocks = Vec::with_capacity(config.stage_block_counts[s]);
            for b in 0..config.stage_block_counts[s] {
                let stride = if b == 0 {
                    let sp = config.stage_spatial_strides[s];
                    [config.stage_temporal_strides[s], sp, sp]
                } else {
                    [1, 1, 1]
                };
                let out_ch = config.stage_out_channels[s];
                blocks.push(Bottleneck::new(in_ch, config.bottleneck_mid_channels[s], out_ch, stride, &mut rng));
                in_ch = out_ch;
            }
            stages.push(blocks);
        }
        let head = Linear::normal(in_ch, config.num_classes, HEAD_INIT_STD, &mut rng);
        Ok(ResNet3d {
            config: config.clone(),
            stem_conv,
            stem_bn: BatchNorm3d::new(config.stem_out_channels),
            stages,
            head,
        })
    }

    /// Stem, pooling, and stage extents for an input clip of `[C, T, H, W]`.
    pub fn trace_shapes(config: &ResNetConfig, input: [usize; 4]) -> Result<ShapeTrace> {
        config.validate()?;
        if input[0] != config.input_channels {
            return Err(Error::ShapeMismatch {
                op: "resnet input",
                lhs: input.to_vec(),
                rhs: vec![config.input_channels],
            });
        }
        let ext = [input[1], input[2], input[3]];
        let stem_ext = conv3d_output_shape(ext, STEM_KERNEL, STEM_STRIDE, STEM_PADDING)?;
        let pool_ext = conv3d_output_shape(stem_ext, POOL_KERNEL, POOL_STRIDE, POOL_PADDING)?;
        let c0 = config.stem_out_channels;
        let mut cur = pool_ext;
        let mut stages = [[0; 4]; 4];
        for s in 0..4 {
            let sp = config.stage_spatial_strides[s];
            let stride = [config.stage_temporal_strides[s], sp, sp];
            cur = conv3d_output_shape(cur, [3, 3, 3], stride, [1, 1, 1])?;
            stages[s] = [config.stage_out_channels[s], cur[0], cur[1], cur[2]];
        }
        Ok(ShapeTrace {
            stem_conv: [c0, stem_ext[0], stem_ext[1], stem_ext[2]],
            stem: [c0, pool_ext[0], pool_ext[1], pool_ext[2]],
            stages,
            logits: config.num_classes,
        })
    }

    /// Stem: convolution, normalization, ReLU, max pooling.
    pub fn forward_stem(&self, tape: &mut Tape<S>, x: Var, ctx: &mut ForwardCtx<S>) -> Result<Var> {
        let shape = tape.try_value(x)?.shape();
        if shape.len() != 5 || shape[1] != self.config.input_channels {
            return Err(Error::ShapeMismatch {
                op: "resnet input",
                lhs: shape.to_vec(),
                rhs: vec![self.config.input_channels],
            });
        }
        let h = self.stem_conv.forward(tape, x, ctx)?;
        let h = self.stem_bn.forward(tape, h, ctx)?;
        let h = tape.relu(h)?;
        tape.max_pool3d(h, POOL_KERNEL, POOL_STRIDE, POOL_PADDING)
    }

    /// Global average pooling followed by the linear classifier.
    pub fn forward_head(&self, tape: &mut Tape<S>, x: Var, ctx: &mut ForwardCtx<S>) -> Result<Var> {
        let pooled = tape.global_avg_pool(x)?;
        self.head.forward(tape, pooled, ctx)
    }

    /// Logits `[N, num_classes]` for clips `[N, C, T, H, W]`.
    pub fn forward(&self, tape: &mut Tape<S>, x: Var, ctx: &mut ForwardCtx<S>) -> Result<Var> {
        let mut h = self.forward_stem(tape, x, ctx)?;
        for stage in &self.stages {
            for block in stage {
                h = block.forward(tape, h, ctx)?;
            }
        }
        self.forward_head(tape, h, ctx)
    }

    /// Training-mode forward. Returns the logits and the parameter variables
    /// in [`visit_params`](Self::visit_params) order; running normalization
    /// statistics are updated from this batch.
    pub fn forward_train(&mut self, tape: &mut Tape<S>, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut ctx = ForwardCtx::train();
        let logits = self.forward(tape, x, &mut ctx)?;
        self.apply_batch_stats(&ctx.bn_stats)?;
        Ok((logits, ctx.param_vars))
    }

    /// Inference with running statistics; parameters are recorded as constants.
    pub fn forward_eval(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let mut ctx = ForwardCtx::eval();
        self.forward(tape, x, &mut ctx)
    }

    /// Logits for a batch of clips, without gradient tracking.
    pub fn predict(&self, clips: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let x = tape.leaf(clips.clone());
        let logits = self.forward_eval(&mut tape, x)?;
        Ok(tape.value(logits).clone())
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm3d<S>> {
        let mut v = vec![&mut self.stem_bn];
        for stage in &mut self.stages {
            for block in stage {
                v.extend(block.norms_mut());
            }
        }
        v
    }

    pub fn apply_batch_stats(&mut self, stats: &[crate::nn::BatchStats<S>]) -> Result<()> {
        let norms = self.norms_mut();
        if norms.len() != stats.len() {
            return Err(Error::InvalidArgument(format!(
                "{} batch statistics for {} normalization layers",
                stats.len(),
                norms.len()
            )));
        }
        for (bn, st) in norms.into_iter().zip(stats) {
            bn.update_running(st)?;
        }
        Ok(())
    }

    /// Visits every trainable tensor in a fixed order (the order in which
    /// `forward` records them).
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.stem_conv.visit("stem.conv", f);
        self.stem_bn.visit("stem.bn", f);
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                block.visit(&format!("stage{}.block{b}", s + 1), f);
            }
        }
        self.head.visit("head.fc", f);
    }

    pub fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Tensor<S>)) {
        self.stem_conv.visit_mut("stem.conv", f);
        self.stem_bn.visit_mut("stem.bn", f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_mut(&format!("stage{}.block{b}", s + 1), f);
            }
        }
        self.head.visit_mut("head.fc", f);
    }

    /// Visits the running normalization statistics.
    pub fn visit_buffers<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.stem_bn.visit_buffers("stem.bn", f);
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                block.visit_buffers(&format!("stage{}.block{b}", s + 1), f);
            }
        }
    }

    pub fn visit_buffers_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Tensor<S>)) {
        self.stem_bn.visit_buffers_mut("stem.bn", f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_buffers_mut(&format!("stage{}.block{b}", s + 1), f);
            }
        }
    }

    pub fn parameters(&self) -> Vec<&Tensor<S>> {
        let mut v = Vec::new();
        self.visit_params(&mut |_, t| v.push(t));
        v
    }

    /// Total number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }
}

/// Convenience for callers that only need eval-mode logits on one tape.
pub fn eval_logits<S: Scalar>(model: &ResNet3d<S>, tape: &mut Tape<S>, x: Var) -> Result<Var> {
    let mut ctx = ForwardCtx::new(Mode::Eval, false);
    model.forward(tape, x, &mut ctx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ResNetConfig {
        ResNetConfig {
            stem_out_channels: 4,
            bottleneck_mid_channels: [2, 2, 2, 2],
            stage_out_channels: [8, 8, 8, 8],
            ..ResNetConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        ResNetConfig::default().validate().unwrap();
        let mut c = ResNetConfig::default();
        c.model_depth = 18;
        assert!(ResNet3d::<f32>::build(&c, 0).is_err());
        let mut c = ResNetConfig::default();
        c.stage_out_channels[1] = 500;
        assert!(c.validate().is_err());
        let mut c = ResNetConfig::default();
        c.num_classes = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn width_reduction_keeps_expansion() {
        let c = ResNetConfig::width_reduced(4);
        assert_eq!(c.bottleneck_mid_channels, [16, 32, 64, 128]);
        assert_eq!(c.stage_out_channels, [64, 128, 256, 512]);
        c.validate().unwrap();
    }

    #[test]
    fn default_shape_trace() {
        let t = ResNet3d::<f32>::trace_shapes(&ResNetConfig::default(), [3, 8, 244, 244]).unwrap();
        assert_eq!(t.stem_conv, [64, 8, 122, 122]);
        assert_eq!(t.stem, [64, 8, 61, 61]);
        assert_eq!(t.stages[3][0], 2048);
        assert_eq!(t.stages[3][1], 8);
        assert_eq!(t.logits, 4);
    }

    #[test]
    fn params_recorded_in_visit_order() {
        let mut model = ResNet3d::<f64>::build(&tiny(), 3).unwrap();
        let mut shapes = Vec::new();
        model.visit_params(&mut |_, t| shapes.push(t.shape().to_vec()));
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3, 2, 16, 16], 0.5));
        let (_, vars) = model.forward_train(&mut tape, x).unwrap();
        let recorded: Vec<Vec<usize>> = vars.iter().map(|&v| tape.shape(v).to_vec()).collect();
        assert_eq!(recorded, shapes);
    }

    #[test]
    fn projection_only_when_shape_changes() {
        let model = ResNet3d::<f32>::build(&ResNetConfig::width_reduced(4), 0).unwrap();
        // 64-channel stem feeds a 64-channel first stage at stride 1.
        assert!(model.stages[0][0].shortcut.is_none());
        for s in 1..4 {
            assert!(model.stages[s][0].shortcut.is_some());
            assert!(model.stages[s][1..].iter().all(|b| b.shortcut.is_none()));
        }
        let full = ResNet3d::<f32>::build(&tiny(), 0).unwrap();
        assert!(full.stages[0][0].shortcut.is_some());
    }
}
