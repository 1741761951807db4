use forestvid::nn::ForwardCtx;
use forestvid::resnet::{ResNet3d, ResNetConfig};
use forestvid::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn head_width_is_independent_of_input_size() {
    let cfg = ResNetConfig::default();
    for s in [32, 33, 56, 100, 171, 244, 300] {
        let t = ResNet3d::<f32>::trace_shapes(&cfg, [3, 8, s, s]).unwrap();
        assert_eq!(t.stages[3][0], 2048, "S = {s}");
        assert_eq!(t.stages[3][1], 8, "temporal extent kept for S = {s}");
        assert_eq!(t.logits, 4);
    }
}

#[test]
fn traced_shapes_match_a_real_forward() {
    let cfg = ResNetConfig::width_reduced(16);
    let model = ResNet3d::<f32>::build(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[1, 3, 4, 40, 36], 1.0, &mut rng);
    let trace = ResNet3d::<f32>::trace_shapes(&cfg, [3, 4, 40, 36]).unwrap();
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::eval();
    let xv = tape.leaf(x);
    let mut h = model.forward_stem(&mut tape, xv, &mut ctx).unwrap();
    assert_eq!(&tape.shape(h)[1..], &trace.stem[..]);
    for (s, stage) in model.stages.iter().enumerate() {
        for block in stage {
            h = block.forward(&mut tape, h, &mut ctx).unwrap();
        }
        assert_eq!(&tape.shape(h)[1..], &trace.stages[s][..]);
    }
    let logits = model.forward_head(&mut tape, h, &mut ctx).unwrap();
    assert_eq!(tape.shape(logits), &[1, trace.logits]);
}

#[test]
fn silenced_residual_branches_leave_only_shortcuts() {
    let cfg = ResNetConfig::width_reduced(16);
    let mut model = ResNet3d::<f64>::build(&cfg, 5).unwrap();
    for block in model.stages.iter_mut().flatten() {
        block.restore_bn.gamma = Tensor::zeros(block.restore_bn.gamma.shape());
        block.restore_bn.beta = Tensor::zeros(block.restore_bn.beta.shape());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::randn(&[2, 3, 4, 32, 32], 1.0, &mut rng);
    let full = model.predict(&x).unwrap();

    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::eval();
    let xv = tape.leaf(x);
    let mut h = model.forward_stem(&mut tape, xv, &mut ctx).unwrap();
    for block in model.stages.iter().flatten() {
        if let Some((conv, bn)) = &block.shortcut {
            let p = conv.forward(&mut tape, h, &mut ctx).unwrap();
            let p = bn.forward(&mut tape, p, &mut ctx).unwrap();
            h = tape.relu(p).unwrap();
        }
    }
    let skip_only = model.forward_head(&mut tape, h, &mut ctx).unwrap();
    assert!(tape.value(skip_only).max_abs_diff(&full).unwrap() < 1e-12);
}

#[test]
fn loss_reaches_nearly_every_parameter() {
    let cfg = ResNetConfig::width_reduced(16);
    let mut model = ResNet3d::<f32>::build(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::randn(&[2, 3, 4, 64, 64], 1.0, &mut rng));
    let (logits, params) = model.forward_train(&mut tape, x).unwrap();
    let loss = tape.softmax_cross_entropy(logits, &[1, 2]).unwrap();
    tape.backward(loss).unwrap();
    let (mut live, mut total) = (0usize, 0usize);
    for p in params {
        let g = tape.grad(p).unwrap();
        assert!(g.all_finite());
        total += g.numel();
        live += g.data().iter().filter(|v| **v != 0.0).count();
    }
    assert_eq!(total, model.count_parameters());
    assert!(live as f64 >= 0.99 * total as f64, "{live} of {total} gradients nonzero");
}

#[test]
fn training_forward_updates_running_statistics_only() {
    let cfg = ResNetConfig::width_reduced(16);
    let mut model = ResNet3d::<f32>::build(&cfg, 2).unwrap();
    let before: Vec<Tensor<f32>> = model.parameters().into_iter().cloned().collect();
    let mut buffers_before = Vec::new();
    model.visit_buffers(&mut |_, t| buffers_before.push(t.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::randn(&[2, 3, 4, 32, 32], 1.0, &mut rng));
    model.forward_train(&mut tape, x).unwrap();
    let after: Vec<Tensor<f32>> = model.parameters().into_iter().cloned().collect();
    assert_eq!(before, after);
    let mut buffers_after = Vec::new();
    model.visit_buffers(&mut |_, t| buffers_after.push(t.clone()));
    assert_ne!(buffers_before, buffers_after);
}
