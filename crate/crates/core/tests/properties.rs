use forestvid::dataset::{
    compute_stats, filter_active, make_batches, sample_clip_window, ClassVocabulary, ManifestEntry, Split, WindowMode,
};
use forestvid::metrics::ConfusionMatrix;
use forestvid::nn::max_pool3d_forward;
use forestvid::tensor::broadcast_shape;
use forestvid::video::{
    crop, flip_horizontal, short_side_scale, subsample_indices, train_transform, val_transform, CropMode, FrameClip,
    TransformConfig,
};
use forestvid::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn reference_broadcast(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (a, b) = (pad(a), pad(b));
    let mut out = Vec::new();
    for (x, y) in a.into_iter().zip(b) {
        if x != y && x != 1 && y != 1 {
            return None;
        }
        out.push(x.max(y));
    }
    Some(out)
}

fn tiny_cfg() -> TransformConfig {
    TransformConfig {
        num_frames: 8,
        train_scale_range: [12, 16],
        crop_size: 10,
        val_scale: 12,
        ..TransformConfig::default()
    }
}

fn clip_strategy() -> impl Strategy<Value = FrameClip> {
    (1usize..12, 4usize..20, 4usize..20).prop_flat_map(|(t, h, w)| {
        proptest::collection::vec(any::<u8>(), t * h * w * 3)
            .prop_map(move |bytes| FrameClip::new(bytes, t, h, w, 16.0, "prop").unwrap())
    })
}

fn entry(label: &str, frames: usize) -> ManifestEntry {
    ManifestEntry { clip_path: format!("{label}_{frames}.rvf"), label: label.into(), frame_count: frames, fps: 30.0, split: Split::Train }
}

const LABELS: [&str; 6] =
    ["crane_out", "cutting_and_to_processing", "processing", "driving", "non_productive", "other_crane_movement"];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn broadcast_matches_reference(a in proptest::collection::vec(1usize..4, 0..4), b in proptest::collection::vec(1usize..4, 0..4)) {
        prop_assert_eq!(broadcast_shape(&a, &b), reference_broadcast(&a, &b));
    }

    #[test]
    fn sum_of_add_gives_unit_gradients(data in proptest::collection::vec(-10.0f64..10.0, 1..24)) {
        let n = data.len();
        let mut tape = Tape::new();
        let a = tape.param(Tensor::new(vec![n], data.clone()).unwrap());
        let b = tape.param(Tensor::new(vec![n], data.iter().map(|v| v * 0.5).collect()).unwrap());
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        prop_assert!(tape.grad(a).unwrap().data().iter().all(|&g| g == 1.0));
        prop_assert!(tape.grad(b).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn reusing_a_leaf_doubles_its_gradient(data in proptest::collection::vec(-10.0f64..10.0, 1..24)) {
        let x = Tensor::new(vec![data.len()], data).unwrap();
        let grad_of = |twice: bool| {
            let mut tape = Tape::new();
            let v = tape.param(x.clone());
            let y = tape.mul(v, v).unwrap();
            let out = if twice { tape.add(y, y).unwrap() } else { y };
            let l = tape.sum(out).unwrap();
            tape.backward(l).unwrap();
            tape.grad(v).unwrap().clone()
        };
        let (once, twice) = (grad_of(false), grad_of(true));
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn forward_ops_stay_finite(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::uniform(&[2, 2, 3, 5, 5], -10.0, 10.0, &mut rng));
        let w = tape.leaf(Tensor::uniform(&[3, 2, 3, 3, 3], -10.0, 10.0, &mut rng));
        let y = tape.conv3d(x, w, None, [1; 3], [1; 3]).unwrap();
        let g = tape.leaf(Tensor::uniform(&[3], -10.0, 10.0, &mut rng));
        let b = tape.leaf(Tensor::uniform(&[3], -10.0, 10.0, &mut rng));
        let (y, _) = tape.batch_norm_train(y, g, b, 1e-5).unwrap();
        let y = tape.relu(y).unwrap();
        let y = tape.max_pool3d(y, [1, 3, 3], [1, 2, 2], [0, 1, 1]).unwrap();
        let y = tape.global_avg_pool(y).unwrap();
        let fw = tape.leaf(Tensor::uniform(&[3, 4], -10.0, 10.0, &mut rng));
        let fb = tape.leaf(Tensor::uniform(&[4], -10.0, 10.0, &mut rng));
        let logits = tape.linear(y, fw, fb).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[0, 3]).unwrap();
        prop_assert!(tape.value(loss).all_finite());
        prop_assert!(tape.value(loss).item().unwrap() >= 0.0);
    }

    #[test]
    fn same_padding_preserves_extent(k in prop::sample::select(vec![1usize, 3, 5]), t in 1usize..6, h in 1usize..7) {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, t, h, h]));
        let w = tape.leaf(Tensor::zeros(&[2, 1, k, k, k]));
        let y = tape.conv3d(x, w, None, [1; 3], [k / 2; 3]);
        // a kernel larger than the padded input is rejected, never silently clipped
        if let Ok(y) = y {
            prop_assert_eq!(tape.shape(y), &[1, 2, t, h, h][..]);
        }
    }

    #[test]
    fn batch_norm_output_is_standardized(seed in any::<u64>(), c in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::randn(&[3, c, 2, 4, 4], 3.0, &mut rng));
        let g = tape.leaf(Tensor::ones(&[c]));
        let b = tape.leaf(Tensor::zeros(&[c]));
        let (y, _) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
        let yv = tape.value(y);
        let inner = 2 * 4 * 4;
        for ch in 0..c {
            let vals: Vec<f64> = (0..3).flat_map(|n| yv.data()[(n * c + ch) * inner..(n * c + ch + 1) * inner].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative(seed in any::<u64>(), k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::uniform(&[4, k], -20.0, 20.0, &mut rng));
        let loss = tape.softmax_cross_entropy(l, &[0, 1, k - 1, 0]).unwrap();
        prop_assert!(tape.value(loss).item().unwrap() >= 0.0);
        let u = tape.leaf(Tensor::full(&[3, k], 0.7));
        let loss = tape.softmax_cross_entropy(u, &[0, 1, k - 1]).unwrap();
        prop_assert!((tape.value(loss).item().unwrap() - (k as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn max_pool_gradient_counts_windows(seed in any::<u64>(), t in 1usize..4, h in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(&[1, 2, t, h, h], 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let y = tape.max_pool3d(v, [1, 3, 3], [1, 2, 2], [0, 1, 1]).unwrap();
        let windows = tape.value(y).numel() as f64;
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        prop_assert_eq!(tape.grad(v).unwrap().sum_all(), windows);
        let (direct, _) = max_pool3d_forward(&x, [1, 3, 3], [1, 2, 2], [0, 1, 1]).unwrap();
        prop_assert_eq!(direct.numel() as f64, windows);
    }

    #[test]
    fn subsample_endpoints(t in 2usize..400, n in 2usize..16) {
        let idx = subsample_indices(t, n);
        prop_assert_eq!(idx.len(), n);
        prop_assert_eq!(idx[0], 0);
        prop_assert_eq!(idx[n - 1], t - 1);
        prop_assert!(idx.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn flip_is_an_involution(clip in clip_strategy()) {
        prop_assert_eq!(flip_horizontal(&flip_horizontal(&clip)), clip);
    }

    #[test]
    fn constant_clips_stay_constant(t in 1usize..10, h in 4usize..30, w in 4usize..30, rgb in any::<[u8; 3]>(), target in 8usize..40, seed in any::<u64>()) {
        let bytes: Vec<u8> = (0..t * h * w).flat_map(|_| rgb).collect();
        let clip = FrameClip::new(bytes, t, h, w, 10.0, "const").unwrap();
        let scaled = short_side_scale(&clip, target);
        prop_assert!(scaled.bytes().chunks(3).all(|p| p == rgb));
        let size = target.min(scaled.height()).min(scaled.width());
        let cropped = crop(&scaled, size, CropMode::Random(seed)).unwrap();
        prop_assert!(cropped.bytes().chunks(3).all(|p| p == rgb));
        prop_assert_eq!(flip_horizontal(&cropped), cropped);
    }

    #[test]
    fn transforms_emit_fixed_shape(clip in clip_strategy(), seed in any::<u64>()) {
        let cfg = tiny_cfg();
        let a = train_transform::<f32>(&clip, &cfg, seed).unwrap();
        prop_assert_eq!(a.shape(), &[3, 8, 10, 10][..]);
        prop_assert_eq!(&a, &train_transform::<f32>(&clip, &cfg, seed).unwrap());
        let v = val_transform::<f32>(&clip, &cfg).unwrap();
        prop_assert_eq!(v.shape(), &[3, 8, 10, 10][..]);
    }

    #[test]
    fn filter_active_is_idempotent(labels in proptest::collection::vec(0usize..6, 0..40)) {
        let vocab = ClassVocabulary::default();
        let entries: Vec<ManifestEntry> = labels.iter().enumerate().map(|(i, &l)| entry(LABELS[l], i + 1)).collect();
        let once = filter_active(&entries, &vocab);
        prop_assert_eq!(filter_active(&once, &vocab), once.clone());
        prop_assert!(once.iter().all(|e| vocab.is_active(&e.label)));
    }

    #[test]
    fn windows_stay_inside_the_clip(frames in 1usize..2000, fps in 5.0f64..60.0, secs in 0.5f64..8.0, seed in any::<u64>()) {
        let len = ((secs * fps).round() as usize).max(1);
        for mode in [WindowMode::Center, WindowMode::Random(seed)] {
            let r = sample_clip_window(frames, fps, secs, mode);
            prop_assert!(r.end <= frames);
            prop_assert_eq!(r.len(), len.min(frames));
        }
    }

    #[test]
    fn batches_are_a_permutation(n in 0usize..100, bs in 1usize..17, seed in any::<u64>()) {
        let batches = make_batches(n, bs, Some(seed)).unwrap();
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        prop_assert!(batches.iter().all(|b| b.len() <= bs && !b.is_empty()));
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn stats_ignore_row_order(mut rows in proptest::collection::vec((0usize..6, 1usize..400), 0..60), seed in any::<u64>()) {
        let vocab = ClassVocabulary::default();
        let make = |rows: &[(usize, usize)]| -> Vec<ManifestEntry> {
            rows.iter().enumerate().map(|(i, &(l, f))| ManifestEntry { clip_path: format!("c{i}"), ..entry(LABELS[l], f) }).collect()
        };
        let a = compute_stats(&make(&rows), &vocab, 30).unwrap();
        use rand::seq::SliceRandom;
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let b = compute_stats(&make(&rows), &vocab, 30).unwrap();
        prop_assert_eq!(&a, &b);
        for c in &a.classes {
            prop_assert_eq!(c.histogram.iter().sum::<usize>(), c.count);
        }
    }

    #[test]
    fn metrics_ignore_sample_order_and_class_names(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..300), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let summary = |pairs: &[(usize, usize)]| {
            let mut cm = ConfusionMatrix::new(4);
            let (t, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            cm.accumulate(&t, &p).unwrap();
            [cm.accuracy().unwrap(), cm.macro_precision().unwrap(), cm.macro_recall().unwrap(), cm.macro_f1().unwrap()]
        };
        let base = summary(&pairs);
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rng);
        let mut perm = [0usize, 1, 2, 3];
        perm.shuffle(&mut rng);
        let relabeled: Vec<(usize, usize)> = pairs.iter().map(|&(t, p)| (perm[t], perm[p])).collect();
        for other in [summary(&shuffled), summary(&relabeled)] {
            for (a, b) in base.iter().zip(other) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn per_class_f1_is_bracketed(rows in proptest::collection::vec(proptest::collection::vec(0u64..50, 4), 4)) {
        let cm = ConfusionMatrix::from_rows(&rows).unwrap();
        for c in 0..4 {
            let (p, r, f) = (cm.class_precision(c), cm.class_recall(c), cm.class_f1(c));
            prop_assert!(f >= p.min(r) - 1e-12 && f <= p.max(r) + 1e-12);
        }
        let diag: Vec<Vec<u64>> = (0..4).map(|i| (0..4).map(|j| if i == j { rows[i][j] + 1 } else { 0 }).collect()).collect();
        let perfect = ConfusionMatrix::from_rows(&diag).unwrap();
        prop_assert_eq!(perfect.accuracy().unwrap(), 1.0);
        prop_assert_eq!(perfect.macro_f1().unwrap(), 1.0);
        prop_assert_eq!(perfect.macro_precision().unwrap(), 1.0);
        prop_assert_eq!(perfect.macro_recall().unwrap(), 1.0);
    }
}
