use forestvid::dataset::{compute_stats, load_manifest, ClassVocabulary, Split};
use forestvid::synth::{generate_clip, generate_dataset, generate_long_video, MotionClass, SynthSpec, TimelineScript};
use forestvid::video::{read_rvf, FrameClip};

/// Mean absolute difference of consecutive frames on a 4x4 grid of cells,
/// sorted so the feature ignores where in the frame the motion happens.
fn mad_profile(clip: &FrameClip) -> Vec<f64> {
    let (t, h, w) = (clip.num_frames(), clip.height(), clip.width());
    let mut cells = vec![0.0; 16];
    for f in 1..t {
        for y in 0..h {
            for x in 0..w {
                let (a, b) = (clip.pixel(f, y, x), clip.pixel(f - 1, y, x));
                let d: f64 = (0..3).map(|c| (a[c] as f64 - b[c] as f64).abs()).sum();
                cells[(y * 4 / h) * 4 + x * 4 / w] += d;
            }
        }
    }
    let norm = ((t - 1) * h * w * 3) as f64 / 16.0;
    let mut v: Vec<f64> = cells.into_iter().map(|c| c / norm).collect();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v
}

#[test]
fn five_nearest_neighbours_separate_the_classes() {
    let mut samples = Vec::new();
    for (ci, class) in MotionClass::ALL.into_iter().enumerate() {
        for i in 0..10 {
            let spec = SynthSpec { class, seed: 1000 + (ci * 10 + i) as u64, ..SynthSpec::default() };
            samples.push((mad_profile(&generate_clip(&spec).unwrap()), ci));
        }
    }
    let mut correct = 0;
    for (i, (f, label)) in samples.iter().enumerate() {
        let mut dist: Vec<(f64, usize)> = samples
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, (g, l))| (f.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), *l))
            .collect();
        dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut votes = [0; 4];
        for &(_, l) in &dist[..5] {
            votes[l] += 1;
        }
        let best = (0..4).max_by_key(|&c| (votes[c], std::cmp::Reverse(c))).unwrap();
        correct += usize::from(best == *label);
    }
    let acc = correct as f64 / samples.len() as f64;
    assert!(acc >= 0.9, "5-NN leave-one-out accuracy {acc}");
}

#[test]
fn every_clip_moves() {
    for class in MotionClass::ALL {
        for seed in 0..5 {
            let clip = generate_clip(&SynthSpec { class, seed, noise_level: 0.0, ..SynthSpec::default() }).unwrap();
            let first = clip.frame(0);
            assert!((1..clip.num_frames()).any(|f| clip.frame(f) != first), "{class:?} seed {seed} is static");
        }
    }
}

#[test]
fn dataset_is_reproducible_and_seed_sensitive() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let ga = generate_dataset(a.path(), 3, &SynthSpec::default(), 7).unwrap();
    let gb = generate_dataset(b.path(), 3, &SynthSpec::default(), 7).unwrap();
    let gc = generate_dataset(c.path(), 3, &SynthSpec::default(), 8).unwrap();
    assert_eq!(ga.checksums, gb.checksums);
    assert_eq!(std::fs::read(&ga.manifest_path).unwrap(), std::fs::read(&gb.manifest_path).unwrap());
    assert!(ga.checksums.iter().zip(&gc.checksums).all(|(x, y)| x.1 != y.1));
}

#[test]
fn generated_manifest_is_balanced_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate_dataset(dir.path(), 8, &SynthSpec::default(), 7).unwrap();
    assert_eq!(g.entries.len(), 32);
    let vocab = ClassVocabulary::default();
    let m = load_manifest(&g.manifest_path, &vocab).unwrap();
    let stats = compute_stats(&m.entries, &vocab, 16).unwrap();
    for label in vocab.active() {
        assert_eq!(stats.count(label), Some(8));
        let val = m.entries.iter().filter(|e| &e.label == label && e.split == Split::Val).count();
        assert!(val >= 1 && val < 8);
    }
    for e in &m.entries {
        let clip = read_rvf(&m.resolve(e)).unwrap();
        assert_eq!(clip.num_frames(), e.frame_count);
        let secs = e.frame_count as f64 / e.fps;
        assert!((2.0..=8.0).contains(&secs));
    }
}

#[test]
fn long_video_boundaries_follow_the_script() {
    let spec = SynthSpec { fps: 30.0, ..SynthSpec::default() };
    let script = TimelineScript::new(&[(MotionClass::Driving, 4.0), (MotionClass::CraneOut, 4.0)]);
    let (clip, truth) = generate_long_video(&script, &spec, 3).unwrap();
    assert_eq!(clip.num_frames(), 240);
    assert_eq!((truth[0].start_frame, truth[0].end_frame), (0, 120));
    assert_eq!((truth[1].start_frame, truth[1].end_frame), (120, 240));

    let single = TimelineScript::new(&[(MotionClass::Processing, 2.5)]);
    let (clip, truth) = generate_long_video(&single, &SynthSpec::default(), 3).unwrap();
    assert_eq!(truth.len(), 1);
    assert_eq!(truth[0].end_frame, clip.num_frames());
}

#[test]
fn long_video_frame_total_is_the_sum_of_segments() {
    let mut state = 17u64;
    for _ in 0..20 {
        let segs: Vec<(MotionClass, f64)> = (0..1 + (state % 4) as usize)
            .map(|k| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (MotionClass::ALL[(state >> 33) as usize % 4], 0.25 * (1 + (state >> 40) % 12) as f64 + k as f64 * 0.1)
            })
            .collect();
        let (clip, truth) = generate_long_video(&TimelineScript::new(&segs), &SynthSpec::default(), state).unwrap();
        let total: usize = truth.iter().map(|s| s.end_frame - s.start_frame).sum();
        assert_eq!(total, clip.num_frames());
        assert!(truth.windows(2).all(|p| p[0].end_frame == p[1].start_frame));
    }
}
