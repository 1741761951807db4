use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FrameClip;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformConfig {
    pub num_frames: usize,
    /// Inclusive range of the random short-side target during training.
    pub train_scale_range: [usize; 2],
    pub crop_size: usize,
    pub hflip_probability: f64,
    pub val_scale: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig {
            num_frames: 8,
            train_scale_range: [256, 320],
            crop_size: 244,
            hflip_probability: 0.5,
            val_scale: 256,
            mean: [0.45; 3],
            std: [0.225; 3],
        }
    }
}

impl TransformConfig {
    /// Settings for 64x64 synthetic clips.
    pub fn small() -> Self {
        TransformConfig { train_scale_range: [64, 80], crop_size: 56, val_scale: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.train_scale_range;
        if self.num_frames == 0 || self.crop_size == 0 || lo == 0 || lo > hi {
            return Err(Error::InvalidConfig(format!("bad frame/scale settings in {self:?}")));
        }
        if self.crop_size > lo.min(self.val_scale) {
            return Err(Error::InvalidConfig(format!(
                "crop {} exceeds smallest scaled short side {}",
                self.crop_size,
                lo.min(self.val_scale)
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_probability) {
            return Err(Error::InvalidConfig(format!("flip probability {} outside [0, 1]", self.hflip_probability)));
        }
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidConfig(format!("normalization mean {:?} std {:?}", self.mean, self.std)));
        }
        Ok(())
    }
}

/// `round(i * (t - 1) / (n - 1))` with halves rounded up; `[0]` when `n == 1`.
pub fn subsample_indices(t: usize, n: usize) -> Vec<usize> {
    if n <= 1 {
        return vec![0; n];
    }
    let d = n - 1;
    (0..n).map(|i| (2 * i * (t - 1) + d) / (2 * d)).collect()
}

pub fn uniform_temporal_subsample(clip: &FrameClip, n: usize) -> FrameClip {
    let idx = subsample_indices(clip.num_frames(), n);
    let mut frames = Vec::with_capacity(idx.len() * clip.frame_len());
    for &i in &idx {
        frames.extend_from_slice(clip.frame(i));
    }
    clip.with_frames(frames, idx.len(), clip.height(), clip.width())
}

fn scaled_dims(h: usize, w: usize, target: usize) -> (usize, usize) {
    let round = |long: usize, short: usize| (2 * long * target + short) / (2 * short);
    if h <= w {
        (target, round(w, h).max(1))
    } else {
        (round(h, w).max(1), target)
    }
}

/// Source sample positions for bilinear resampling with half-pixel centers.
fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Aspect-preserving bilinear resize so the short side equals `target`.
pub fn short_side_scale(clip: &FrameClip, target: usize) -> FrameClip {
    let target = target.max(1);
    let (h, w) = (clip.height(), clip.width());
    let (oh, ow) = scaled_dims(h, w, target);
    if (oh, ow) == (h, w) {
        return clip.clone();
    }
    let ys = taps(h, oh);
    let xs = taps(w, ow);
    let mut out = Vec::with_capacity(clip.num_frames() * oh * ow * 3);
    for t in 0..clip.num_frames() {
        let f = clip.frame(t);
        let px = |y: usize, x: usize, c: usize| f[(y * w + x) * 3 + c] as f32;
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for c in 0..3 {
                    let top = px(y0, x0, c) + (px(y0, x1, c) - px(y0, x0, c)) * fx;
                    let bot = px(y1, x0, c) + (px(y1, x1, c) - px(y1, x0, c)) * fx;
                    let v = top + (bot - top) * fy;
                    out.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    clip.with_frames(out, clip.num_frames(), oh, ow)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    Center,
    Random(u64),
}

pub fn center_crop_offsets(h: usize, w: usize, size: usize) -> (usize, usize) {
    ((h - size) / 2, (w - size) / 2)
}

/// Square spatial crop; the same window is cut from every frame.
pub fn crop(clip: &FrameClip, size: usize, mode: CropMode) -> Result<FrameClip> {
    let (h, w) = (clip.height(), clip.width());
    if size == 0 || h < size || w < size {
        return Err(Error::InvalidArgument(format!("cannot crop {size}x{size} from {h}x{w} frames")));
    }
    let (oy, ox) = match mode {
        CropMode::Center => center_crop_offsets(h, w, size),
        CropMode::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (rng.random_range(0..=h - size), rng.random_range(0..=w - size))
        }
    };
    if (size, size) == (h, w) {
        return Ok(clip.clone());
    }
    let mut out = Vec::with_capacity(clip.num_frames() * size * size * 3);
    for t in 0..clip.num_frames() {
        let f = clip.frame(t);
        for y in oy..oy + size {
            let row = (y * w + ox) * 3;
            out.extend_from_slice(&f[row..row + size * 3]);
        }
    }
    Ok(clip.with_frames(out, clip.num_frames(), size, size))
}

/// Mirrors every frame left to right.
pub fn flip_horizontal(clip: &FrameClip) -> FrameClip {
    let w = clip.width();
    let mut out = clip.bytes().to_vec();
    for row in out.chunks_exact_mut(w * 3) {
        for x in 0..w / 2 {
            let (a, b) = (x * 3, (w - 1 - x) * 3);
            for c in 0..3 {
                row.swap(a + c, b + c);
            }
        }
    }
    clip.with_frames(out, clip.num_frames(), clip.height(), w)
}

/// Flips the whole clip with probability `p`, decided by `seed`.
pub fn horizontal_flip(clip: &FrameClip, p: f64, seed: u64) -> FrameClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.random::<f64>() < p {
        flip_horizontal(clip)
    } else {
        clip.clone()
    }
}

/// `(byte / 255 - mean_c) / std_c`, laid out channels-first `[3, T, H, W]`.
pub fn normalize<S: Scalar>(clip: &FrameClip, mean: [f64; 3], std: [f64; 3]) -> Tensor<S> {
    let (t, h, w) = (clip.num_frames(), clip.height(), clip.width());
    let plane = t * h * w;
    let mut out = vec![S::zero(); 3 * plane];
    let lut: Vec<[S; 256]> = (0..3)
        .map(|c| std::array::from_fn(|b| S::lit((b as f64 / 255.0 - mean[c]) / std[c])))
        .collect();
    for (i, px) in clip.bytes().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + i] = lut[c][px[c] as usize];
        }
    }
    Tensor::from_parts(vec![3, t, h, w], out)
}

/// The short-side target `train_transform` draws for `seed`.
pub fn sample_scale_target(cfg: &TransformConfig, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.random_range(cfg.train_scale_range[0]..=cfg.train_scale_range[1])
}

/// Subsample, random short-side scale, random crop, random flip, normalize.
pub fn train_transform<S: Scalar>(clip: &FrameClip, cfg: &TransformConfig, seed: u64) -> Result<Tensor<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.random_range(cfg.train_scale_range[0]..=cfg.train_scale_range[1]);
    let crop_seed = rng.next_u64();
    let flip_seed = rng.next_u64();
    let c = uniform_temporal_subsample(clip, cfg.num_frames);
    let c = short_side_scale(&c, target);
    let c = crop(&c, cfg.crop_size, CropMode::Random(crop_seed))?;
    let c = horizontal_flip(&c, cfg.hflip_probability, flip_seed);
    Ok(normalize(&c, cfg.mean, cfg.std))
}

/// Subsample, fixed short-side scale, center crop, normalize.
pub fn val_transform<S: Scalar>(clip: &FrameClip, cfg: &TransformConfig) -> Result<Tensor<S>> {
    cfg.validate()?;
    let c = uniform_temporal_subsample(clip, cfg.num_frames);
    let c = short_side_scale(&c, cfg.val_scale);
    let c = crop(&c, cfg.crop_size, CropMode::Center)?;
    Ok(normalize(&c, cfg.mean, cfg.std))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize, h: usize, w: usize) -> FrameClip {
        let bytes = (0..t * h * w * 3).map(|i| (i * 31 % 251) as u8).collect();
        FrameClip::new(bytes, t, h, w, 30.0, "ramp").unwrap()
    }

    fn constant(t: usize, h: usize, w: usize, rgb: [u8; 3]) -> FrameClip {
        let bytes = (0..t * h * w).flat_map(|_| rgb).collect();
        FrameClip::new(bytes, t, h, w, 30.0, "const").unwrap()
    }

    #[test]
    fn subsample_index_examples() {
        assert_eq!(subsample_indices(8, 8), (0..8).collect::<Vec<_>>());
        assert_eq!(subsample_indices(15, 8), vec![0, 2, 4, 6, 8, 10, 12, 14]);
        let idx = subsample_indices(120, 8);
        assert_eq!((idx[0], idx[7]), (0, 119));
        assert!(idx.windows(2).all(|p| p[0] < p[1]));
        assert_eq!(subsample_indices(5, 1), vec![0]);
        assert_eq!(subsample_indices(2, 4), vec![0, 0, 1, 1]);
        // 1 * 3 / 2 = 1.5 rounds up
        assert_eq!(subsample_indices(4, 3), vec![0, 2, 3]);
    }

    #[test]
    fn scaled_dimensions() {
        assert_eq!(scaled_dims(1080, 1920, 256), (256, 455));
        assert_eq!(scaled_dims(1920, 1080, 256), (455, 256));
        assert_eq!(scaled_dims(256, 256, 256), (256, 256));
        assert_eq!(scaled_dims(64, 64, 80), (80, 80));
    }

    #[test]
    fn scaling_identity_and_constant() {
        let c = ramp(2, 8, 8);
        assert_eq!(short_side_scale(&c, 8), c);
        let k = constant(2, 9, 13, [10, 200, 77]);
        let s = short_side_scale(&k, 20);
        assert_eq!((s.height(), s.width()), (20, 29));
        assert!(s.bytes().chunks(3).all(|p| p == [10, 200, 77]));
    }

    #[test]
    fn crop_offsets_and_identity() {
        assert_eq!(center_crop_offsets(256, 455, 244), (6, 105));
        let c = ramp(2, 6, 6);
        assert_eq!(crop(&c, 6, CropMode::Random(3)).unwrap(), c);
        assert!(crop(&c, 7, CropMode::Center).is_err());
        let a = crop(&ramp(2, 20, 30), 8, CropMode::Random(42)).unwrap();
        let b = crop(&ramp(2, 20, 30), 8, CropMode::Random(42)).unwrap();
        assert_eq!(a, b);
        let cc = crop(&c, 2, CropMode::Center).unwrap();
        assert_eq!(cc.pixel(1, 0, 0), c.pixel(1, 2, 2));
    }

    #[test]
    fn flips() {
        let c = ramp(3, 4, 5);
        assert_eq!(horizontal_flip(&c, 0.0, 9), c);
        let f = horizontal_flip(&c, 1.0, 9);
        assert_eq!(f.pixel(2, 1, 4), c.pixel(2, 1, 0));
        assert_eq!(horizontal_flip(&f, 1.0, 1), c);
    }

    #[test]
    fn normalization() {
        let k = constant(1, 1, 1, [255, 0, 51]);
        let t: Tensor<f64> = normalize(&k, [0.45; 3], [0.225; 3]);
        assert!((t.data()[0] - 0.55 / 0.225).abs() < 1e-12);
        let t: Tensor<f64> = normalize(&k, [0.0; 3], [1.0; 3]);
        assert_eq!(t.data(), &[1.0, 0.0, 51.0 / 255.0]);
        let t: Tensor<f32> = normalize(&ramp(2, 3, 4), [0.0; 3], [1.0; 3]);
        assert_eq!(t.shape(), &[3, 2, 3, 4]);
    }

    #[test]
    fn transform_shapes_and_determinism() {
        let cfg = TransformConfig::small();
        let c = ramp(37, 64, 64);
        let a: Tensor<f32> = train_transform(&c, &cfg, 5).unwrap();
        let b: Tensor<f32> = train_transform(&c, &cfg, 5).unwrap();
        assert_eq!(a.shape(), &[3, 8, 56, 56]);
        assert_eq!(a, b);
        let v: Tensor<f32> = val_transform(&c, &cfg).unwrap();
        assert_eq!(v, val_transform(&c, &cfg).unwrap());
        assert_eq!(v.shape(), &[3, 8, 56, 56]);
    }

    #[test]
    fn config_validation() {
        TransformConfig::default().validate().unwrap();
        TransformConfig::small().validate().unwrap();
        let bad = TransformConfig { crop_size: 300, ..TransformConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TransformConfig { std: [0.2, 0.0, 0.2], ..TransformConfig::default() };
        assert!(bad.validate().is_err());
    }
}
