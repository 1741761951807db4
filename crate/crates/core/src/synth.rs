//! Procedural four-class motion clips and scripted long videos.
//!
//! Every class draws the same bright rectangle over a smooth random texture
//! and differs only in how things move:
//!
//! * `crane_out`: the rectangle sweeps from the frame center toward a corner, repeatedly
//! * `cutting_and_to_processing`: the rectangle bobs up and down in place
//! * `driving`: the whole texture scrolls horizontally with wrap-around, rectangle included
//! * `processing`: the rectangle shuttles left and right, shedding short pieces

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{assign_splits, write_manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, derive_seed_path};
use crate::video::{write_rvf, FrameClip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionClass {
    CraneOut,
    CuttingAndToProcessing,
    Driving,
    Processing,
}

impl MotionClass {
    pub const ALL: [MotionClass; 4] =
        [MotionClass::CraneOut, MotionClass::CuttingAndToProcessing, MotionClass::Driving, MotionClass::Processing];

    pub fn label(self) -> &'static str {
        match self {
            MotionClass::CraneOut => "crane_out",
            MotionClass::CuttingAndToProcessing => "cutting_and_to_processing",
            MotionClass::Driving => "driving",
            MotionClass::Processing => "processing",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label().eq_ignore_ascii_case(label.trim()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub class: MotionClass,
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub duration_seconds: f64,
    pub seed: u64,
    /// Standard deviation of additive pixel noise as a fraction of 255.
    pub noise_level: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            class: MotionClass::Driving,
            width: 64,
            height: 64,
            fps: 16.0,
            duration_seconds: 4.0,
            seed: 0,
            noise_level: 0.02,
        }
    }
}

impl SynthSpec {
    pub fn frame_count(&self) -> usize {
        (self.duration_seconds * self.fps).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::InvalidConfig(format!("synthetic frames must be at least 16x16, got {}x{}", self.width, self.height)));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::InvalidConfig(format!("fps must be positive, got {}", self.fps)));
        }
        if !(self.duration_seconds.is_finite() && self.frame_count() >= 1) {
            return Err(Error::InvalidConfig(format!("duration {} s yields no frames", self.duration_seconds)));
        }
        if !(0.0..=0.5).contains(&self.noise_level) {
            return Err(Error::InvalidConfig(format!("noise level {} outside [0, 0.5]", self.noise_level)));
        }
        Ok(())
    }
}

struct Texture {
    w: usize,
    h: usize,
    rgb: Vec<u8>,
}

impl Texture {
    fn generate(w: usize, h: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(70.0..130.0));
        let waves: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..3)
            .map(|_| {
                let fx = rng.random_range(1..=4) as f64 * TAU / w as f64;
                let fy = rng.random_range(1..=4) as f64 * TAU / h as f64;
                let amp = rng.random_range(12.0..28.0);
                let phase = rng.random_range(0.0..TAU);
                let tint = std::array::from_fn(|_| rng.random_range(0.6..1.0));
                (fx, fy, amp, phase, tint)
            })
            .collect();
        let (bw, bh) = (w.div_ceil(8), h.div_ceil(8));
        let blocks: Vec<f64> = (0..bw * bh).map(|_| rng.random_range(-12.0..12.0)).collect();
        let mut rgb = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let b = blocks[(y / 8) * bw + x / 8];
                for (c, &base_c) in base.iter().enumerate() {
                    let mut v = base_c + b;
                    for &(fx, fy, amp, phase, tint) in &waves {
                        v += amp * tint[c] * (fx * x as f64 + phase).sin() * (fy * y as f64 + 0.5 * phase).cos();
                    }
                    rgb.push(v.clamp(20.0, 190.0) as u8);
                }
            }
        }
        Texture { w, h, rgb }
    }

    /// Background shifted left by `offset` pixels with wrap-around.
    fn scrolled(&self, offset: usize, out: &mut Vec<u8>) {
        out.clear();
        let off = offset % self.w;
        for y in 0..self.h {
            let row = &self.rgb[y * self.w * 3..(y + 1) * self.w * 3];
            out.extend_from_slice(&row[off * 3..]);
            out.extend_from_slice(&row[..off * 3]);
        }
    }
}

/// Every class shows the same object; only its motion differs.
const OBJECT_RGB: [u8; 3] = [225, 200, 90];
const PIECE_RGB: [u8; 3] = [170, 150, 70];

fn object_size(w: usize, h: usize) -> (usize, usize) {
    ((w / 6).max(3), (h / 6).max(3))
}

fn fill_rect(frame: &mut [u8], w: usize, h: usize, x0: f64, y0: f64, rw: usize, rh: usize, rgb: [u8; 3]) {
    let xs = x0.round() as i64;
    let ys = y0.round() as i64;
    for y in ys.max(0)..(ys + rh as i64).min(h as i64) {
        for x in xs.max(0)..(xs + rw as i64).min(w as i64) {
            let o = (y as usize * w + x as usize) * 3;
            frame[o..o + 3].copy_from_slice(&rgb);
        }
    }
}

/// Renders `n` frames of one motion class, continuing the scroll `offset`.
fn render_class(
    class: MotionClass,
    n: usize,
    fps: f64,
    texture: &Texture,
    offset: &mut usize,
    seed: u64,
    noise_level: f64,
) -> Vec<u8> {
    let (w, h) = (texture.w, texture.h);
    let (wf, hf) = (w as f64, h as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(n * w * h * 3);
    let mut frame = Vec::with_capacity(w * h * 3);

    match class {
        MotionClass::CraneOut => {
            let (rw, rh) = object_size(w, h);
            let cx = if rng.random_bool(0.5) { 0.12 } else { 0.88 };
            let cy = if rng.random_bool(0.5) { 0.12 } else { 0.88 };
            let start = (wf / 2.0, hf / 2.0);
            let end = (cx * wf, cy * hf);
            let period = rng.random_range(4.0..5.0);
            let phase = rng.random_range(0.0..1.0);
            for f in 0..n {
                // repeated outward sweeps, so any window looks alike regardless of clip length
                let p = (f as f64 / fps / period + phase).fract();
                texture.scrolled(*offset, &mut frame);
                let x = start.0 + (end.0 - start.0) * p - rw as f64 / 2.0;
                let y = start.1 + (end.1 - start.1) * p - rh as f64 / 2.0;
                fill_rect(&mut frame, w, h, x, y, rw, rh, OBJECT_RGB);
                frames.extend_from_slice(&frame);
            }
        }
        MotionClass::CuttingAndToProcessing => {
            let (bw, bh) = object_size(w, h);
            let x = rng.random_range(0.25..0.75) * wf;
            let freq = rng.random_range(0.3..0.45);
            let phase = rng.random_range(0.0..TAU);
            let amp = hf / 6.0;
            for f in 0..n {
                texture.scrolled(*offset, &mut frame);
                let y = hf / 2.0 + amp * (TAU * freq * f as f64 / fps + phase).sin() - bh as f64 / 2.0;
                fill_rect(&mut frame, w, h, x, y, bw, bh, OBJECT_RGB);
                frames.extend_from_slice(&frame);
            }
        }
        MotionClass::Driving => {
            let speed = [1usize, 2][rng.random_range(0..2)];
            let leftward = rng.random_bool(0.5);
            // a landmark fixed in the scene
            let (ow, oh) = object_size(w, h);
            let tx = rng.random_range(0..w) as i64;
            let y0 = rng.random_range(0.3..0.6) * hf;
            for _ in 0..n {
                texture.scrolled(*offset, &mut frame);
                let sx = (tx - *offset as i64).rem_euclid(w as i64) as f64;
                for x in [sx, sx - wf] {
                    fill_rect(&mut frame, w, h, x, y0, ow, oh, OBJECT_RGB);
                }
                frames.extend_from_slice(&frame);
                *offset = (if leftward { *offset + speed } else { *offset + w - speed }) % w;
            }
        }
        MotionClass::Processing => {
            let (ps, ph) = object_size(w, h);
            let x0 = rng.random_range(0.3..0.7) * wf;
            let y0 = rng.random_range(0.3..0.6) * hf;
            let freq = rng.random_range(0.6..0.8);
            let amp = wf / 5.0;
            let spawn_every = (0.75 * fps).round().max(1.0) as usize;
            let life = (1.5 * fps).round().max(1.0) as usize;
            for f in 0..n {
                texture.scrolled(*offset, &mut frame);
                let t = f as f64 / fps;
                // triangle wave in [-1, 1]
                let tri = 4.0 * (freq * t - (freq * t + 0.5).floor()).abs() - 1.0;
                let px = x0 + amp * tri;
                let first = f.saturating_sub(life - 1).div_ceil(spawn_every) * spawn_every;
                for s in (first..=f).step_by(spawn_every) {
                    let age = (f - s) as f64;
                    fill_rect(&mut frame, w, h, x0 - ps as f64, y0 + ph as f64 + age, 2 * ps, 2, PIECE_RGB);
                }
                fill_rect(&mut frame, w, h, px - ps as f64 / 2.0, y0, ps, ph, OBJECT_RGB);
                frames.extend_from_slice(&frame);
            }
        }
    }

    if noise_level > 0.0 {
        let normal = Normal::new(0.0, noise_level * 255.0).expect("noise std is finite");
        for b in frames.iter_mut() {
            let v = *b as f64 + normal.sample(&mut rng);
            *b = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    frames
}

pub fn generate_clip(spec: &SynthSpec) -> Result<FrameClip> {
    spec.validate()?;
    let texture = Texture::generate(spec.width, spec.height, derive_seed(spec.seed, 0));
    let mut offset = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 1)).random_range(0..spec.width);
    let n = spec.frame_count();
    let frames = render_class(spec.class, n, spec.fps, &texture, &mut offset, derive_seed(spec.seed, 2), spec.noise_level);
    FrameClip::new(frames, n, spec.height, spec.width, spec.fps, format!("synth:{}:{}", spec.class.label(), spec.seed))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub manifest_path: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// `(clip_path, sha256)` per clip, in manifest order.
    pub checksums: Vec<(String, String)>,
}

/// Writes `per_class` clips of each class under `out_dir/clips` with a
/// seeded 80/20 split, plus `out_dir/manifest.csv`. Durations vary in
/// quarter seconds between 2 and 8 s.
pub fn generate_dataset(out_dir: &Path, per_class: usize, template: &SynthSpec, seed: u64) -> Result<GeneratedDataset> {
    if per_class < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 clips per class, got {per_class}")));
    }
    template.validate()?;
    let clip_dir = out_dir.join("clips");
    fs::create_dir_all(&clip_dir).map_err(|e| Error::io(format!("creating {}", clip_dir.display()), e))?;
    let mut entries = Vec::new();
    let mut checksums = Vec::new();
    for (ci, class) in MotionClass::ALL.into_iter().enumerate() {
        for i in 0..per_class {
            let clip_seed = derive_seed_path(seed, &[ci as u64, i as u64]);
            let quarters = ChaCha8Rng::seed_from_u64(clip_seed).random_range(8..=32);
            let spec = SynthSpec { class, duration_seconds: quarters as f64 / 4.0, seed: clip_seed, ..template.clone() };
            let clip = generate_clip(&spec)?;
            let rel = format!("clips/{}_{i:03}.rvf", class.label());
            write_rvf(&out_dir.join(&rel), &clip)?;
            let bytes = fs::read(out_dir.join(&rel)).map_err(|e| Error::io(format!("reading back {rel}"), e))?;
            checksums.push((rel.clone(), sha256_hex(&bytes)));
            entries.push(ManifestEntry {
                clip_path: rel,
                label: class.label().to_string(),
                frame_count: clip.num_frames(),
                fps: spec.fps,
                split: Split::Train,
            });
        }
    }
    assign_splits(&mut entries, derive_seed(seed, u64::MAX));
    let manifest_path = out_dir.join("manifest.csv");
    write_manifest(&manifest_path, &entries)?;
    Ok(GeneratedDataset { manifest_path, entries, checksums })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptSegment {
    pub class: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TimelineScript {
    pub segments: Vec<ScriptSegment>,
}

impl TimelineScript {
    pub fn new(segments: &[(MotionClass, f64)]) -> Self {
        TimelineScript {
            segments: segments.iter().map(|&(c, s)| ScriptSegment { class: c.label().into(), seconds: s }).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading script {}", path.display()), e))?;
        let script: TimelineScript = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        script.validate()?;
        Ok(script)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidConfig("timeline script has no segments".into()));
        }
        for s in &self.segments {
            if MotionClass::from_label(&s.class).is_none() {
                return Err(Error::InvalidConfig(format!("script class {:?} is not a synthetic class", s.class)));
            }
            if !(s.seconds.is_finite() && s.seconds > 0.0) {
                return Err(Error::InvalidConfig(format!("segment duration {} must be positive", s.seconds)));
            }
        }
        Ok(())
    }

    pub fn total_seconds(&self) -> f64 {
        self.segments.iter().map(|s| s.seconds).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSegment {
    pub class: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub start_s: f64,
    pub end_s: f64,
}

/// Renders the script over one shared background; segment `k` ends at frame
/// `round(fps * cumulative seconds through k)`.
pub fn generate_long_video(script: &TimelineScript, template: &SynthSpec, seed: u64) -> Result<(FrameClip, Vec<TruthSegment>)> {
    script.validate()?;
    template.validate()?;
    let (w, h, fps) = (template.width, template.height, template.fps);
    let texture = Texture::generate(w, h, derive_seed(seed, 0));
    let mut offset = 0;
    let mut frames = Vec::new();
    let mut truth = Vec::new();
    let mut cum = 0.0;
    let mut start = 0;
    for (k, seg) in script.segments.iter().enumerate() {
        cum += seg.seconds;
        let end = (cum * fps).round() as usize;
        if end <= start {
            return Err(Error::InvalidConfig(format!("segment {k} is shorter than one frame")));
        }
        let class = MotionClass::from_label(&seg.class).expect("validated");
        let seg_seed = derive_seed_path(seed, &[1, k as u64]);
        frames.extend(render_class(class, end - start, fps, &texture, &mut offset, seg_seed, template.noise_level));
        truth.push(TruthSegment {
            class: class.label().into(),
            start_frame: start,
            end_frame: end,
            start_s: start as f64 / fps,
            end_s: end as f64 / fps,
        });
        start = end;
    }
    let clip = FrameClip::new(frames, start, h, w, fps, format!("synth-timeline:{seed}"))?;
    Ok((clip, truth))
}
