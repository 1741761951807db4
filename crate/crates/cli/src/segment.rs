//! Sliding-window classification of long videos into labeled segments.

use std::fmt::Write as _;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use forestvid::nn::softmax;
use forestvid::train::{stack, Classifier};
use forestvid::video::{val_transform, FrameClip, TransformConfig};
use forestvid::{Error, Result, Tensor};

/// Windows run through the model together.
const WINDOW_BATCH: usize = 8;

pub const LABEL_NOTE: &str =
    "segments carry only the four modeled work elements; non_productive and other_crane_movement time is attributed to the nearest of them";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub window_seconds: f64,
    pub stride_seconds: f64,
    /// Odd width of the label smoothing filter; 1 disables it.
    pub smoothing: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig { window_seconds: 4.0, stride_seconds: 1.0, smoothing: 3 }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_seconds.is_finite() && self.window_seconds > 0.0) {
            return Err(Error::InvalidConfig(format!("window {} s must be positive", self.window_seconds)));
        }
        if !(self.stride_seconds > 0.0 && self.stride_seconds <= self.window_seconds) {
            return Err(Error::InvalidConfig(format!(
                "stride {} s must be positive and at most the window",
                self.stride_seconds
            )));
        }
        if self.smoothing == 0 || self.smoothing % 2 == 0 {
            return Err(Error::InvalidConfig(format!("smoothing width {} must be odd", self.smoothing)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowPrediction {
    pub start_frame: usize,
    pub end_frame: usize,
    pub mid_s: f64,
    pub class: usize,
    /// Largest softmax probability.
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_s: f64,
    pub end_s: f64,
    pub class: String,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentTimeline {
    pub note: String,
    pub duration_s: f64,
    pub segments: Vec<Segment>,
}

/// Frame ranges of the sliding windows. A clip shorter than one window is
/// covered by a single whole-clip window.
pub fn window_ranges(total_frames: usize, fps: f64, cfg: &SegmenterConfig) -> Vec<Range<usize>> {
    let len = ((cfg.window_seconds * fps).round() as usize).max(1);
    let stride = ((cfg.stride_seconds * fps).round() as usize).max(1);
    if total_frames <= len {
        return vec![0..total_frames];
    }
    (0..=total_frames - len).step_by(stride).map(|s| s..s + len).collect()
}

/// Sliding mode filter over class labels. The center label wins ties, and
/// the filter narrows at the ends.
pub fn smooth_labels(labels: &[usize], width: usize) -> Vec<usize> {
    let half = width / 2;
    (0..labels.len())
        .map(|i| {
            let win = &labels[i.saturating_sub(half)..(i + half + 1).min(labels.len())];
            let count = |l: usize| win.iter().filter(|&&x| x == l).count();
            let center = labels[i];
            let mut best = center;
            for &l in win {
                if count(l) > count(best) {
                    best = l;
                }
            }
            best
        })
        .collect()
}

/// Merges smoothed window labels into segments tiling `[0, duration]`;
/// a boundary sits halfway between the midpoints of two differing windows.
pub fn build_timeline(
    windows: &[WindowPrediction],
    smoothed: &[usize],
    duration_s: f64,
    class_names: &[String],
) -> Result<SegmentTimeline> {
    if windows.is_empty() || windows.len() != smoothed.len() {
        return Err(Error::InvalidArgument("need one smoothed label per window".into()));
    }
    if let Some(&bad) = smoothed.iter().find(|&&c| c >= class_names.len()) {
        return Err(Error::InvalidArgument(format!("class {bad} has no name")));
    }
    let mut segments = Vec::new();
    let mut start_s = 0.0;
    let mut first = 0;
    for i in 1..=windows.len() {
        if i < windows.len() && smoothed[i] == smoothed[first] {
            continue;
        }
        let end_s = if i == windows.len() {
            duration_s
        } else {
            (0.5 * (windows[i - 1].mid_s + windows[i].mid_s)).clamp(start_s, duration_s)
        };
        let conf = windows[first..i].iter().map(|w| w.confidence).sum::<f64>() / (i - first) as f64;
        segments.push(Segment { start_s, end_s, class: class_names[smoothed[first]].clone(), confidence: conf });
        start_s = end_s;
        first = i;
    }
    Ok(SegmentTimeline { note: LABEL_NOTE.into(), duration_s, segments })
}

/// Classifies every window of `clip`.
pub fn predict_windows<C: Classifier<f32> + Sync + ?Sized>(
    model: &C,
    clip: &FrameClip,
    transform: &TransformConfig,
    cfg: &SegmenterConfig,
) -> Result<Vec<WindowPrediction>> {
    cfg.validate()?;
    let ranges = window_ranges(clip.num_frames(), clip.fps(), cfg);
    let k = model.num_classes();
    let chunks: Vec<Vec<WindowPrediction>> = ranges
        .par_chunks(WINDOW_BATCH)
        .map(|chunk| {
            let clips: Vec<Tensor<f32>> =
                chunk.iter().map(|r| val_transform(&clip.slice(r.clone())?, transform)).collect::<Result<_>>()?;
            let items: Vec<usize> = (0..chunk.len()).collect();
            let probs = softmax(&model.logits(&stack(&clips)?, &items)?)?;
            if !probs.all_finite() {
                return Err(Error::NonFinite { op: "window logits".into() });
            }
            Ok(chunk
                .iter()
                .zip(probs.data().chunks(k))
                .map(|(r, p)| {
                    let row: Vec<f64> = p.iter().map(|&x| x as f64).collect();
                    let class = forestvid::metrics::argmax(&row);
                    WindowPrediction {
                        start_frame: r.start,
                        end_frame: r.end,
                        mid_s: (r.start + r.end) as f64 / 2.0 / clip.fps(),
                        class,
                        confidence: row[class],
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

pub fn segment_clip<C: Classifier<f32> + Sync + ?Sized>(
    model: &C,
    clip: &FrameClip,
    transform: &TransformConfig,
    cfg: &SegmenterConfig,
    class_names: &[String],
) -> Result<(Vec<WindowPrediction>, SegmentTimeline)> {
    let windows = predict_windows(model, clip, transform, cfg)?;
    let labels: Vec<usize> = windows.iter().map(|w| w.class).collect();
    let smoothed = smooth_labels(&labels, cfg.smoothing);
    let timeline = build_timeline(&windows, &smoothed, clip.duration_seconds(), class_names)?;
    Ok((windows, timeline))
}

impl SegmentTimeline {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("start_s,end_s,class,confidence\n");
        for seg in &self.segments {
            let _ = writeln!(s, "{:.3},{:.3},{},{:.3}", seg.start_s, seg.end_s, seg.class, seg.confidence);
        }
        s
    }
}

/// Intersection over union of two time intervals.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
