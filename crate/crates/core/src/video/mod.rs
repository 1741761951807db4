//! Clip containers and preprocessing.
//!
//! Clips are stored frame-major as interleaved RGB bytes (`T x H x W x 3`).
//! Two on-disk forms are read: the `.rvf` raw container and directories of
//! binary PPM frames.

mod io;
mod transform;

pub use io::{read_ppm_dir, read_rvf, read_rvf_frames, read_rvf_header, write_rvf, RvfHeader};
pub use transform::{
    center_crop_offsets, crop, flip_horizontal, horizontal_flip, normalize, sample_scale_target,
    short_side_scale, subsample_indices, train_transform, uniform_temporal_subsample, val_transform,
    CropMode, TransformConfig,
};

use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FrameClip {
    frames: Vec<u8>,
    t: usize,
    h: usize,
    w: usize,
    fps: f64,
    pub source_id: String,
}

impl FrameClip {
    pub fn new(frames: Vec<u8>, t: usize, h: usize, w: usize, fps: f64, source_id: impl Into<String>) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidShape(format!("clip extents must be positive, got {t}x{h}x{w}")));
        }
        if frames.len() != t * h * w * 3 {
            return Err(Error::InvalidShape(format!(
                "{} bytes for a {t}x{h}x{w} RGB clip",
                frames.len()
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
        }
        Ok(FrameClip { frames, t, h, w, fps, source_id: source_id.into() })
    }

    pub fn num_frames(&self) -> usize {
        self.t
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn duration_seconds(&self) -> f64 {
        self.t as f64 / self.fps
    }

    pub fn bytes(&self) -> &[u8] {
        &self.frames
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.frames
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w * 3
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.frame_len();
        &self.frames[i * n..(i + 1) * n]
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize) -> [u8; 3] {
        let o = ((t * self.h + y) * self.w + x) * 3;
        [self.frames[o], self.frames[o + 1], self.frames[o + 2]]
    }

    /// Frames `range` as a new clip.
    pub fn slice(&self, range: Range<usize>) -> Result<FrameClip> {
        if range.start >= range.end || range.end > self.t {
            return Err(Error::InvalidArgument(format!(
                "frame range {range:?} outside clip of {} frames",
                self.t
            )));
        }
        let n = self.frame_len();
        FrameClip::new(
            self.frames[range.start * n..range.end * n].to_vec(),
            range.len(),
            self.h,
            self.w,
            self.fps,
            self.source_id.clone(),
        )
    }

    fn with_frames(&self, frames: Vec<u8>, t: usize, h: usize, w: usize) -> FrameClip {
        debug_assert_eq!(frames.len(), t * h * w * 3);
        FrameClip { frames, t, h, w, fps: self.fps, source_id: self.source_id.clone() }
    }
}

/// Loads a clip from an `.rvf` file, or a PPM directory played at `fps`.
pub fn load_clip(path: &Path, fps: f64) -> Result<FrameClip> {
    if path.is_dir() {
        read_ppm_dir(path, fps)
    } else {
        read_rvf(path)
    }
}

/// Loads frames `range` of a clip; `.rvf` files are read by seeking.
pub fn load_clip_range(path: &Path, fps: f64, range: Range<usize>) -> Result<FrameClip> {
    if path.is_dir() {
        read_ppm_dir(path, fps)?.slice(range)
    } else {
        read_rvf_frames(path, range)
    }
}
