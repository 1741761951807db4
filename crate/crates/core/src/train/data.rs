use std::path::PathBuf;

use rayon::prelude::*;

use crate::dataset::{filter_active, sample_clip_window, ClassVocabulary, Manifest, ManifestEntry, Split, WindowMode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::derive_seed_path;
use crate::tensor::Tensor;
use crate::video::{load_clip_range, read_rvf_header, train_transform, val_transform, FrameClip, TransformConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Random window and augmentation, derived from `seed` and the item index.
    Train { seed: u64 },
    /// Center window, deterministic preprocessing.
    Eval,
}

pub struct Batch<S> {
    /// `[B, 3, T, H, W]`
    pub clips: Tensor<S>,
    pub labels: Vec<usize>,
    /// Dataset indices of the rows.
    pub items: Vec<usize>,
}

/// One split of a manifest, restricted to the modeled classes.
#[derive(Clone, Debug)]
pub struct ClipDataset {
    base_dir: PathBuf,
    entries: Vec<ManifestEntry>,
    labels: Vec<usize>,
    num_classes: usize,
    pub transform: TransformConfig,
    pub clip_seconds: f64,
}

impl ClipDataset {
    /// Checks every clip's container header against its manifest row.
    pub fn from_manifest(
        manifest: &Manifest,
        split: Split,
        vocab: &ClassVocabulary,
        transform: TransformConfig,
        clip_seconds: f64,
    ) -> Result<Self> {
        transform.validate()?;
        if !(clip_seconds.is_finite() && clip_seconds > 0.0) {
            return Err(Error::InvalidConfig(format!("clip length {clip_seconds} s must be positive")));
        }
        let entries = filter_active(&manifest.split(split), vocab);
        for e in &entries {
            let path = manifest.resolve(e);
            if path.is_dir() {
                continue;
            }
            let h = read_rvf_header(&path)?;
            if h.frame_count as usize != e.frame_count {
                return Err(Error::format(
                    &path,
                    format!("container has {} frames, manifest says {}", h.frame_count, e.frame_count),
                ));
            }
        }
        let labels = entries.iter().map(|e| vocab.active_index(&e.label).expect("filtered")).collect();
        Ok(ClipDataset {
            base_dir: manifest.base_dir.clone(),
            entries,
            labels,
            num_classes: vocab.num_active(),
            transform,
            clip_seconds,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn load_window(&self, i: usize, mode: WindowMode) -> Result<FrameClip> {
        let e = &self.entries[i];
        let range = sample_clip_window(e.frame_count, e.fps, self.clip_seconds, mode);
        let path = self.base_dir.join(&e.clip_path);
        load_clip_range(&path, e.fps, range)
    }

    /// Preprocessed clip `[3, T, H, W]`.
    pub fn sample<S: Scalar>(&self, i: usize, mode: SampleMode) -> Result<Tensor<S>> {
        match mode {
            SampleMode::Train { seed } => {
                let clip = self.load_window(i, WindowMode::Random(derive_seed_path(seed, &[i as u64, 0])))?;
                train_transform(&clip, &self.transform, derive_seed_path(seed, &[i as u64, 1]))
            }
            SampleMode::Eval => val_transform(&self.load_window(i, WindowMode::Center)?, &self.transform),
        }
    }

    pub fn load_batch<S: Scalar>(&self, items: &[usize], mode: SampleMode) -> Result<Batch<S>> {
        let clips: Vec<Tensor<S>> = items.par_iter().map(|&i| self.sample(i, mode)).collect::<Result<_>>()?;
        Ok(Batch {
            clips: stack(&clips)?,
            labels: items.iter().map(|&i| self.labels[i]).collect(),
            items: items.to_vec(),
        })
    }
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack<S: Scalar>(items: &[Tensor<S>]) -> Result<Tensor<S>> {
    let first = items.first().ok_or_else(|| Error::Empty("nothing to stack".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::ShapeMismatch { op: "stack", lhs: first.shape().to_vec(), rhs: t.shape().to_vec() });
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}
