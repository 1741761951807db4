//! Binary checkpoints.
//!
//! Layout (little-endian): magic `TLCK`, `u32` version, 32-byte SHA-256 of
//! the config JSON, `u32` length and the config JSON itself, optimizer
//! header (`u64` step, `f64` beta1, beta2, eps), `u32` record count, then
//! records of `u32` name length, name bytes, `u32` rank, `u32` extents, and
//! `f32` values.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Adam;
use crate::error::{Error, Result};
use crate::resnet::{ResNet3d, ResNetConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::video::TransformConfig;

const MAGIC: &[u8; 4] = b"TLCK";
const VERSION: u32 = 1;

/// Everything needed to rebuild the model and its input pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ResNetConfig,
    pub transform: TransformConfig,
    /// Class names in logit order.
    pub classes: Vec<String>,
    pub clip_seconds: f64,
}

pub struct Checkpoint<S> {
    pub config: CheckpointConfig,
    pub model: ResNet3d<S>,
    pub optimizer: Adam<S>,
}

fn named_tensors<'a, S: Scalar>(model: &'a ResNet3d<S>, opt: &'a Adam<S>) -> Vec<(String, &'a Tensor<S>)> {
    let mut out = Vec::new();
    let mut names = Vec::new();
    model.visit_params(&mut |n, t| {
        names.push(n.clone());
        out.push((n, t));
    });
    model.visit_buffers(&mut |n, t| out.push((n, t)));
    for (n, t) in names.iter().zip(opt.first_moments()) {
        out.push((format!("adam.m.{n}"), t));
    }
    for (n, t) in names.iter().zip(opt.second_moments()) {
        out.push((format!("adam.v.{n}"), t));
    }
    out
}

pub fn encode_checkpoint<S: Scalar>(config: &CheckpointConfig, model: &ResNet3d<S>, opt: &Adam<S>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(config).map_err(|e| Error::Checkpoint(format!("serializing config: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&Sha256::digest(&json));
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&opt.steps().to_le_bytes());
    for h in [opt.beta1, opt.beta2, opt.eps] {
        buf.extend_from_slice(&h.to_le_bytes());
    }
    let records = named_tensors(model, opt);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save_checkpoint<S: Scalar>(path: &Path, config: &CheckpointConfig, model: &ResNet3d<S>, opt: &Adam<S>) -> Result<()> {
    let bytes = encode_checkpoint(config, model, opt)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct Decoded {
    config: CheckpointConfig,
    steps: u64,
    hyper: [f64; 3],
    records: HashMap<String, (Vec<usize>, Vec<f32>)>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut c = Cursor { data: bytes, pos: 0 };
    if c.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let digest = c.take(32)?;
    let len = c.u32()? as usize;
    let json = c.take(len)?;
    if Sha256::digest(json).as_slice() != digest {
        return Err(Error::Checkpoint("config digest mismatch".into()));
    }
    let config: CheckpointConfig =
        serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let steps = c.u64()?;
    let hyper = [c.f64()?, c.f64()?, c.f64()?];
    let count = c.u32()?;
    let mut records = HashMap::new();
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = c.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("record too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        if records.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record {name}")));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(Decoded { config, steps, hyper, records })
}

fn fill<S: Scalar>(records: &mut HashMap<String, (Vec<usize>, Vec<f32>)>, name: &str, target: &mut Tensor<S>) -> Result<()> {
    let (shape, data) = records.remove(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
    if shape != target.shape() {
        return Err(Error::Checkpoint(format!(
            "tensor {name}: checkpoint has shape {shape:?}, model expects {:?}",
            target.shape()
        )));
    }
    for (t, &x) in target.data_mut().iter_mut().zip(&data) {
        *t = S::lit(x as f64);
    }
    Ok(())
}

fn apply<S: Scalar>(dec: Decoded, model: &mut ResNet3d<S>, opt: &mut Adam<S>) -> Result<CheckpointConfig> {
    let Decoded { config, steps, hyper, mut records } = dec;
    // check before touching the model so a mismatch leaves it intact
    let mut result = Ok(());
    let mut check = |n: String, t: &Tensor<S>| {
        if result.is_ok() {
            result = match records.get(&n) {
                None => Err(Error::Checkpoint(format!("missing tensor {n}"))),
                Some((shape, _)) if shape != t.shape() => Err(Error::Checkpoint(format!(
                    "tensor {n}: checkpoint has shape {shape:?}, model expects {:?}",
                    t.shape()
                ))),
                _ => Ok(()),
            };
        }
    };
    model.visit_params(&mut check);
    model.visit_buffers(&mut check);
    result?;
    let mut result = Ok(());
    let mut names = Vec::new();
    model.visit_params_mut(&mut |n, t| {
        if result.is_ok() {
            result = fill(&mut records, &n, t);
        }
        names.push(n);
    });
    model.visit_buffers_mut(&mut |n, t| {
        if result.is_ok() {
            result = fill(&mut records, &n, t);
        }
    });
    result?;
    let mut moments = |prefix: &str, like: &[Tensor<S>]| -> Result<Vec<Tensor<S>>> {
        names
            .iter()
            .zip(like)
            .map(|(n, l)| {
                let mut t = Tensor::zeros_like(l);
                fill(&mut records, &format!("{prefix}.{n}"), &mut t)?;
                Ok(t)
            })
            .collect()
    };
    let m = moments("adam.m", opt.first_moments())?;
    let v = moments("adam.v", opt.second_moments())?;
    if let Some(extra) = records.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    opt.restore(steps, m, v)?;
    [opt.beta1, opt.beta2, opt.eps] = hyper;
    Ok(config)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))
}

/// Rebuilds the model and optimizer described by the checkpoint.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let dec = decode(&read(path)?)?;
    let mut model = ResNet3d::build(&dec.config.model, 0)?;
    let mut optimizer = Adam::new(model.parameters());
    let config = apply(dec, &mut model, &mut optimizer)?;
    Ok(Checkpoint { config, model, optimizer })
}

/// Loads into an existing model; every tensor must match its current shape.
pub fn load_checkpoint_into<S: Scalar>(path: &Path, model: &mut ResNet3d<S>, opt: &mut Adam<S>) -> Result<CheckpointConfig> {
    apply(decode(&read(path)?)?, model, opt)
}
