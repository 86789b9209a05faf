//! Binary training snapshots.
//!
//! Layout: `FOTONCKP`, version `u32`, precision tag `u8`, metadata length
//! `u32` + JSON, tensor count `u32`, then per tensor a `u16`-prefixed name,
//! rank `u8`, `u32` extents and raw little-endian scalars; finally the CRC-32
//! of everything before it. Per-step randomness is derived from the seed
//! and step counter, so no generator state is stored.

use std::path::Path;

use ndarray::{ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};

use super::metrics::RunMetrics;
use crate::error::{CheckpointError, Error, Result};
use crate::layers::{Layer, Network};
use crate::rules::Learner;
use crate::scalar::{Precision, Real};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FOTONCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything a run needs to continue where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub net: Network<T>,
    pub learner: Learner<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub metrics: RunMetrics,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    epoch: usize,
    step: u64,
    metrics: RunMetrics,
    last_refresh: Option<u64>,
    orthogonalized: Vec<bool>,
}

fn layer_views<'a, T: Real>(prefix: &str, layers: &'a [Layer<T>], out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
    for (i, layer) in layers.iter().enumerate() {
        match layer {
            Layer::Dense(d) => out.push((format!("{prefix}{i}.weight"), d.weight.view().into_dyn())),
            Layer::Conv(c) => {
                out.push((format!("{prefix}{i}.kernel"), c.kernel.view().into_dyn()));
                if let Some(b) = &c.bcop {
                    for (j, m) in b.matrices().enumerate() {
                        out.push((format!("{prefix}{i}.bcop{j}"), m.view().into_dyn()));
                    }
                }
            }
            Layer::Pool(_) => {}
        }
    }
}

fn layer_views_mut<'a, T: Real>(prefix: &str, layers: &'a mut [Layer<T>], out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
    for (i, layer) in layers.iter_mut().enumerate() {
        match layer {
            Layer::Dense(d) => out.push((format!("{prefix}{i}.weight"), d.weight.view_mut().into_dyn())),
            Layer::Conv(c) => {
                out.push((format!("{prefix}{i}.kernel"), c.kernel.view_mut().into_dyn()));
                if let Some(b) = c.bcop.as_mut() {
                    for (j, m) in b.matrices_mut().enumerate() {
                        out.push((format!("{prefix}{i}.bcop{j}"), m.view_mut().into_dyn()));
                    }
                }
            }
            Layer::Pool(_) => {}
        }
    }
}

fn tensors<T: Real>(state: &TrainState<T>) -> Vec<(String, ArrayViewD<'_, T>)> {
    let mut out = Vec::new();
    layer_views("layer", &state.net.layers, &mut out);
    if let Some(f) = &state.learner.feedback {
        layer_views("feedback.layer", &f.snapshot, &mut out);
        if let Some(m) = &f.matrix {
            out.push(("feedback.matrix".into(), m.view().into_dyn()));
        }
    }
    if let Some(b) = &state.learner.baseline {
        for (j, m) in b.matrices.iter().enumerate() {
            out.push((format!("baseline{j}"), m.view().into_dyn()));
        }
    }
    out
}

fn tensors_mut<T: Real>(state: &mut TrainState<T>) -> Vec<(String, ArrayViewMutD<'_, T>)> {
    let mut out = Vec::new();
    layer_views_mut("layer", &mut state.net.layers, &mut out);
    if let Some(f) = state.learner.feedback.as_mut() {
        layer_views_mut("feedback.layer", &mut f.snapshot, &mut out);
        if let Some(m) = f.matrix.as_mut() {
            out.push(("feedback.matrix".into(), m.view_mut().into_dyn()));
        }
    }
    if let Some(b) = state.learner.baseline.as_mut() {
        for (j, m) in b.matrices.iter_mut().enumerate() {
            out.push((format!("baseline{j}"), m.view_mut().into_dyn()));
        }
    }
    out
}

pub fn encode_checkpoint<T: Real>(state: &TrainState<T>) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(T::PRECISION.tag());
    let meta = Meta {
        epoch: state.epoch,
        step: state.step,
        metrics: state.metrics.clone(),
        last_refresh: state.learner.feedback.as_ref().map(|f| f.last_refresh),
        orthogonalized: state.net.layers.iter().map(Layer::orthogonalized).collect(),
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let ts = tensors(state);
    out.extend_from_slice(&(ts.len() as u32).to_le_bytes());
    for (name, view) in ts {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(view.ndim() as u8);
        for &d in view.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        view.iter().for_each(|&v| v.write_le(&mut out));
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or(CheckpointError::Truncated)?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Overwrites `state` (which must have the checkpoint's architecture) with
/// the stored parameters and counters.
pub fn decode_checkpoint<T: Real>(bytes: &[u8], state: &mut TrainState<T>) -> Result<()> {
    if bytes.len() < 17 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        }
        .into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed }.into());
    }
    let found = Precision::from_tag(body[12]).ok_or(CheckpointError::Truncated)?;
    if found != T::PRECISION {
        return Err(CheckpointError::Precision {
            found,
            expected: T::PRECISION,
        }
        .into());
    }
    let mut c = Cursor { bytes: body, pos: 13 };
    let len = c.u32()? as usize;
    let meta: Meta = serde_json::from_slice(c.take(len)?)
        .map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
    if meta.orthogonalized.len() != state.net.depth() {
        return Err(CheckpointError::Shape {
            what: "network depth".into(),
            found: vec![meta.orthogonalized.len()],
            expected: vec![state.net.depth()],
        }
        .into());
    }
    let count = c.u32()? as usize;
    let width = T::PRECISION.tag() as usize;
    let mut parsed = Vec::with_capacity(count);
    for _ in 0..count {
        let n = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8_lossy(c.take(n)?).into_owned();
        let rank = c.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let raw = c.take(shape.iter().product::<usize>() * width)?;
        parsed.push((name, shape, raw));
    }
    let mut targets = tensors_mut(state);
    for (i, (name, view)) in targets.iter().enumerate() {
        let Some((found_name, found_shape, _)) = parsed.get(i) else {
            return Err(CheckpointError::Shape {
                what: format!("{name} (missing from checkpoint)"),
                found: Vec::new(),
                expected: view.shape().to_vec(),
            }
            .into());
        };
        if found_name != name || found_shape.as_slice() != view.shape() {
            return Err(CheckpointError::Shape {
                what: if found_name == name { name.clone() } else { format!("{name} (checkpoint has {found_name})") },
                found: found_shape.clone(),
                expected: view.shape().to_vec(),
            }
            .into());
        }
    }
    if parsed.len() != targets.len() {
        return Err(CheckpointError::Shape {
            what: format!("{} (extra tensor)", parsed[targets.len()].0),
            found: parsed[targets.len()].1.clone(),
            expected: Vec::new(),
        }
        .into());
    }
    for ((_, view), (_, _, raw)) in targets.iter_mut().zip(&parsed) {
        for (dst, chunk) in view.iter_mut().zip(raw.chunks_exact(width)) {
            *dst = T::read_le(chunk);
        }
    }
    drop(targets);
    for (layer, flag) in state.net.layers.iter_mut().zip(&meta.orthogonalized) {
        match layer {
            Layer::Dense(d) => d.orthogonalized = *flag,
            Layer::Conv(cv) => cv.orthogonalized = *flag,
            Layer::Pool(_) => {}
        }
    }
    if let (Some(f), Some(last)) = (state.learner.feedback.as_mut(), meta.last_refresh) {
        f.last_refresh = last;
    }
    state.epoch = meta.epoch;
    state.step = meta.step;
    state.metrics = meta.metrics;
    Ok(())
}

/// Writes through a temporary file so an interrupted save leaves the previous
/// checkpoint intact.
pub fn checkpoint_save<T: Real>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_checkpoint(state)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_load<T: Real>(path: &Path, state: &mut TrainState<T>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, state)
}
