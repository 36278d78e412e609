//! Checkpoint container: "EVDM" magic, u32 version, then named f32 blobs
//! {u32 name_len, name, u32 ndim, u32 dims, f32 data}, all little-endian.
//!
//! Model checkpoints store the denoiser config as a 4-element blob, every
//! parameter tensor under its fixed name, and optionally the optimizer
//! moments plus step count so training can resume bit-identically.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::numkit::{AdamState, Tensor};

use super::model::{DenoiserConfig, DenoiserModel, PARAM_NAMES};
use super::train::TrainState;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EVDM";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Cap on blob-name length; real names are short, so anything larger means
/// a corrupt or foreign file.
pub const MAX_NAME_BYTES: usize = 256;

/// Steps are stored as one f32 blob; beyond 2^24 the integer is no longer
/// exact, so saving refuses rather than silently rounding.
const MAX_EXACT_STEP: u64 = 1 << 24;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("blob {name}: {reason}")]
    InvalidBlob { name: String, reason: String },
    #[error("duplicate blob name {0:?}")]
    DuplicateBlob(String),
    #[error("missing blob {0:?}")]
    MissingBlob(String),
    #[error("checkpoint does not describe a valid model: {0}")]
    BadModel(String),
}

fn bad_blob(name: &str, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::InvalidBlob { name: name.to_string(), reason: reason.into() }
}

/// One named f32 array; dims multiply out to exactly `data.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn new(
        name: impl Into<String>,
        dims: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<Self, CheckpointError> {
        let name = name.into();
        if name.is_empty() || name.len() > MAX_NAME_BYTES {
            return Err(bad_blob(&name, "name must be 1..=256 bytes"));
        }
        let numel: usize = dims.iter().product();
        if dims.is_empty() || numel == 0 {
            return Err(bad_blob(&name, "dims must be non-empty and positive"));
        }
        if numel != data.len() {
            return Err(bad_blob(
                &name,
                format!("dims {:?} imply {} elements, data has {}", dims, numel, data.len()),
            ));
        }
        Ok(NamedArray { name, dims, data })
    }

    pub fn scalar(name: impl Into<String>, value: f32) -> Result<Self, CheckpointError> {
        Self::new(name, vec![1], vec![value])
    }

    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Result<Self, CheckpointError> {
        Self::new(name, t.shape().to_vec(), t.data().to_vec())
    }
}

/// Serializes arrays in the given order; order is preserved on read.
pub fn checkpoint_bytes(arrays: &[NamedArray]) -> Result<Vec<u8>, CheckpointError> {
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for a in arrays {
        if seen.insert(a.name.clone(), ()).is_some() {
            return Err(CheckpointError::DuplicateBlob(a.name.clone()));
        }
        // NamedArray construction already validated name and dims.
        out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.extend_from_slice(&(a.dims.len() as u32).to_le_bytes());
        for &d in &a.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_arrays(path: &Path, arrays: &[NamedArray]) -> Result<(), CheckpointError> {
    fs::write(path, checkpoint_bytes(arrays)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<NamedArray>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut arrays = Vec::new();
    let mut seen = HashMap::new();
    while !r.done() {
        let name_len = r.u32("blob name length")? as usize;
        if name_len == 0 || name_len > MAX_NAME_BYTES {
            return Err(bad_blob("<unnamed>", format!("name length {name_len} out of range")));
        }
        let name = std::str::from_utf8(r.take(name_len, "blob name")?)
            .map_err(|_| bad_blob("<unnamed>", "name is not UTF-8"))?
            .to_string();
        if seen.insert(name.clone(), ()).is_some() {
            return Err(CheckpointError::DuplicateBlob(name));
        }
        let ndim = r.u32("blob rank")? as usize;
        let mut dims = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            dims.push(r.u32("blob dims")? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated("blob data"))?,
            "blob data")?;
        let data = raw.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        arrays.push(NamedArray::new(name, dims, data)?);
    }
    Ok(arrays)
}

pub fn load_arrays(path: &Path) -> Result<Vec<NamedArray>, CheckpointError> {
    parse_checkpoint(&fs::read(path)?)
}

const CONFIG_BLOB: &str = "config";
const STEP_BLOB: &str = "step";

fn moment_names(param: &str) -> (String, String) {
    (format!("adam_m.{param}"), format!("adam_v.{param}"))
}

/// Saves config + parameters, plus optimizer moments and step when `state`
/// is given. The result feeds [`load_model`] for inference or resume.
pub fn save_model(
    path: &Path,
    model: &DenoiserModel,
    state: Option<&TrainState>,
) -> Result<(), CheckpointError> {
    let c = &model.config;
    let mut arrays = vec![NamedArray::new(
        CONFIG_BLOB,
        vec![4],
        vec![c.frame_latent as f32, c.hidden as f32, c.time_dim as f32, c.text_dim as f32],
    )?];
    for (name, p) in PARAM_NAMES.iter().zip(model.params()) {
        arrays.push(NamedArray::from_tensor(*name, p)?);
    }
    if let Some(state) = state {
        if state.adam.len() != PARAM_NAMES.len() {
            return Err(CheckpointError::BadModel(format!(
                "optimizer tracks {} tensors, model has {}",
                state.adam.len(),
                PARAM_NAMES.len()
            )));
        }
        if state.step >= MAX_EXACT_STEP {
            return Err(CheckpointError::BadModel(format!(
                "step {} is not exactly representable in the f32 blob format",
                state.step
            )));
        }
        arrays.push(NamedArray::scalar(STEP_BLOB, state.step as f32)?);
        for (name, adam) in PARAM_NAMES.iter().zip(&state.adam) {
            let (m_name, v_name) = moment_names(name);
            let n = adam.first_moment().len();
            arrays.push(NamedArray::new(m_name, vec![n], adam.first_moment().to_vec())?);
            arrays.push(NamedArray::new(v_name, vec![n], adam.second_moment().to_vec())?);
        }
    }
    save_arrays(path, &arrays)
}

fn usize_field(name: &str, v: f32) -> Result<usize, CheckpointError> {
    if !v.is_finite() || v < 1.0 || v.fract() != 0.0 || v >= MAX_EXACT_STEP as f32 {
        return Err(bad_blob(name, format!("{v} is not a positive integer size")));
    }
    Ok(v as usize)
}

/// Rebuilds the model, and the optimizer state when the checkpoint carries
/// one. Loaded tensors are bit-identical to what was saved.
pub fn load_model(path: &Path) -> Result<(DenoiserModel, Option<TrainState>), CheckpointError> {
    let arrays = load_arrays(path)?;
    let by_name: HashMap<&str, &NamedArray> =
        arrays.iter().map(|a| (a.name.as_str(), a)).collect();
    let require = |name: &str| {
        by_name.get(name).copied().ok_or_else(|| CheckpointError::MissingBlob(name.to_string()))
    };

    let cfg_blob = require(CONFIG_BLOB)?;
    if cfg_blob.data.len() != 4 {
        return Err(bad_blob(CONFIG_BLOB, "expected exactly 4 entries"));
    }
    let config = DenoiserConfig {
        frame_latent: usize_field("config.frame_latent", cfg_blob.data[0])?,
        hidden: usize_field("config.hidden", cfg_blob.data[1])?,
        time_dim: usize_field("config.time_dim", cfg_blob.data[2])?,
        text_dim: usize_field("config.text_dim", cfg_blob.data[3])?,
    };

    let mut params = Vec::with_capacity(PARAM_NAMES.len());
    for name in PARAM_NAMES {
        let a = require(name)?;
        let t = Tensor::new(a.dims.clone(), a.data.clone())
            .map_err(|e| bad_blob(name, e.to_string()))?;
        params.push(t);
    }
    let model = DenoiserModel::from_params(config, params)
        .map_err(|e| CheckpointError::BadModel(e.to_string()))?;

    let has_opt = by_name.contains_key(STEP_BLOB)
        || PARAM_NAMES.iter().any(|n| by_name.contains_key(moment_names(n).0.as_str()));
    if !has_opt {
        return Ok((model, None));
    }

    let step_blob = require(STEP_BLOB)?;
    if step_blob.data.len() != 1 {
        return Err(bad_blob(STEP_BLOB, "expected a single entry"));
    }
    let step = step_blob.data[0];
    if !step.is_finite() || step < 0.0 || step.fract() != 0.0 || step >= MAX_EXACT_STEP as f32 {
        return Err(bad_blob(STEP_BLOB, format!("{step} is not a valid step count")));
    }
    let step = step as u64;

    let mut adam = Vec::with_capacity(PARAM_NAMES.len());
    for (name, p) in PARAM_NAMES.iter().zip(model.params()) {
        let (m_name, v_name) = moment_names(name);
        let m = require(&m_name)?;
        let v = require(&v_name)?;
        if m.data.len() != p.numel() || v.data.len() != p.numel() {
            return Err(bad_blob(
                &m_name,
                format!("moment length {} does not match parameter {}", m.data.len(), p.numel()),
            ));
        }
        // Per-tensor Adam counters advance in lockstep with the outer step.
        adam.push(AdamState::from_parts(m.data.clone(), v.data.clone(), step));
    }
    Ok((model, Some(TrainState { adam, step })))
}
