use std::path::Path;

use super::{DetectorConfig, DetectorState, ALL_TENSORS};
use crate::io::{read_file, write_atomic, LeReader};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"CLDS";
const VERSION: u32 = 1;

/// Little-endian: magic, version, optimizer step, shape table
/// (`count`, then per tensor `name_len u16, name, ndim u32, dims u32…`),
/// then every tensor as f32 in table order.
pub fn encode_checkpoint(state: &DetectorState) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + state.params.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&state.optimizer.step.to_le_bytes());
    out.extend_from_slice(&(ALL_TENSORS.len() as u32).to_le_bytes());
    for t in ALL_TENSORS {
        let name = t.name().as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        let shape = state.layout.shape(t);
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
    }
    for p in &state.params {
        out.extend_from_slice(&(*p as f32).to_le_bytes());
    }
    out
}

/// Rebuilds a state for `config`, rejecting any shape-table mismatch.
/// Optimizer moments are not stored and start fresh.
pub fn decode_checkpoint(bytes: &[u8], config: &DetectorConfig) -> Result<DetectorState> {
    let mut state = DetectorState::new(config.clone(), 0)?;
    let mut r = LeReader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format(
            "not a detector checkpoint (bad magic)".into(),
        ));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let step = r.u64()?;
    let count = r.u32()? as usize;
    if count != ALL_TENSORS.len() {
        return Err(Error::Format(format!(
            "expected {} tensors, found {count}",
            ALL_TENSORS.len()
        )));
    }
    for t in ALL_TENSORS {
        let len = r.u16()? as usize;
        let name = r.take(len)?;
        if name != t.name().as_bytes() {
            return Err(Error::Format(format!(
                "tensor `{}` found where `{}` was expected",
                String::from_utf8_lossy(name),
                t.name()
            )));
        }
        let ndim = r.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != state.layout.shape(t) {
            return Err(Error::Format(format!(
                "tensor `{}` has shape {dims:?}, configuration expects {:?}",
                t.name(),
                state.layout.shape(t)
            )));
        }
    }
    for p in state.params.iter_mut() {
        *p = r.f32()? as f64;
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after parameters".into()));
    }
    state.optimizer.step = step;
    Ok(state)
}

pub fn save_checkpoint(path: &Path, state: &DetectorState) -> Result<()> {
    write_atomic(path, &encode_checkpoint(state))
}

pub fn load_checkpoint(path: &Path, config: &DetectorConfig) -> Result<DetectorState> {
    decode_checkpoint(&read_file(path)?, config)
}
