//! Binary checkpoint container.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic        8 bytes   "CTXRCKP1"
//! config_len   u32
//! config       config_len bytes of UTF-8 JSON (ModelConfig)
//! count        u32       number of tensors
//! per tensor:
//!   name_len   u16
//!   name       name_len bytes of UTF-8
//!   rows       u32
//!   cols       u32
//!   values     rows * cols f64, row-major
//! ```
//!
//! Tensors are written in parameter-creation order, so identical models
//! produce identical bytes.

use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::training::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"CTXRCKP1";

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&model.config).map_err(|e| Error::config(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + config.len() + model.params.scalar_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, name, value) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let (r, c) = value.dim();
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
        for x in value.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::data(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Rebuilds the model layout from the stored config, then overwrites every
/// tensor. Names and shapes must match the layout exactly.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::data("not a checkpoint (bad magic)"));
    }
    let len = c.u32()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(c.take(len)?).map_err(|e| Error::data(format!("checkpoint config: {e}")))?;
    let mut model = Model::new(config, 0)?;
    let count = c.u32()? as usize;
    if count != model.params.len() {
        return Err(Error::data(format!(
            "checkpoint has {count} tensors, the model expects {}",
            model.params.len()
        )));
    }
    let mut loaded = ParamStore::new();
    for _ in 0..count {
        let n = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| Error::data("tensor name is not UTF-8"))?
            .to_string();
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let values = (0..rows * cols).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        let id = model
            .params
            .id(&name)
            .ok_or_else(|| Error::data(format!("unexpected tensor {name:?}")))?;
        if model.params.get(id).dim() != (rows, cols) {
            return Err(Error::data(format!("tensor {name:?} has shape {rows}x{cols}")));
        }
        let value = Array2::from_shape_vec((rows, cols), values).expect("shape checked");
        loaded.insert(name, value)?;
    }
    if c.pos != bytes.len() {
        return Err(Error::data("trailing bytes after the last tensor"));
    }
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = model.params.name(id).to_string();
        let src = loaded.id(&name).expect("all names present");
        let value = loaded.get(src).clone();
        *model.params.get_mut(id) = value;
    }
    Ok(model)
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Hex SHA-256 of the serialized model.
pub fn hash(model: &Model) -> Result<String> {
    Ok(hex::encode(Sha256::digest(to_bytes(model)?)))
}
