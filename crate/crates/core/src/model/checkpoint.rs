//! Checkpoint layout (all integers u32 little-endian):
//! `"OSMT"`, version, config length, config JSON, parameter count, then per
//! parameter: name length, UTF-8 name, rank, dims, f32 LE payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numcore::{Parameters, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OSMT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.config)?;
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(&cfg);
    put_u32(&mut out, model.params.len());
    for p in model.params.iter() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.shape().len());
        for &d in p.value.shape() {
            put_u32(&mut out, d);
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(Error::Truncated { path: self.path.into() })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn model_from_bytes(bytes: &[u8], path: &Path) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4).map_err(|_| Error::BadMagic { path: path.into(), expected: "OSMT" })? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { path: path.into(), expected: "OSMT" });
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadVersion { path: path.into(), version });
    }
    let cfg_len = r.u32()?;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    let count = r.u32()?;
    let mut params = Parameters::new();
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format { path: path.into(), message: "parameter name is not UTF-8".into() })?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(4).ok_or(Error::Truncated { path: path.into() })?)?;
        let data: Vec<f64> =
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        let value = Tensor::new(shape, data)
            .map_err(|_| Error::Format { path: path.into(), message: format!("{name}: bad shape") })?;
        params.insert(name, value)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format { path: path.into(), message: "trailing bytes".into() });
    }
    Model::from_parameters(config, params)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes, path)
}

/// Rounds every parameter to f32 precision, matching what a save/load cycle yields.
pub fn round_to_f32(model: &mut Model) {
    for p in model.params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}
