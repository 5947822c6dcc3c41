//! Checkpoint container.
//!
//! ```text
//! "CEVC" | u32 version | u32 config_len | config JSON
//!        | u32 n_tensors | n x (u32 name_len | name | u8 dtype | u64 numel | data)
//! ```
//! Little-endian throughout; dtype 1 = f32, 3 = f64. Tensor names follow
//! [`ModelParams::tensors`] and are stable across versions.

use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{CevaeError, Result};
use crate::real::Real;

const MAGIC: &[u8; 4] = b"CEVC";
const VERSION: u32 = 1;

fn dtype_of<T: Real>() -> u8 {
    if std::mem::size_of::<T>() == 4 {
        1
    } else {
        3
    }
}

pub fn encode_checkpoint<T: Real>(params: &ModelParams<T>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&params.config)?;
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    let tensors = params.tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let dtype = dtype_of::<T>();
    for (name, data) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(dtype);
        buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in data {
            if dtype == 1 {
                buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            } else {
                buf.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CevaeError::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8], path: &Path) -> Result<ModelParams<T>> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if cur.take(4)? != MAGIC {
        return Err(CevaeError::format(path, "bad checkpoint magic"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(CevaeError::format(path, format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = cur.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(cur.take(cfg_len)?)
        .map_err(|e| CevaeError::format(path, format!("config: {e}")))?;
    let mut params = ModelParams::<T>::zeros(&config)?;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let count = cur.u32()? as usize;
    if count != names.len() {
        return Err(CevaeError::format(
            path,
            format!("expected {} tensors, found {count}", names.len()),
        ));
    }
    for (slot, expected) in params.tensors_mut().into_iter().zip(&names) {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| CevaeError::format(path, "tensor name is not UTF-8"))?;
        if name != expected {
            return Err(CevaeError::format(
                path,
                format!("expected tensor {expected}, found {name}"),
            ));
        }
        let dtype = cur.take(1)?[0];
        let numel = cur.u64()? as usize;
        if numel != slot.len() {
            return Err(CevaeError::format(
                path,
                format!("tensor {name} has {numel} elements, expected {}", slot.len()),
            ));
        }
        match dtype {
            1 => {
                for (v, c) in slot.iter_mut().zip(cur.take(numel * 4)?.chunks_exact(4)) {
                    *v = T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64);
                }
            }
            3 => {
                for (v, c) in slot.iter_mut().zip(cur.take(numel * 8)?.chunks_exact(8)) {
                    *v = T::from_f64(f64::from_le_bytes(c.try_into().unwrap()));
                }
            }
            other => {
                return Err(CevaeError::format(path, format!("unknown tensor dtype {other}")));
            }
        }
    }
    if cur.pos != bytes.len() {
        return Err(CevaeError::format(path, "trailing bytes after last tensor"));
    }
    Ok(params)
}

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, params: &ModelParams<T>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CevaeError::io(parent, e))?;
    }
    fs::write(path, encode_checkpoint(params)?).map_err(|e| CevaeError::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CevaeError::MissingFile(path.to_path_buf())
        } else {
            CevaeError::io(path, e)
        }
    })?;
    decode_checkpoint(&bytes, path)
}
