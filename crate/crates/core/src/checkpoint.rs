//! Binary container for model checkpoints and training state.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic[8] | version u32 | header_len u32 | header JSON | tensor_count u32 |
//! tensor* = name_len u32 | name | ndim u32 | dims u64* | f32 data
//! ```
//!
//! A model checkpoint uses magic `QSEPCKPT` with the [`SeparatorConfig`] as
//! header; training state uses `QSEPSTAT` with a [`StateHeader`].

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SeparatorConfig, SeparatorModel};
use crate::nn::{ParamStore, ParamTensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"QSEPCKPT";
pub const STATE_MAGIC: &[u8; 8] = b"QSEPSTAT";
pub const VERSION: u32 = 1;

/// Named tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl From<&ParamTensor<f32>> for StoredTensor {
    fn from(t: &ParamTensor<f32>) -> Self {
        Self {
            name: t.name.clone(),
            shape: t.shape.clone(),
            data: t.data.clone(),
        }
    }
}

pub fn encode<H: Serialize>(magic: &[u8; 8], header: &H, tensors: &[StoredTensor]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let payload: usize = tensors.iter().map(|t| 12 + t.name.len() + 8 * t.shape.len() + 4 * t.data.len()).sum();
    let mut out = Vec::with_capacity(24 + json.len() + payload);
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(json.len())?.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&u32_len(tensors.len())?.to_le_bytes());
    for t in tensors {
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::invalid(format!("tensor {} shape does not match its data", t.name)));
        }
        out.extend_from_slice(&u32_len(t.name.len())?.to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&u32_len(t.shape.len())?.to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid("container field too large"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }
}

pub fn decode<H: DeserializeOwned>(magic: &[u8; 8], bytes: &[u8]) -> Result<(H, Vec<StoredTensor>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != magic {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let hlen = r.u32("header length")? as usize;
    let header: H = serde_json::from_slice(r.take(hlen, "header")?).map_err(|e| r.err(format!("header: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "name")?)
            .map_err(|_| r.err("tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(usize::try_from(r.u64("dimension")?).map_err(|_| r.err("dimension overflow"))?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| r.err("tensor size overflow"))?;
        let data = r
            .take(len, "tensor data")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(StoredTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after last tensor"));
    }
    Ok((header, tensors))
}

pub fn params_to_tensors(params: &ParamStore<f32>) -> Vec<StoredTensor> {
    params.tensors().iter().map(StoredTensor::from).collect()
}

pub fn tensors_to_params(tensors: &[StoredTensor]) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::default();
    for t in tensors {
        if store.find(&t.name).is_some() {
            return Err(Error::invalid(format!("duplicate tensor {}", t.name)));
        }
        store.add(t.name.clone(), t.shape.clone(), t.data.iter().map(|&v| v as f64).collect());
    }
    Ok(store)
}

pub fn checkpoint_bytes(model: &SeparatorModel<f32>) -> Result<Vec<u8>> {
    encode(CHECKPOINT_MAGIC, model.config(), &params_to_tensors(model.params()))
}

pub fn save_checkpoint(model: &SeparatorModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &checkpoint_bytes(model)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SeparatorModel<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (config, tensors): (SeparatorConfig, _) = decode(CHECKPOINT_MAGIC, &bytes)?;
    config.validate()?;
    SeparatorModel::from_params(config, tensors_to_params(&tensors)?)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(path, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Scalar part of the training state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateHeader {
    pub step: u64,
    pub adam_t: u64,
    pub best_val_loss: Option<f64>,
    /// File name of the best checkpoint, relative to the run directory.
    pub best_checkpoint: Option<String>,
    pub model: SeparatorConfig,
    /// Opaque training configuration, checked on resume.
    pub train: serde_json::Value,
}
