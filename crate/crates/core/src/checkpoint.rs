//! Checkpoint files.
//!
//! ```text
//! "MCKP" | u32 LE version | u32 LE header length | JSON header | tensors
//! ```
//! The JSON header holds both configs, the metadata map and the name and
//! shape of every tensor. Tensor data follows in header order as f64 LE.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::config::{CodecConfig, ProbModelConfig};
use crate::error::{CodecError, Result};
use crate::model::CodecModel;
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    codec: CodecConfig,
    prob: ProbModelConfig,
    metadata: BTreeMap<String, String>,
    tensors: Vec<(String, Vec<usize>)>,
}

pub fn to_bytes(model: &CodecModel) -> Result<Vec<u8>> {
    let header = Header {
        codec: model.codec,
        prob: model.prob,
        metadata: model.metadata.clone(),
        tensors: model.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CodecError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + 8 * model.params.numel());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params.iter() {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<CodecModel> {
    let bad = |m: &str| CodecError::Checkpoint(m.to_string());
    if bytes.len() < 12 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| CodecError::Checkpoint(e.to_string()))?;
    header.codec.validate()?;
    header.prob.validate()?;
    let mut pos = 12 + len;
    let mut params = ParamStore::new();
    for (name, shape) in header.tensors {
        let n: usize = shape.iter().product();
        let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.insert(name, ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| bad(&e.to_string()))?);
        pos += 8 * n;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let expected = CodecModel::new(header.codec, header.prob, 0)?;
    for (name, t) in expected.params.iter() {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            _ => return Err(bad(&format!("parameter {name} missing or mis-shaped"))),
        }
    }
    Ok(CodecModel { codec: header.codec, prob: header.prob, params, metadata: header.metadata })
}

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| CodecError::Config(format!("bad output path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn save(model: &CodecModel, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(model)?)
}

pub fn load(path: &Path) -> Result<CodecModel> {
    from_bytes(&fs::read(path)?)
}
