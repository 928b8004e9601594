//! Binary key→tensor archive used for encoder weights and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "LAPSTYLE"
//! u32       format version (1)
//! u64       header length in bytes
//! header    UTF-8 JSON: {"manifest": {...}, "metadata": {...}, "tensors": [...]}
//! payload   f32 little-endian values, tensors back to back
//! ```
//!
//! Each `tensors` entry is `{"name", "shape", "offset", "frozen"}` where
//! `offset` counts f32 elements from the start of the payload. Convolution
//! kernels are stored out-channels x in-channels x kH x kW, which the manifest
//! records as `"layout": "OIHW"`.

use std::fs;
use std::io::Write;
use std::path::Path;

use lapstyle_autograd::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParameterSet;

const MAGIC: &[u8; 8] = b"LAPSTYLE";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    manifest: Manifest,
    #[serde(default)]
    metadata: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    layout: String,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    #[serde(default)]
    frozen: bool,
}

/// Contents of an archive file.
#[derive(Debug)]
pub struct Archive {
    pub params: ParameterSet,
    pub metadata: serde_json::Value,
    /// SHA-256 of the file bytes.
    pub file_hash: String,
}

pub fn encode(params: &ParameterSet, metadata: serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, p) in params.iter() {
        tensors.push(Entry { name: name.to_string(), shape: p.tensor.shape().to_vec(), offset, frozen: p.frozen });
        offset += p.tensor.numel();
    }
    let header = Header {
        manifest: Manifest { layout: "OIHW".into(), dtype: "f32-le".into() },
        metadata,
        tensors,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Invalid(format!("archive header: {e}")))?;
    let mut out = Vec::with_capacity(20 + header.len() + offset * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, p) in params.iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Archive> {
    let bad = |reason: &str| Error::archive(path, reason);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a lapstyle archive"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..header_end]).map_err(|e| bad(&format!("header: {e}")))?;
    if header.manifest.dtype != "f32-le" || header.manifest.layout != "OIHW" {
        return Err(bad(&format!("unsupported manifest {:?}", header.manifest)));
    }
    let payload = &bytes[header_end..];
    let mut params = ParameterSet::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset * 4;
        let end = start + n * 4;
        if end > payload.len() {
            return Err(bad(&format!("tensor {} extends past end of file", e.name)));
        }
        let data = payload[start..end].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(&e.shape, data).map_err(|err| bad(&err.to_string()))?;
        params.insert(e.name, t, e.frozen).map_err(|err| bad(&err.to_string()))?;
    }
    let file_hash = hex::encode(Sha256::digest(bytes));
    Ok(Archive { params, metadata: header.metadata, file_hash })
}

pub fn read(path: impl AsRef<Path>) -> Result<Archive> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Writes atomically: a temporary file in the target directory is renamed
/// over `path` once fully written.
pub fn write(path: impl AsRef<Path>, params: &ParameterSet, metadata: serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(params, metadata)?;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
