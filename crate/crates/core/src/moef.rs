//! Bit-exact checkpoint container.
//!
//! Layout: bytes 0..4 magic `MOEF`; bytes 4..8 format version (u32 little
//! endian, currently 1); bytes 8..16 header length (u64 little endian); a
//! UTF-8 JSON header {config, metadata, tensors}; then raw little-endian f32
//! payloads, concatenated in the order of the name-sorted tensor entries.
//! Offsets in the header are relative to the start of the payload region.
//!
//! Dense checkpoints store their config in the header. Mixture containers
//! flatten expert tensors under scoped names and carry their extra structure
//! in metadata; same-architecture mixtures keep the trunk config in the
//! header while mixed-dimension ones leave `config` null and list per-expert
//! dims in metadata.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::model::{Checkpoint, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MOEF";
pub const FORMAT_VERSION: u32 = 1;

/// What a container file holds: an optional dense config, free-form string
/// metadata, and named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config: Option<ModelConfig>,
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: Option<ModelConfig>,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_len: u64,
}

/// Serialize a container to its exact byte representation. The same
/// container always produces the same bytes.
pub fn to_bytes(container: &Container) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(container.tensors.len());
    let mut payload = Vec::new();
    for (name, tensor) in &container.tensors {
        let byte_offset = payload.len() as u64;
        for &v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: "f32".to_string(),
            shape: tensor.shape().to_vec(),
            byte_offset,
            byte_len: payload.len() as u64 - byte_offset,
        });
    }
    let header = Header {
        config: container.config.clone(),
        metadata: container.metadata.clone(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse container bytes, reporting magic, version, truncation, header and
/// schema problems as distinct errors.
pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Container, FormatError> {
    if bytes.len() < 16 {
        return Err(FormatError::Truncated(format!(
            "file is {} bytes, fixed header needs 16",
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize.checked_add(header_len).ok_or_else(|| {
        FormatError::Header(format!("header length {header_len} overflows"))
    })?;
    if bytes.len() < payload_start {
        return Err(FormatError::Truncated(format!(
            "header claims {header_len} bytes, only {} remain",
            bytes.len() - 16
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| FormatError::Header(e.to_string()))?;
    let payload = &bytes[payload_start..];

    let mut tensors = BTreeMap::new();
    for entry in &header.tensors {
        if entry.dtype != "f32" {
            return Err(FormatError::SchemaMismatch(format!(
                "tensor {} has dtype {}, only f32 is defined",
                entry.name, entry.dtype
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if entry.byte_len as usize != numel * 4 {
            return Err(FormatError::SchemaMismatch(format!(
                "tensor {} shape {:?} wants {} bytes, entry says {}",
                entry.name,
                entry.shape,
                numel * 4,
                entry.byte_len
            )));
        }
        let start = entry.byte_offset as usize;
        let end = start.checked_add(entry.byte_len as usize).ok_or_else(|| {
            FormatError::SchemaMismatch(format!("tensor {} offsets overflow", entry.name))
        })?;
        if end > payload.len() {
            return Err(FormatError::Truncated(format!(
                "tensor {} needs payload bytes {start}..{end}, only {} present",
                entry.name,
                payload.len()
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| FormatError::SchemaMismatch(e.to_string()))?;
        if tensors.insert(entry.name.clone(), tensor).is_some() {
            return Err(FormatError::SchemaMismatch(format!(
                "duplicate tensor name {}",
                entry.name
            )));
        }
    }
    Ok(Container {
        config: header.config,
        metadata: header.metadata,
        tensors,
    })
}

pub fn save_container(path: &Path, container: &Container) -> Result<()> {
    let bytes = to_bytes(container)?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(from_bytes(&bytes)?)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.validate_schema()?;
    save_container(
        path,
        &Container {
            config: Some(ckpt.config.clone()),
            metadata: ckpt.metadata.clone(),
            tensors: ckpt.tensors.clone(),
        },
    )
}

/// Load a dense checkpoint; the tensor set must match the embedded config.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let container = load_container(path)?;
    checkpoint_from_container(container)
}

pub fn checkpoint_from_container(container: Container) -> Result<Checkpoint> {
    let config = container.config.ok_or_else(|| {
        Error::Format(FormatError::SchemaMismatch(
            "container has no dense model config".into(),
        ))
    })?;
    Checkpoint::new(config, container.tensors, container.metadata).map_err(|e| match e {
        Error::Validation(msg) => Error::Format(FormatError::SchemaMismatch(msg)),
        other => other,
    })
}
