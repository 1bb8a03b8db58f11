//! Binary artifact container.
//!
//! ```text
//! [8 bytes magic][u64 LE header length][UTF-8 JSON header][payload]
//! ```
//!
//! The payload is a flat little-endian array whose element type and count
//! are declared in the header (`dtype`, `count`).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::diffusion::params::{Layout, ParamVector, Segment};
use crate::diffusion::schedule::DiffusionConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UATTRCKP";
pub const FISHER_MAGIC: &[u8; 8] = b"UATTRFSH";
pub const IMAGES_MAGIC: &[u8; 8] = b"UATTRIMG";

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    fn dtype(&self) -> &'static str {
        match self {
            Payload::F32(_) => "f32",
            Payload::F64(_) => "f64",
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    dtype: String,
    count: usize,
    #[serde(flatten)]
    header: H,
}

pub fn encode<H: Serialize>(magic: &[u8; 8], header: &H, payload: &Payload) -> Result<Vec<u8>> {
    let env = Envelope {
        dtype: payload.dtype().to_string(),
        count: payload.len(),
        header,
    };
    let json = serde_json::to_vec(&env)?;
    let elem = if matches!(payload, Payload::F32(_)) { 4 } else { 8 };
    let mut out = Vec::with_capacity(16 + json.len() + payload.len() * elem);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    match payload {
        Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(magic: &[u8; 8], bytes: &[u8], path: &Path) -> Result<(H, Payload)> {
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(Error::format(path, format!("missing magic {}", String::from_utf8_lossy(magic))));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(Error::format(path, "header length exceeds file size"));
    }
    let env: Envelope<H> = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::format(path, e.to_string()))?;
    let data = &body[hlen..];
    let payload = match env.dtype.as_str() {
        "f32" => {
            if data.len() != env.count * 4 {
                return Err(Error::format(
                    path,
                    format!("payload has {} bytes, header declares {} f32 values", data.len(), env.count),
                ));
            }
            Payload::F32(data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        }
        "f64" => {
            if data.len() != env.count * 8 {
                return Err(Error::format(
                    path,
                    format!("payload has {} bytes, header declares {} f64 values", data.len(), env.count),
                ));
            }
            Payload::F64(data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        }
        other => return Err(Error::format(path, format!("unknown dtype `{other}`"))),
    };
    Ok((env.header, payload))
}

/// Writes through a temporary sibling and renames, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::DependencyMissing(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

/// Checkpoint header. `provenance` is free-form but always a JSON object
/// with stable key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub diffusion: DiffusionConfig,
    pub layout: Vec<Segment>,
    pub provenance: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamVector,
}

impl Checkpoint {
    pub fn new(kind: &str, diffusion: &DiffusionConfig, params: ParamVector, provenance: serde_json::Value) -> Self {
        let provenance = match provenance {
            serde_json::Value::Object(m) => m,
            other => {
                let mut m = serde_json::Map::new();
                m.insert("value".into(), other);
                m
            }
        };
        Self {
            header: CheckpointHeader {
                kind: kind.to_string(),
                diffusion: diffusion.clone(),
                layout: params.layout().segments().to_vec(),
                provenance,
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(CHECKPOINT_MAGIC, &self.header, &Payload::F32(self.params.values().to_vec()))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (header, payload): (CheckpointHeader, _) = decode(CHECKPOINT_MAGIC, bytes, path)?;
        let Payload::F32(values) = payload else {
            return Err(Error::format(path, "checkpoint payload must be f32"));
        };
        let layout = Layout::from_segments(header.layout.clone()).map_err(|e| Error::format(path, e.to_string()))?;
        if layout.total() != values.len() {
            return Err(Error::format(
                path,
                format!("payload has {} values but layout covers {}", values.len(), layout.total()),
            ));
        }
        let params = ParamVector::new(values, layout)?;
        Ok(Self { header, params })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }

    /// Hash of the serialized checkpoint.
    pub fn file_hash(&self) -> Result<String> {
        Ok(crate::hashing::hash_bytes(&self.to_bytes()?))
    }
}
