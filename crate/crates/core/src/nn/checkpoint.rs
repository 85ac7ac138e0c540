//! Binary container shared by network checkpoints, predictor checkpoints
//! and cached datasets:
//!
//! ```text
//! magic      8 bytes
//! json_len   u64 little-endian
//! header     json_len bytes of UTF-8 JSON (carries "format_version")
//! payload    little-endian f32 values
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Architecture, Network, NnError, Params, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"CNLCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("magic mismatch: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: String, found: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("payload has {found} floats, header describes {expected}")]
    PayloadLength { found: usize, expected: usize },
    #[error("invalid network in checkpoint: {0}")]
    Network(#[from] NnError),
}

#[derive(Serialize, Deserialize)]
struct VersionProbe {
    format_version: u32,
}

/// Encodes a container into bytes.
pub fn encode_container<H: Serialize>(
    magic: &[u8; 8],
    header: &H,
    payload: &[&[f32]],
) -> Result<Vec<u8>, CheckpointError> {
    let json = serde_json::to_vec(header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let floats: usize = payload.iter().map(|p| p.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + floats * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for chunk in payload {
        for v in chunk.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a container, checking magic and format version.
pub fn decode_container<H: DeserializeOwned>(
    magic: &[u8; 8],
    bytes: &[u8],
) -> Result<(H, Vec<f32>), CheckpointError> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated(format!(
            "{} bytes, magic needs 8",
            bytes.len()
        )));
    }
    if &bytes[..8] != magic {
        return Err(CheckpointError::MagicMismatch {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated("missing header length".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::Truncated(format!("header declares {len} bytes")))?;
    let header_bytes = &bytes[16..end];
    let probe: VersionProbe =
        serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if probe.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: probe.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let header: H =
        serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let rest = &bytes[end..];
    if rest.len() % 4 != 0 {
        return Err(CheckpointError::Truncated(format!(
            "payload of {} bytes is not a whole number of floats",
            rest.len()
        )));
    }
    let payload = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((header, payload))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, CheckpointError> {
    fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Serialize, Deserialize)]
struct NetworkHeader {
    format_version: u32,
    architecture: Architecture,
}

/// Serializes a network with an arbitrary magic; used by other formats that
/// embed a network.
pub fn encode_network(magic: &[u8; 8], net: &Network) -> Result<Vec<u8>, CheckpointError> {
    encode_network_with(magic, net, serde_json::Map::new())
}

/// Like [`encode_network`], merging `extra` fields into the JSON header.
pub fn encode_network_with(
    magic: &[u8; 8],
    net: &Network,
    extra: serde_json::Map<String, serde_json::Value>,
) -> Result<Vec<u8>, CheckpointError> {
    let mut header = serde_json::to_value(NetworkHeader {
        format_version: FORMAT_VERSION,
        architecture: net.architecture(),
    })
    .map_err(|e| CheckpointError::Header(e.to_string()))?;
    if let serde_json::Value::Object(map) = &mut header {
        map.extend(extra);
    }
    let mut payload: Vec<&[f32]> = Vec::new();
    for layer in net.layers() {
        if let Some(p) = &layer.params {
            payload.push(p.weights.data());
            payload.push(p.bias.data());
        }
    }
    encode_container(magic, &header, &payload)
}

/// Inverse of [`encode_network_with`]; returns the full header for callers
/// that stored extra fields.
pub fn decode_network(
    magic: &[u8; 8],
    bytes: &[u8],
) -> Result<(Network, serde_json::Value), CheckpointError> {
    let (header, payload): (serde_json::Value, Vec<f32>) = decode_container(magic, bytes)?;
    let parsed: NetworkHeader = serde_json::from_value(header.clone())
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let arch = parsed.architecture;
    // Instantiate once to learn parameter shapes, then fill from the payload.
    let template = Network::new(&arch.input_shape, arch.layers.clone(), 0)?;
    let expected: usize = template
        .layers()
        .iter()
        .filter_map(|l| l.params.as_ref())
        .map(|p| p.weights.len() + p.bias.len())
        .sum();
    if payload.len() != expected {
        return Err(CheckpointError::PayloadLength {
            found: payload.len(),
            expected,
        });
    }
    let mut cursor = 0;
    let mut take = |shape: &[usize]| -> Result<Tensor, CheckpointError> {
        let n: usize = shape.iter().product();
        let t = Tensor::new(shape.to_vec(), payload[cursor..cursor + n].to_vec())?;
        cursor += n;
        Ok(t)
    };
    let mut params = Vec::with_capacity(template.len());
    for layer in template.layers() {
        params.push(match &layer.params {
            Some(p) => Some(Params {
                weights: take(p.weights.shape())?,
                bias: take(p.bias.shape())?,
            }),
            None => None,
        });
    }
    let net = Network::from_parts(&arch.input_shape, arch.layers, params)?;
    Ok((net, header))
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<(), CheckpointError> {
    write_atomic(path, &encode_network(&CHECKPOINT_MAGIC, net)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Network, CheckpointError> {
    let bytes = read_file(path)?;
    decode_network(&CHECKPOINT_MAGIC, &bytes).map(|(net, _)| net)
}
