//! Binary checkpoint format.
//!
//! All integers are little-endian:
//!
//! ```text
//! "BCM1"                       magic, 4 bytes
//! u32                          format version (1)
//! u64                          header length in bytes
//! header                       UTF-8 JSON, see `Header`
//! payload                      every parameter as f32, in manifest order
//! u32                          CRC32 of all preceding bytes
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SequentialModel;
use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::tensor::{Scalar, Shape};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BCM1";
pub const CHECKPOINT_VERSION: u32 = 1;

const PREFIX_LEN: usize = 4 + 4 + 8;
const CRC_LEN: usize = 4;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    input_shape: Shape,
    layers: Vec<LayerSpec>,
    seed: u64,
    parameters: Vec<ManifestEntry>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    offset: u64,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl<T: Scalar> SequentialModel<T> {
    fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0u64;
        self.named_params()
            .into_iter()
            .map(|(name, p)| {
                let entry = ManifestEntry {
                    name,
                    shape: p.value.dims().to_vec(),
                    offset,
                };
                offset += 4 * p.value.len() as u64;
                entry
            })
            .collect()
    }

    /// Serializes architecture, seed and parameters (stored as f32).
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            input_shape: self.input_shape().clone(),
            layers: self.specs(),
            seed: self.seed(),
            parameters: self.manifest(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| format_err(e.to_string()))?;
        let payload_len = 4 * self.total_params();
        let mut buf = Vec::with_capacity(PREFIX_LEN + json.len() + payload_len + CRC_LEN);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, p) in self.named_params() {
            for &v in p.value.data() {
                buf.extend_from_slice(&v.to_f32().to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_checkpoint_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds a model from checkpoint bytes. Nothing is returned unless the
    /// whole file validates.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = parse(bytes)?;
        let mut model = SequentialModel::new(header.input_shape.clone(), &header.layers, header.seed)
            .map_err(|e| format_err(format!("checkpoint architecture is invalid: {e}")))?;
        model.apply_payload(&header, payload)?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// Overwrites this model's parameters from a checkpoint whose
    /// architecture must match exactly.
    pub fn load_parameters(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (header, payload) = parse(&bytes)?;
        if header.input_shape != *self.input_shape() || header.layers != self.specs() {
            return Err(format_err("checkpoint architecture does not match the model"));
        }
        // stage into a copy so a failure leaves `self` untouched
        let mut staged = self.clone();
        staged.apply_payload(&header, payload)?;
        *self = staged;
        Ok(())
    }

    fn apply_payload(&mut self, header: &Header, payload: &[u8]) -> Result<()> {
        let expected = self.manifest();
        if header.parameters != expected {
            return Err(format_err("parameter manifest does not match the architecture"));
        }
        if payload.len() != 4 * self.total_params() {
            return Err(format_err(format!(
                "payload holds {} bytes, architecture needs {}",
                payload.len(),
                4 * self.total_params()
            )));
        }
        let mut chunks = payload.chunks_exact(4);
        for p in self.params_mut() {
            for v in p.value.data_mut() {
                let b = chunks.next().expect("payload length checked");
                *v = T::from_f32(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
            }
        }
        Ok(())
    }
}

fn parse(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < PREFIX_LEN + CRC_LEN {
        return Err(format_err(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(format_err("bad magic, not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!("unsupported checkpoint version {version}")));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - CRC_LEN);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(format_err("checksum mismatch (file truncated or corrupted)"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(PREFIX_LEN))
        .filter(|&end| end <= body.len())
        .ok_or_else(|| format_err(format!("header length {header_len} exceeds file")))?;
    let header: Header =
        serde_json::from_slice(&body[PREFIX_LEN..header_end]).map_err(|e| format_err(format!("bad header: {e}")))?;
    Ok((header, &body[header_end..]))
}
