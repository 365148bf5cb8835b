//! Checkpoint container: spec JSON + named f64 tensors + SHA-256.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic           b"FFSENSECKPT1" (12 bytes)
//! spec            u32 length, canonical NetworkSpec JSON
//! labels          u32 length, JSON array of identity class labels
//! fingerprint     u32 length, TrainingFingerprint JSON
//! tensor count    u32
//! per tensor      u16 name length, name bytes,
//!                 u8 ndim, u32 dims...,
//!                 f64 data (row-major)
//! digest          SHA-256 over every preceding byte
//! ```
//!
//! Loading verifies the magic string, the digest, and that every tensor
//! matches the shape the spec demands, so a truncated or hand-edited
//! file is rejected before inference sees it.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::graph::Network;
use super::{NetError, NetworkSpec};

pub const CHECKPOINT_MAGIC: &[u8; 12] = b"FFSENSECKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file or unsupported version (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint payload: {0}")]
    Corrupt(String),
    #[error("checkpoint tensor \"{name}\" has shape {got:?}, spec expects {expected:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint is missing tensor \"{name}\"")]
    MissingTensor { name: String },
    #[error("checkpoint carries unexpected tensor \"{name}\"")]
    UnexpectedTensor { name: String },
    #[error("checkpoint encode/decode: {0}")]
    Encoding(String),
}

/// Seed and configuration digest of the run that produced a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TrainingFingerprint {
    pub seed: u64,
    pub config_hash: String,
}

/// A spec bound to concrete weights.
///
/// `labels` carries the identity class order (subject ids) for
/// recognizer checkpoints and is empty for attribute heads, whose class
/// orders are fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
    pub fingerprint: TrainingFingerprint,
    pub labels: Vec<String>,
}

impl Checkpoint {
    pub fn from_network(
        network: &mut Network,
        fingerprint: TrainingFingerprint,
        labels: Vec<String>,
    ) -> Checkpoint {
        Checkpoint {
            spec: network.spec.clone(),
            tensors: network.export_tensors(),
            fingerprint,
            labels,
        }
    }

    /// Rebuilds the trainable network carrying these weights.
    pub fn to_network(&self) -> Result<Network, NetError> {
        let mut net = Network::init_zeros(&self.spec)?;
        net.import_tensors(&self.tensors)?;
        Ok(net)
    }

    /// Shape-checks every tensor against the spec's expectations.
    pub fn validate_shapes(&self) -> Result<(), CheckpointError> {
        let expected = Network::expected_tensor_shapes(&self.spec)
            .map_err(|e| CheckpointError::Encoding(e.to_string()))?;
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => {
                    return Err(CheckpointError::MissingTensor { name: name.clone() });
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(CheckpointError::ShapeMismatch {
                        name: name.clone(),
                        got: t.shape().to_vec(),
                        expected: shape.clone(),
                    });
                }
                Some(_) => {}
            }
        }
        for name in self.tensors.keys() {
            if !expected.contains_key(name) {
                return Err(CheckpointError::UnexpectedTensor { name: name.clone() });
            }
        }
        Ok(())
    }

    fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        let spec_json =
            serde_json::to_vec(&self.spec).map_err(|e| CheckpointError::Encoding(e.to_string()))?;
        let labels_json = serde_json::to_vec(&self.labels)
            .map_err(|e| CheckpointError::Encoding(e.to_string()))?;
        let fp_json = serde_json::to_vec(&self.fingerprint)
            .map_err(|e| CheckpointError::Encoding(e.to_string()))?;
        for section in [&spec_json, &labels_json, &fp_json] {
            buf.extend_from_slice(&(section.len() as u32).to_le_bytes());
            buf.extend_from_slice(section);
        }
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            let name_bytes = name.as_bytes();
            buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.push(tensor.ndim() as u8);
            for dim in tensor.shape() {
                buf.extend_from_slice(&(*dim as u32).to_le_bytes());
            }
            for v in tensor.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 32 {
            return Err(CheckpointError::Corrupt("file too short".into()));
        }
        if &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let expected = Sha256::digest(body);
        if digest != expected.as_slice() {
            return Err(CheckpointError::Corrupt("integrity hash mismatch".into()));
        }

        let mut cursor = Cursor {
            bytes: body,
            pos: CHECKPOINT_MAGIC.len(),
        };
        let spec: NetworkSpec = cursor.json_section()?;
        let labels: Vec<String> = cursor.json_section()?;
        let fingerprint: TrainingFingerprint = cursor.json_section()?;
        let n_tensors = cursor.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n_tensors {
            let name_len = cursor.u16()? as usize;
            let name = String::from_utf8(cursor.take(name_len)?.to_vec())
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            let ndim = cursor.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cursor.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let raw = cursor.take(len * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = ArrayD::from_shape_vec(shape, data)
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            tensors.insert(name, tensor);
        }
        if cursor.pos != body.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Checkpoint {
            spec,
            tensors,
            fingerprint,
            labels,
        })
    }

    /// Hex digest of the encoded checkpoint; used as the feature-cache
    /// key.
    pub fn content_hash(&self) -> Result<String, CheckpointError> {
        let encoded = self.encode()?;
        // the trailing 32 bytes already are the digest of the body
        let digest = &encoded[encoded.len() - 32..];
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt("unexpected end of file".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn json_section<T: serde::de::DeserializeOwned>(&mut self) -> Result<T, CheckpointError> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        serde_json::from_slice(raw).map_err(|e| CheckpointError::Encoding(e.to_string()))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let bytes = checkpoint.encode()?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

/// Loads and fully verifies a checkpoint (magic, digest, tensor
/// shapes).
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let checkpoint = Checkpoint::decode(&bytes)?;
    checkpoint.validate_shapes()?;
    Ok(checkpoint)
}
