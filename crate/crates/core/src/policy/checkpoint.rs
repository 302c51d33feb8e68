//! Binary policy checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `SMPC` |
//! | 4 | format version (`u32`) |
//! | 8 | header length `h` (`u64`) |
//! | h | UTF-8 JSON header: shape, normalizer, metadata, config hash, parameter count |
//! | 8·p | parameters as `f64`, in flat layout order |
//! | 32 | SHA-256 of every preceding byte |
//!
//! Parameters are stored as `f64` whatever the working precision, so both
//! `f64` and `f32` round-trips are bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Normalizer, PolicyParams, PolicyShape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"SMPC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: PolicyParams<T>,
    pub normalizer: Normalizer,
    pub metadata: BTreeMap<String, String>,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    shape: PolicyShape,
    normalizer: Normalizer,
    metadata: BTreeMap<String, String>,
    config_hash: String,
    param_count: usize,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.normalizer.dim() != self.params.shape().input_dim {
            return Err(Error::invalid("normalizer dimension differs from policy input"));
        }
        let header = serde_json::to_vec(&Header {
            shape: self.params.shape().clone(),
            normalizer: self.normalizer.clone(),
            metadata: self.metadata.clone(),
            config_hash: self.config_hash.clone(),
            param_count: self.params.len(),
        })
        .map_err(|e| Error::invalid(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.params.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.params.flat() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < 16 + 32 {
            return Err(fail(format!("file is {} bytes, too short for a checkpoint", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(fail("bad magic".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(fail("checksum mismatch".into()));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let header_bytes = body
            .get(16..16 + hlen)
            .ok_or_else(|| fail("header extends past end of file".into()))?;
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| fail(format!("header: {e}")))?;
        let payload = &body[16 + hlen..];
        if payload.len() != 8 * header.param_count {
            return Err(fail(format!(
                "expected {} parameters, found {} bytes",
                header.param_count,
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let params = PolicyParams::from_flat(header.shape, data).map_err(|e| fail(e.to_string()))?;
        if header.normalizer.dim() != params.shape().input_dim {
            return Err(fail("normalizer dimension differs from policy input".into()));
        }
        Ok(Self {
            params,
            normalizer: header.normalizer,
            metadata: header.metadata,
            config_hash: header.config_hash,
        })
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_bytes()?)))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn checkpoint_save<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn checkpoint_load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    Checkpoint::from_bytes(&std::fs::read(path)?, path)
}
