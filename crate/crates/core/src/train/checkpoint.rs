//! Named-tensor checkpoint container.
//!
//! Layout, little-endian:
//!
//! ```text
//! "MTPC" | u16 version | u16 reserved | u32 meta_len | meta JSON
//!        | 32-byte SHA-256 of the model identity
//!        | u32 n_entries | n × (u16 name_len | name | MTPE tensor)
//! ```
//!
//! Each tensor is a complete embedding-format record, so its own header
//! carries dtype and shape.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::embedding::{decode_prefix, encode};
use crate::error::{Error, Result};
use crate::matrix::Scalar;
use crate::model::{InputDims, MtpConfig, MtpModel};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MTPC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize)]
struct Identity<'a> {
    config: &'a MtpConfig,
    dims: &'a InputDims,
}

fn identity_digest(config: &MtpConfig, dims: &InputDims) -> [u8; 32] {
    let json = serde_json::to_vec(&Identity { config, dims }).expect("config serializes");
    Sha256::digest(&json).into()
}

/// Hex SHA-256 over the model configuration and input widths. Two models
/// with the same hash have interchangeable parameter layouts.
pub fn config_hash(config: &MtpConfig, dims: &InputDims) -> String {
    hex::encode(identity_digest(config, dims))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: MtpConfig,
    pub dims: InputDims,
    pub config_hash: String,
    /// Epoch (1-based) the parameters were taken from.
    pub epoch: usize,
}

pub fn encode_checkpoint<T: Scalar>(model: &MtpModel<T>, epoch: usize) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        config: model.config.clone(),
        dims: model.dims,
        config_hash: config_hash(&model.config, &model.dims),
        epoch,
    };
    let meta_json = serde_json::to_vec(&meta).expect("meta serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&identity_digest(&model.config, &model.dims));
    let blocks = model.params.named_blocks();
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, m) in blocks {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&encode(m)?);
    }
    Ok(out)
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
                message: format!("truncated checkpoint reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn fail<X>(&self, offset: usize, message: String) -> Result<X> {
        Err(Error::Format {
            offset: offset as u64,
            message,
        })
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(MtpModel<T>, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return r.fail(0, "bad checkpoint magic".into());
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return r.fail(4, format!("unsupported checkpoint version {version}"));
    }
    r.u16("reserved")?;
    let meta_len = r.u32("metadata length")? as usize;
    let meta_at = r.pos;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .or_else(|e| r.fail(meta_at, format!("bad checkpoint metadata: {e}")))?;
    let digest_at = r.pos;
    let digest = r.take(32, "digest")?;
    let expected = identity_digest(&meta.config, &meta.dims);
    if digest != expected || meta.config_hash != hex::encode(expected) {
        return r.fail(digest_at, "config hash does not match stored configuration".into());
    }

    let mut model = MtpModel::<T>::new(meta.config.clone(), meta.dims)?;
    let n = r.u32("entry count")? as usize;
    let slots = model.params.named_blocks().len();
    if n != slots {
        return r.fail(r.pos - 4, format!("checkpoint has {n} tensors, model expects {slots}"));
    }
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u16("name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .or_else(|_| r.fail(name_at, "tensor name is not UTF-8".into()))?
            .to_string();
        let tensor_at = r.pos;
        let (emb, used) = decode_prefix(&bytes[r.pos..], r.pos)?;
        r.pos += used;
        entries.push((name, tensor_at, emb));
    }
    if r.pos != bytes.len() {
        return r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos));
    }

    let mut entries = entries.into_iter();
    let mut failure = None;
    model.params.visit_mut("", &mut |path, slot| {
        let (name, at, emb) = entries.next().expect("counts checked");
        if failure.is_some() {
            return;
        }
        if name != path {
            failure = Some((at, format!("expected tensor {path}, found {name}")));
        } else if emb.shape() != slot.shape() {
            failure = Some((at, format!("tensor {path}: shape {:?}, expected {:?}", emb.shape(), slot.shape())));
        } else {
            *slot = emb.into_matrix();
        }
    });
    if let Some((at, message)) = failure {
        return r.fail(at, message);
    }
    Ok((model, meta))
}

pub fn save_checkpoint<T: Scalar>(model: &MtpModel<T>, epoch: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model, epoch)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(MtpModel<T>, CheckpointMeta)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
