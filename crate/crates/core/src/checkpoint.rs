//! Binary checkpoints.
//!
//! Layout (little endian):
//! `magic[8] | version u32 | meta_len u64 | meta JSON | n_tensors u32 |
//! { name_len u32 | name | ndim u32 | dims u64* | values f64* }* | sha256[32]`
//! where the digest covers every preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LabelTree;
use crate::encoder::{ExpertEnsemble, ModelConfig, Params};
use crate::error::{Result, UmeError};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"UMECKPT\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
    label_names: Vec<String>,
    label_parents: Vec<Option<usize>>,
    train_counts: Vec<usize>,
    backbone_frozen: bool,
}

pub fn to_bytes(ens: &ExpertEnsemble, cfg: &TrainConfig) -> Result<Vec<u8>> {
    let meta = Meta {
        model: ens.config.clone(),
        train: cfg.clone(),
        label_names: ens.tree.names().to_vec(),
        label_parents: ens.tree.parents().to_vec(),
        train_counts: ens.tree.train_counts().to_vec(),
        backbone_frozen: ens.backbone_frozen,
    };
    let meta = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    let tensors = ens.params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(UmeError::CorruptCheckpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ExpertEnsemble, TrainConfig)> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(UmeError::CorruptCheckpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(UmeError::VersionMismatch { found: version, expected: VERSION });
    }
    if bytes.len() < 12 + 32 {
        return Err(UmeError::CorruptCheckpoint("truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(UmeError::CorruptCheckpoint("digest mismatch (truncated or modified file)".into()));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let meta_len = r.u64()? as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
    let mut tree = LabelTree::new(meta.label_names, meta.label_parents)?;
    tree.set_train_counts(meta.train_counts)?;
    let mut ens = ExpertEnsemble::new(meta.model.clone(), tree.clone())?;
    let n = r.u32()? as usize;
    let mut params: Params = ens.params.clone();
    {
        let slots = params.tensors_mut();
        if slots.len() != n {
            return Err(UmeError::CorruptCheckpoint(format!("expected {} tensors, found {n}", slots.len())));
        }
        for (name, slot) in slots {
            let len = r.u32()? as usize;
            let got = std::str::from_utf8(r.take(len)?)
                .map_err(|_| UmeError::CorruptCheckpoint("tensor name is not UTF-8".into()))?;
            if got != name {
                return Err(UmeError::CorruptCheckpoint(format!("expected tensor {name}, found {got}")));
            }
            let ndim = r.u32()? as usize;
            let mut count = 1usize;
            for _ in 0..ndim {
                count = count.saturating_mul(r.u64()? as usize);
            }
            if count != slot.len() {
                return Err(UmeError::CorruptCheckpoint(format!("tensor {name} has {count} values, expected {}", slot.len())));
            }
            for v in slot.iter_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            }
        }
    }
    if r.pos != body.len() {
        return Err(UmeError::CorruptCheckpoint("trailing bytes after tensors".into()));
    }
    ens = ExpertEnsemble::from_parts(meta.model, params, tree, meta.backbone_frozen)?;
    Ok((ens, meta.train))
}

pub fn save(path: &Path, ens: &ExpertEnsemble, cfg: &TrainConfig) -> Result<()> {
    std::fs::write(path, to_bytes(ens, cfg)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ExpertEnsemble, TrainConfig)> {
    from_bytes(&std::fs::read(path)?)
}

/// SHA-256 over every tensor whose name does not start with `skip_prefix`.
pub fn parameter_digest(params: &Params, skip_prefix: Option<&str>) -> [u8; 32] {
    let mut h = Sha256::new();
    for t in params.tensors() {
        if skip_prefix.is_some_and(|p| t.name.starts_with(p)) {
            continue;
        }
        h.update(t.name.as_bytes());
        for &v in t.data {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}
