//! Single checkpoint container for encoder + denoiser: a manifest header
//! followed by length-prefixed named f64 tensor blocks and a trailing
//! CRC-32. Bit-exact and diffable; no external serialization format.

use crate::diffusion::denoiser::{DenoiserConfig, DenoiserParams};
use crate::diffusion::schedule::ScheduleKind;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::params::{hex_string, Params};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"C2CKPT\0\0";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
    pub schedule_kind: ScheduleKind,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub encoder: EncoderParams,
    pub denoiser: DenoiserParams,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for d in t.shape() {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    out.extend_from_slice(&t.le_bytes());
}

pub fn checkpoint_to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&ck.meta).expect("meta serializes");
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    let count = ck.encoder.params.num_tensors() + ck.denoiser.params.num_tensors();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, t) in ck.encoder.params.iter() {
        push_tensor(&mut out, &format!("enc.{name}"), t);
    }
    for (name, t) in ck.denoiser.params.iter() {
        push_tensor(&mut out, &format!("dn.{name}"), t);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&checkpoint_to_bytes(ck))?;
    f.sync_all()?;
    Ok(())
}

fn take<'a>(cur: &mut &'a [u8], n: usize, origin: &str) -> Result<&'a [u8]> {
    if cur.len() < n {
        return Err(Error::Corrupt { path: origin.to_string(), reason: "truncated".into() });
    }
    let (head, rest) = cur.split_at(n);
    *cur = rest;
    Ok(head)
}

pub fn checkpoint_from_bytes(bytes: &[u8], origin: &str) -> Result<Checkpoint> {
    let corrupt = |reason: &str| Error::Corrupt {
        path: origin.to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 18 {
        return Err(corrupt("file too short"));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let mut cur = body;
    if take(&mut cur, 8, origin)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u16::from_le_bytes(take(&mut cur, 2, origin)?.try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let meta_len = u32::from_le_bytes(take(&mut cur, 4, origin)?.try_into().unwrap()) as usize;
    let meta: CheckpointMeta = serde_json::from_slice(take(&mut cur, meta_len, origin)?)
        .map_err(|e| corrupt(&format!("meta: {e}")))?;
    let count = u32::from_le_bytes(take(&mut cur, 4, origin)?.try_into().unwrap()) as usize;
    let mut enc = Params::new();
    let mut dn = Params::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut cur, 2, origin)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cur, name_len, origin)?.to_vec())
            .map_err(|_| corrupt("bad tensor name"))?;
        let ndim = take(&mut cur, 1, origin)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape
                .push(u32::from_le_bytes(take(&mut cur, 4, origin)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut cur, n * 8, origin)?;
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(f64::from_le_bytes(raw[i * 8..(i + 1) * 8].try_into().unwrap()));
        }
        let t = Tensor::from_vec(&shape, data);
        if let Some(rest) = name.strip_prefix("enc.") {
            enc.insert(rest, t);
        } else if let Some(rest) = name.strip_prefix("dn.") {
            dn.insert(rest, t);
        } else {
            return Err(corrupt(&format!("unknown tensor namespace in {name:?}")));
        }
    }
    if !cur.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(Checkpoint {
        encoder: EncoderParams { cfg: meta.encoder, params: enc },
        denoiser: DenoiserParams { cfg: meta.denoiser, params: dn },
        meta,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes, &path.display().to_string())
}

/// SHA-256 of the on-disk checkpoint, used in residual fingerprints.
pub fn checkpoint_file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex_string(&h.finalize()))
}
