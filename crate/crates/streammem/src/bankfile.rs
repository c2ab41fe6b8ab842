//! Memory bank files.
//!
//! Layout (all integers and floats little-endian), inside the common frame
//! with magic `FXM1`:
//!
//! ```text
//! digest[32] n_layers u32 n_heads u32 d_model u32 next_position u32 n_records u32
//! per record:
//!   clip u32, n_tokens u32, flags u8 (1 = relevance, 2 = index)
//!   per layer: count u32, positions u32[count], keys f32[count*d],
//!              values f32[count*d], saliency f64[count]
//!   [relevance f64]
//!   [index: clamped u8, n_layers u32, per layer: id u32, count u32,
//!           positions u32[count], keys f32[count*d]]
//! ```
//!
//! The digest is a SHA-256 over the model configuration, so a bank cannot be
//! loaded under a model it was not encoded with.

use std::path::Path;

use sha2::{Digest, Sha256};
use streammem_core::{ClipIndex, ClipMemory, ClipRecord, KvCache, LayerKv, MemoryBank, ModelConfig};

use crate::codec::{frame, unframe, ByteReader, ByteWriter};
use crate::error::{Error, FormatError, Result};

pub const BANK_MAGIC: &[u8; 4] = b"FXM1";
pub const BANK_VERSION: u16 = 1;

const FLAG_RELEVANCE: u8 = 1;
const FLAG_INDEX: u8 = 2;

pub type ConfigDigest = [u8; 32];

/// SHA-256 over every model field.
pub fn config_digest(model: &ModelConfig) -> ConfigDigest {
    let mut h = Sha256::new();
    for v in [
        model.n_layers,
        model.n_heads,
        model.d_model,
        model.n_topics,
        model.n_markers,
        model.tokens_per_topic,
        model.tokens_per_frame,
    ] {
        h.update((v as u64).to_le_bytes());
    }
    h.update((model.layer_temperatures.len() as u64).to_le_bytes());
    for t in &model.layer_temperatures {
        h.update(t.to_le_bytes());
    }
    for v in [model.perturbation_norm, model.position_scale, model.value_gain] {
        h.update(v.to_le_bytes());
    }
    h.update(model.seed.to_le_bytes());
    h.finalize().into()
}

/// Bank header fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BankHeader {
    pub digest: ConfigDigest,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
}

pub fn encode_bank(bank: &MemoryBank, n_heads: usize, digest: &ConfigDigest) -> Result<Vec<u8>> {
    let d = bank.d_model;
    let mut w = ByteWriter::default();
    w.bytes(digest);
    w.len(bank.n_layers)?;
    w.len(n_heads)?;
    w.len(d)?;
    w.u32(bank.next_position);
    w.len(bank.records.len())?;
    for r in &bank.records {
        w.len(r.clip)?;
        w.len(r.n_tokens)?;
        let mut flags = 0;
        if r.relevance.is_some() {
            flags |= FLAG_RELEVANCE;
        }
        if r.index.is_some() {
            flags |= FLAG_INDEX;
        }
        w.u8(flags);
        if r.local.kv.layers.len() != bank.n_layers || r.local.saliency.len() != bank.n_layers {
            return Err(FormatError::Malformed(format!("record {} has the wrong layer count", r.clip)).into());
        }
        for (layer, sal) in r.local.kv.layers.iter().zip(&r.local.saliency) {
            if sal.len() != layer.len() || layer.keys.len() != layer.len() * d || layer.values.len() != layer.len() * d
            {
                return Err(FormatError::Malformed(format!("record {} has misaligned entries", r.clip)).into());
            }
            w.len(layer.len())?;
            w.u32s(&layer.positions);
            w.f32s(&layer.keys);
            w.f32s(&layer.values);
            w.f64s(sal);
        }
        if let Some(g) = r.relevance {
            w.f64(g);
        }
        if let Some(idx) = &r.index {
            w.u8(idx.clamped as u8);
            w.len(idx.layers.len())?;
            for ((l, pos), keys) in idx.layers.iter().zip(&idx.positions).zip(&idx.keys) {
                w.len(*l)?;
                w.len(pos.len())?;
                w.u32s(pos);
                w.f32s(keys);
            }
        }
    }
    Ok(frame(BANK_MAGIC, BANK_VERSION, &w.buf))
}

/// Parses a bank without checking its digest.
pub fn decode_bank(data: &[u8]) -> Result<(BankHeader, MemoryBank)> {
    let body = unframe(BANK_MAGIC, BANK_VERSION, data)?;
    let mut r = ByteReader::new(body);
    let digest: ConfigDigest = r.take(32)?.try_into().unwrap();
    let n_layers = r.usize()?;
    let n_heads = r.usize()?;
    let d = r.usize()?;
    let next_position = r.u32()?;
    let n_records = r.usize()?;
    let mut bank = MemoryBank::new(n_layers, d);
    bank.next_position = next_position;
    for _ in 0..n_records {
        let clip = r.usize()?;
        let n_tokens = r.usize()?;
        let flags = r.u8()?;
        if flags & !(FLAG_RELEVANCE | FLAG_INDEX) != 0 {
            return Err(FormatError::Malformed(format!("unknown record flags {flags:#x}")).into());
        }
        let mut kv = KvCache::empty(0);
        let mut saliency = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let n = r.usize()?;
            let positions = r.u32s(n)?;
            let keys = r.f32s(n * d)?;
            let values = r.f32s(n * d)?;
            saliency.push(r.f64s(n)?);
            kv.layers.push(LayerKv { positions, keys, values });
        }
        let relevance = if flags & FLAG_RELEVANCE != 0 { Some(r.f64()?) } else { None };
        let index = if flags & FLAG_INDEX != 0 {
            let clamped = r.u8()? != 0;
            let nl = r.usize()?;
            let mut idx = ClipIndex { layers: vec![], positions: vec![], keys: vec![], clamped };
            for _ in 0..nl {
                idx.layers.push(r.usize()?);
                let n = r.usize()?;
                idx.positions.push(r.u32s(n)?);
                idx.keys.push(r.f32s(n * d)?);
            }
            Some(idx)
        } else {
            None
        };
        bank.records.push(ClipRecord { clip, n_tokens, local: ClipMemory { kv, saliency }, relevance, index });
    }
    if !r.is_done() {
        return Err(FormatError::Malformed("bytes after the last record".into()).into());
    }
    Ok((BankHeader { digest, n_layers, n_heads, d_model: d }, bank))
}

/// Parses a bank and rejects it unless it was written under `expected`.
pub fn decode_bank_checked(data: &[u8], expected: &ConfigDigest) -> Result<MemoryBank> {
    let (header, bank) = decode_bank(data)?;
    if &header.digest != expected {
        return Err(Error::ConfigMismatch);
    }
    Ok(bank)
}

pub fn save_bank(bank: &MemoryBank, n_heads: usize, digest: &ConfigDigest, path: &Path) -> Result<()> {
    std::fs::write(path, encode_bank(bank, n_heads, digest)?)?;
    Ok(())
}

pub fn load_bank(path: &Path, expected: &ConfigDigest) -> Result<MemoryBank> {
    decode_bank_checked(&std::fs::read(path)?, expected)
}
