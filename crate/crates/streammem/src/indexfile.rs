//! Fitted index files (magic `FXI1`).
//!
//! Body: `start_layer u32, n_weights u32, weights f64[n], n_selected u32,
//! selected u32[n], K u32, k u32`, then one tag byte each for normalization,
//! layer selection, layer choice, query tokens, index keys and weighting.

use std::path::Path;

use streammem_core::{IndexKeys, IndexModel, LayerChoice, LayerSelection, Normalization, QueryTokens};

use crate::codec::{frame, unframe, ByteReader, ByteWriter};
use crate::error::{FormatError, Result};

pub const INDEX_MAGIC: &[u8; 4] = b"FXI1";
pub const INDEX_VERSION: u16 = 1;

pub fn encode_index(m: &IndexModel) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.len(m.start_layer)?;
    w.len(m.weights.len())?;
    w.f64s(&m.weights);
    w.len(m.selected.len())?;
    for &l in &m.selected {
        w.len(l)?;
    }
    w.len(m.top_layers)?;
    w.len(m.keys_per_clip)?;
    w.u8(match m.normalization {
        Normalization::Raw => 0,
        Normalization::PerCorpus => 1,
    });
    w.u8(match m.selection {
        LayerSelection::Signed => 0,
        LayerSelection::Absolute => 1,
    });
    w.u8(match m.layer_choice {
        LayerChoice::Selected => 0,
        LayerChoice::All => 1,
    });
    w.u8(match m.query_tokens {
        QueryTokens::Last => 0,
        QueryTokens::All => 1,
    });
    w.u8(match m.index_keys {
        IndexKeys::Salient => 0,
        IndexKeys::AllStored => 1,
    });
    w.u8(m.weighted as u8);
    Ok(frame(INDEX_MAGIC, INDEX_VERSION, &w.buf))
}

fn tag<T>(v: u8, name: &str, a: T, b: T) -> Result<T> {
    match v {
        0 => Ok(a),
        1 => Ok(b),
        _ => Err(FormatError::Malformed(format!("bad {name} tag {v}")).into()),
    }
}

pub fn decode_index(data: &[u8]) -> Result<IndexModel> {
    let body = unframe(INDEX_MAGIC, INDEX_VERSION, data)?;
    let mut r = ByteReader::new(body);
    let start_layer = r.usize()?;
    let n = r.usize()?;
    let weights = r.f64s(n)?;
    let ns = r.usize()?;
    let selected: Vec<usize> = r.u32s(ns)?.into_iter().map(|l| l as usize).collect();
    let top_layers = r.usize()?;
    let keys_per_clip = r.usize()?;
    let normalization = tag(r.u8()?, "normalization", Normalization::Raw, Normalization::PerCorpus)?;
    let selection = tag(r.u8()?, "selection", LayerSelection::Signed, LayerSelection::Absolute)?;
    let layer_choice = tag(r.u8()?, "layer choice", LayerChoice::Selected, LayerChoice::All)?;
    let query_tokens = tag(r.u8()?, "query tokens", QueryTokens::Last, QueryTokens::All)?;
    let index_keys = tag(r.u8()?, "index keys", IndexKeys::Salient, IndexKeys::AllStored)?;
    let weighted = tag(r.u8()?, "weighting", false, true)?;
    if !r.is_done() {
        return Err(FormatError::Malformed("trailing bytes in index body".into()).into());
    }
    if start_layer == 0 || selected.iter().any(|&l| l < start_layer || l >= start_layer + n) {
        return Err(FormatError::Malformed("selected layer outside the weighted range".into()).into());
    }
    Ok(IndexModel {
        start_layer,
        weights,
        selected,
        top_layers,
        keys_per_clip,
        normalization,
        selection,
        layer_choice,
        query_tokens,
        index_keys,
        weighted,
    })
}

pub fn save_index(m: &IndexModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_index(m)?)?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<IndexModel> {
    decode_index(&std::fs::read(path)?)
}
