//! Encoding-based memory reading, top-`n_a` recall and answer decoding.

use alloc::vec::Vec;

use crate::engine::{encode_stream, EngineConfig, MemoryBank};
use crate::error::{Error, Result};
use crate::substrate::{AttentionTrace, KvCache, Model, TokenId};
use crate::topk;

/// Per-clip relevance `g_i` of one question.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceVector {
    pub values: Vec<f64>,
    pub start_layer: usize,
    pub question_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallSet {
    /// Recalled clip ids, ascending.
    pub clips: Vec<usize>,
    pub n_a: usize,
    /// Their local memories, merged in temporal order.
    pub kv: KvCache,
}

/// Attention mass the question rows put on the clip rows' keys, summed over
/// layers `start_layer..=L` (1-based).
pub fn relevance_from_trace(
    trace: &AttentionTrace,
    question_rows: &[usize],
    clip_rows: &[usize],
    start_layer: usize,
) -> Result<f64> {
    let layers = trace.attention.len();
    if start_layer == 0 || start_layer > layers {
        return Err(Error::StartLayer { start: start_layer, layers });
    }
    let mut g = 0.0f64;
    for a in &trace.attention[start_layer - 1..] {
        for &r in question_rows.iter().chain(clip_rows) {
            if r >= a.n_rows {
                return Err(Error::OutOfBounds { index: r, len: a.n_rows });
            }
        }
        for &j in question_rows {
            for &k in clip_rows {
                g += a.get(j, a.col_of_row(k)) as f64;
            }
        }
    }
    Ok(g)
}

/// The `n_a` highest-scoring clips (earlier clip on ties), in temporal order.
pub fn recall_top(bank: &MemoryBank, scores: &[f64], n_a: usize) -> Result<RecallSet> {
    if n_a == 0 {
        return Err(Error::ZeroRecall);
    }
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    if scores.len() != bank.len() {
        return Err(Error::Misaligned { expected: bank.len(), got: scores.len() });
    }
    let clips = topk::top_k(scores, n_a);
    let kv = bank.gather(&clips);
    Ok(RecallSet { clips, n_a, kv })
}

/// Decodes an answer over the recalled memories. The question is placed
/// right after the end of the stream.
pub fn answer(
    model: &Model,
    bank: &MemoryBank,
    recall: &RecallSet,
    question: &[TokenId],
    max_steps: usize,
) -> Result<Vec<TokenId>> {
    if question.is_empty() {
        return Err(Error::EmptyTokens);
    }
    model.decode_greedy(&recall.kv, question, bank.next_position, max_steps)
}

/// Encodes the stream with `question` appended to every clip and returns the
/// per-clip relevance.
pub fn relevance_all(
    model: &Model,
    config: &EngineConfig,
    clips: &[Vec<TokenId>],
    question: &[TokenId],
) -> Result<RelevanceVector> {
    if question.is_empty() {
        return Err(Error::EmptyTokens);
    }
    let cfg = EngineConfig { encode_question: true, ..config.clone() };
    let (_, g) = encode_stream(model, &cfg, clips, Some(question))?;
    Ok(g.expect("question given"))
}
