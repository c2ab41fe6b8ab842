//! Attention-derived token scores and the dual-pathway clip compression.
//!
//! Two scores are computed per layer for every token `j` of a clip:
//!
//! * context aggregation `s_j`: attention `j` pays to the historical context
//!   plus attention it receives from the clip (self included),
//! * local saliency `ŝ_j`: attention it receives from the clip (self included).
//!
//! The context memory keeps the top `α_c` fraction by `s`, the local memory
//! the top `α_s` fraction by `ŝ`, independently in every layer.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::substrate::{AttentionMatrix, AttentionTrace, KvCache};
use crate::topk;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    ContextAggregation,
    LocalSaliency,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub kind: ScoreKind,
    pub values: Vec<f64>,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Kept indices into the score vector, ascending.
    pub kept: Vec<usize>,
    pub ratio: f64,
    pub layer: Option<usize>,
}

/// Which score drives each memory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum CompressionStrategy {
    /// Context memory by `s`, local memory by `ŝ`.
    #[default]
    Dual,
    /// Both memories by `s`.
    ContextOnly,
    /// Both memories by `ŝ`.
    LocalOnly,
}

fn check_rows(a: &AttentionMatrix, rows: &[usize]) -> Result<()> {
    match rows.iter().find(|&&r| r >= a.n_rows) {
        Some(&r) => Err(Error::OutOfBounds { index: r, len: a.n_rows }),
        None => Ok(()),
    }
}

pub fn context_scores(a: &AttentionMatrix, ctx_cols: &[usize], clip_rows: &[usize]) -> Result<ScoreVector> {
    check_rows(a, clip_rows)?;
    if let Some(&c) = ctx_cols.iter().find(|&&c| c >= a.n_cols) {
        return Err(Error::OutOfBounds { index: c, len: a.n_cols });
    }
    if clip_rows.iter().any(|&r| ctx_cols.contains(&a.col_of_row(r))) {
        return Err(Error::OverlappingIndices);
    }
    let values = clip_rows
        .iter()
        .map(|&j| {
            let paid: f64 = ctx_cols.iter().map(|&k| a.get(j, k) as f64).sum();
            let col = a.col_of_row(j);
            let received: f64 = clip_rows.iter().map(|&h| a.get(h, col) as f64).sum();
            paid + received
        })
        .collect();
    Ok(ScoreVector { kind: ScoreKind::ContextAggregation, values })
}

pub fn saliency_scores(a: &AttentionMatrix, clip_rows: &[usize]) -> Result<ScoreVector> {
    check_rows(a, clip_rows)?;
    let values = clip_rows
        .iter()
        .map(|&j| {
            let col = a.col_of_row(j);
            clip_rows.iter().map(|&k| a.get(k, col) as f64).sum()
        })
        .collect();
    Ok(ScoreVector { kind: ScoreKind::LocalSaliency, values })
}

/// `ceil(ratio * n)`, at least one, at most `n`. A tiny slack keeps products
/// such as `0.1 * 30` from rounding up past the exact integer.
pub fn keep_count(ratio: f64, n: usize) -> usize {
    let raw = libm::ceil(ratio * n as f64 - 1e-9);
    (raw.max(1.0) as usize).min(n)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidRatio(ratio))
    }
}

pub fn select_top(scores: &ScoreVector, ratio: f64) -> Result<SelectionResult> {
    check_ratio(ratio)?;
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    let kept = topk::top_k(&scores.values, keep_count(ratio, scores.len()));
    Ok(SelectionResult { kept, ratio, layer: None })
}

/// A compressed clip cache.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClipMemory {
    pub kv: KvCache,
    /// Per layer, local saliency of each kept entry (aligned with `kv`).
    pub saliency: Vec<Vec<f64>>,
}

impl ClipMemory {
    pub fn entries_per_layer(&self) -> Vec<usize> {
        self.kv.layer_lens()
    }
}

/// Splits a clip's cache into (context memory, local memory).
///
/// `clip_rows` are the trace rows belonging to the clip; any other rows (a
/// question suffix) never enter memory. The historical context is every past
/// column of each layer.
pub fn compress_clip(
    trace: &AttentionTrace,
    clip_rows: &[usize],
    ratio_context: f64,
    ratio_local: f64,
    strategy: CompressionStrategy,
) -> Result<(ClipMemory, ClipMemory)> {
    check_ratio(ratio_context)?;
    check_ratio(ratio_local)?;
    let n_layers = trace.attention.len();
    let d = trace.kv.layers.first().map_or(0, |l| l.dim());
    let mut context = ClipMemory { kv: KvCache::empty(n_layers), saliency: Vec::with_capacity(n_layers) };
    let mut local = ClipMemory { kv: KvCache::empty(n_layers), saliency: Vec::with_capacity(n_layers) };

    for (l, a) in trace.attention.iter().enumerate() {
        let ctx_cols: Vec<usize> = (0..a.n_past).collect();
        let s = context_scores(a, &ctx_cols, clip_rows)?;
        let s_hat = saliency_scores(a, clip_rows)?;
        let (for_ctx, for_local) = match strategy {
            CompressionStrategy::Dual => (&s, &s_hat),
            CompressionStrategy::ContextOnly => (&s, &s),
            CompressionStrategy::LocalOnly => (&s_hat, &s_hat),
        };
        for (memory, scores, ratio) in [(&mut context, for_ctx, ratio_context), (&mut local, for_local, ratio_local)] {
            let sel = select_top(scores, ratio)?;
            let rows: Vec<usize> = sel.kept.iter().map(|&i| clip_rows[i]).collect();
            memory.kv.layers[l] = trace.kv.layers[l].select(&rows, d);
            memory.saliency.push(sel.kept.iter().map(|&i| s_hat.values[i]).collect());
        }
    }
    Ok((context, local))
}
