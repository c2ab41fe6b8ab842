//! Fast memory indexing.
//!
//! Encoding-based relevance needs the backbone to re-read the stream for
//! every new question. The fast index instead matches a question's query
//! vectors directly against stored keys:
//!
//! 1. For training pairs, collect per-layer raw relevance `r_i^l` (question
//!    queries attending over all stored keys of the bank) together with the
//!    encoding-based target `g_i`.
//! 2. Fit `g ≈ Σ_l α^l r^l` by least squares (no intercept).
//! 3. Keep the `K` layers with the largest `α^l`.
//! 4. Per clip, keep the `k` stored keys with the highest local saliency as a
//!    compact index; per question, keep the last token's query vector.
//! 5. Score clips by the attention mass the question index puts on each
//!    clip's index keys, softmax-normalised jointly over the whole bank.
//!
//! Layer ids in this module are 1-based, matching the engine's `start_layer`.

use alloc::vec;
use alloc::vec::Vec;

use crate::engine::{encode_stream, EngineConfig, MemoryBank};
use crate::error::{Error, Result};
use crate::linalg::{self, dot};
use crate::recall::{answer, recall_top, RecallSet};
use crate::scoring::ClipMemory;
use crate::substrate::{KvCache, Model, TokenId};
use crate::topk;

/// Ridge damping added to the normal equations.
pub const RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Normalization {
    /// Fit on raw `g_i`.
    #[default]
    Raw,
    /// Standardise `g_i` within each corpus before fitting.
    PerCorpus,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum LayerSelection {
    /// Largest signed weight.
    #[default]
    Signed,
    /// Largest absolute weight.
    Absolute,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum LayerChoice {
    /// Only the `K` selected layers.
    #[default]
    Selected,
    /// Every layer from `start_layer` on.
    All,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum QueryTokens {
    /// The last question token only.
    #[default]
    Last,
    /// Every question token.
    All,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum IndexKeys {
    /// Top-`k` stored keys by local saliency.
    #[default]
    Salient,
    /// Every stored key.
    AllStored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// `r_i^l` for layers `start_layer..=L`.
    pub layer_relevance: Vec<f64>,
    pub target: f64,
    pub corpus: usize,
    pub clip: usize,
}

/// Question query vectors per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionIndex {
    /// 1-based layer ids.
    pub layers: Vec<usize>,
    /// Per layer, `n_tokens x d_model` query rows.
    pub queries: Vec<Vec<f32>>,
    pub d_model: usize,
}

impl QuestionIndex {
    /// Encodes `question` on its own (no stream context) at `position` and
    /// keeps the queries of `layers`.
    pub fn encode(
        model: &Model,
        question: &[TokenId],
        position: u32,
        layers: &[usize],
        tokens: QueryTokens,
    ) -> Result<Self> {
        let trace = model.prefill(question, &KvCache::empty(model.n_layers()), position)?;
        let d = model.d_model();
        let n = question.len();
        let rows = match tokens {
            QueryTokens::All => 0..n,
            QueryTokens::Last => n - 1..n,
        };
        let mut queries = Vec::with_capacity(layers.len());
        for &l in layers {
            if l == 0 || l > model.n_layers() {
                return Err(Error::LayerMismatch(l));
            }
            queries.push(trace.queries[l - 1][rows.start * d..rows.end * d].to_vec());
        }
        Ok(Self { layers: layers.to_vec(), queries, d_model: d })
    }
}

/// Compact per-clip index: the most salient stored keys of selected layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipIndex {
    /// 1-based layer ids.
    pub layers: Vec<usize>,
    pub positions: Vec<Vec<u32>>,
    /// Per layer, `n x d_model` key rows (bit copies of bank entries).
    pub keys: Vec<Vec<f32>>,
    /// Set when fewer than `k` entries were stored in some layer.
    pub clamped: bool,
}

impl ClipIndex {
    pub fn layer(&self, layer: usize) -> Option<usize> {
        self.layers.iter().position(|&l| l == layer)
    }

    /// Number of stored `f32` values.
    pub fn size(&self) -> usize {
        self.keys.iter().map(Vec::len).sum()
    }
}

/// Per-layer `k` highest-saliency keys of a local memory.
pub fn build_clip_index(local: &ClipMemory, layers: &[usize], k: usize) -> Result<ClipIndex> {
    let mut out = ClipIndex { layers: layers.to_vec(), positions: vec![], keys: vec![], clamped: false };
    for &l in layers {
        let kv = local.kv.layers.get(l.wrapping_sub(1)).ok_or(Error::LayerMismatch(l))?;
        let saliency = &local.saliency[l - 1];
        let d = kv.dim();
        if k > kv.len() {
            out.clamped = true;
        }
        let keep = topk::top_k(saliency, k);
        out.positions.push(keep.iter().map(|&i| kv.positions[i]).collect());
        out.keys.push(keep.iter().flat_map(|&i| kv.key(i, d).iter().copied()).collect());
    }
    Ok(out)
}

/// Attention mass a set of queries puts on each owner's keys under one
/// softmax over all keys (per head, head-averaged, summed over queries).
fn global_mass<'a>(
    queries: &[f32],
    keys: impl Iterator<Item = (usize, &'a [f32])> + Clone,
    n_owners: usize,
    d_model: usize,
    n_heads: usize,
) -> Vec<f64> {
    let dh = d_model / n_heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut mass = vec![0.0f64; n_owners];
    let mut logits: Vec<f64> = Vec::new();
    for q in queries.chunks_exact(d_model) {
        for h in 0..n_heads {
            let hs = h * dh..(h + 1) * dh;
            logits.clear();
            logits.extend(keys.clone().map(|(_, k)| dot(&q[hs.clone()], &k[hs.clone()]) as f64 * scale));
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|z| libm::exp(z - max)).sum();
            for ((owner, _), z) in keys.clone().zip(&logits) {
                mass[owner] += libm::exp(z - max) / sum / n_heads as f64;
            }
        }
    }
    mass
}

/// `r_i^l` for every clip and every layer of `question`: the question's
/// queries attend over all stored keys of the bank at once.
pub fn raw_layer_relevance(question: &QuestionIndex, bank: &MemoryBank, n_heads: usize) -> Result<Vec<Vec<f64>>> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    if question.queries.iter().any(Vec::is_empty) {
        return Err(Error::EmptyTokens);
    }
    let d = question.d_model;
    let mut out = vec![vec![0.0f64; question.layers.len()]; bank.len()];
    for (li, &l) in question.layers.iter().enumerate() {
        let keys = bank.records.iter().enumerate().flat_map(move |(i, r)| {
            let kv = &r.local.kv.layers[l - 1];
            (0..kv.len()).map(move |j| (i, kv.key(j, d)))
        });
        let mass = global_mass(&question.queries[li], keys, bank.len(), d, n_heads);
        for (row, m) in out.iter_mut().zip(mass) {
            row[li] = m;
        }
    }
    Ok(out)
}

/// `r̂_i`: per layer of the question index, one softmax over the index keys
/// of every clip; the per-clip mass is summed over layers, optionally
/// weighted by `weights` (aligned with `question.layers`).
pub fn fast_relevance(
    question: &QuestionIndex,
    clips: &[&ClipIndex],
    n_heads: usize,
    weights: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if clips.is_empty() {
        return Err(Error::EmptyBank);
    }
    let d = question.d_model;
    let mut out = vec![0.0f64; clips.len()];
    for (li, &l) in question.layers.iter().enumerate() {
        let slots: Vec<usize> =
            clips.iter().map(|c| c.layer(l).ok_or(Error::LayerMismatch(l))).collect::<Result<_>>()?;
        let keys =
            clips.iter().zip(slots).enumerate().flat_map(|(i, (c, s))| c.keys[s].chunks_exact(d).map(move |k| (i, k)));
        let mass = global_mass(&question.queries[li], keys, clips.len(), d, n_heads);
        let w = weights.map_or(1.0, |w| w[li]);
        for (o, m) in out.iter_mut().zip(mass) {
            *o += w * m;
        }
    }
    Ok(out)
}

/// Least-squares weights for `g ≈ Σ_l α^l r^l`, without intercept, via
/// ridge-damped normal equations.
pub fn fit_weights(samples: &[TrainingSample]) -> Result<Vec<f64>> {
    let n = samples.first().map_or(0, |s| s.layer_relevance.len());
    if samples.is_empty() || samples.len() < n {
        return Err(Error::TooFewSamples { needed: n.max(1), got: samples.len() });
    }
    let mut xtx = vec![0.0f64; n * n];
    let mut xty = vec![0.0f64; n];
    for s in samples {
        let r = &s.layer_relevance;
        for i in 0..n {
            xty[i] += r[i] * s.target;
            for j in 0..n {
                xtx[i * n + j] += r[i] * r[j];
            }
        }
    }
    for i in 0..n {
        xtx[i * n + i] += RIDGE;
    }
    linalg::cholesky_solve(&xtx, &xty, n)
}

/// Sum of squared residuals of `weights` on `samples`.
pub fn residual(samples: &[TrainingSample], weights: &[f64]) -> f64 {
    samples
        .iter()
        .map(|s| {
            let pred: f64 = s.layer_relevance.iter().zip(weights).map(|(r, a)| r * a).sum();
            (pred - s.target) * (pred - s.target)
        })
        .sum()
}

/// The `K` layers with the largest weight (shallower layer on ties), as
/// ascending 1-based ids. `weights[0]` belongs to `start_layer`.
pub fn select_layers(weights: &[f64], start_layer: usize, top: usize, mode: LayerSelection) -> Vec<usize> {
    let keyed: Vec<f64> = match mode {
        LayerSelection::Signed => weights.to_vec(),
        LayerSelection::Absolute => weights.iter().map(|w| w.abs()).collect(),
    };
    topk::top_k(&keyed, top).into_iter().map(|i| i + start_layer).collect()
}

/// Runs both reading paths over each `(clips, question)` pair and emits one
/// sample per clip: targets from question-present encoding, features from
/// question-independent matching against the resulting bank.
///
/// The bank of question-present encoding is bit-identical to the one of
/// plain encoding (the question only ever follows the clip), so it is used
/// for the features directly.
pub fn collect_samples(
    model: &Model,
    config: &EngineConfig,
    pairs: &[(Vec<Vec<TokenId>>, Vec<TokenId>)],
    normalization: Normalization,
) -> Result<Vec<TrainingSample>> {
    let cfg = EngineConfig { encode_question: true, ..config.clone() };
    let layers: Vec<usize> = (cfg.start_layer..=model.n_layers()).collect();
    let mut out = Vec::new();
    for (corpus, (clips, question)) in pairs.iter().enumerate() {
        let (bank, g) = encode_stream(model, &cfg, clips, Some(question))?;
        let mut g = g.ok_or(Error::EmptyTokens)?.values;
        if normalization == Normalization::PerCorpus {
            standardize(&mut g);
        }
        let q = QuestionIndex::encode(model, question, bank.next_position, &layers, QueryTokens::All)?;
        let r = raw_layer_relevance(&q, &bank, model.config().n_heads)?;
        for (clip, (layer_relevance, target)) in r.into_iter().zip(g).enumerate() {
            out.push(TrainingSample { layer_relevance, target, corpus, clip });
        }
    }
    Ok(out)
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = libm::sqrt(var);
    for x in v.iter_mut() {
        *x = if sd > 0.0 { (*x - mean) / sd } else { 0.0 };
    }
}

/// Fitted fast index.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexModel {
    /// 1-based layer of `weights[0]`.
    pub start_layer: usize,
    pub weights: Vec<f64>,
    /// Selected layers `H`, ascending 1-based ids.
    pub selected: Vec<usize>,
    /// `K`
    pub top_layers: usize,
    /// `k`
    pub keys_per_clip: usize,
    pub normalization: Normalization,
    pub selection: LayerSelection,
    pub layer_choice: LayerChoice,
    pub query_tokens: QueryTokens,
    pub index_keys: IndexKeys,
    /// Weight each layer's mass by its fitted `α^l` when scoring.
    pub weighted: bool,
}

impl IndexModel {
    pub const DEFAULT_TOP_LAYERS: usize = 3;
    pub const DEFAULT_KEYS_PER_CLIP: usize = 5;

    /// Fits weights on `samples` and selects the top `top_layers` layers.
    pub fn fit(
        samples: &[TrainingSample],
        start_layer: usize,
        top_layers: usize,
        keys_per_clip: usize,
        normalization: Normalization,
        selection: LayerSelection,
    ) -> Result<Self> {
        if top_layers == 0 {
            return Err(Error::InvalidConfig("K must be at least 1"));
        }
        let weights = fit_weights(samples)?;
        let selected = select_layers(&weights, start_layer, top_layers, selection);
        Ok(Self {
            start_layer,
            weights,
            selected,
            top_layers,
            keys_per_clip,
            normalization,
            selection,
            layer_choice: LayerChoice::Selected,
            query_tokens: QueryTokens::Last,
            index_keys: IndexKeys::Salient,
            weighted: false,
        })
    }

    /// Layers the index actually scores.
    pub fn active_layers(&self) -> Vec<usize> {
        match self.layer_choice {
            LayerChoice::Selected => self.selected.clone(),
            LayerChoice::All => (self.start_layer..self.start_layer + self.weights.len()).collect(),
        }
    }

    pub fn weight_of(&self, layer: usize) -> f64 {
        self.weights[layer - self.start_layer]
    }

    pub fn clip_index(&self, local: &ClipMemory) -> Result<ClipIndex> {
        let k = match self.index_keys {
            IndexKeys::Salient => self.keys_per_clip,
            IndexKeys::AllStored => local.kv.max_len(),
        };
        build_clip_index(local, &self.active_layers(), k)
    }

    pub fn question_index(&self, model: &Model, question: &[TokenId], position: u32) -> Result<QuestionIndex> {
        QuestionIndex::encode(model, question, position, &self.active_layers(), self.query_tokens)
    }

    /// `r̂` for every clip of a bank whose indexes are attached.
    pub fn score(&self, model: &Model, bank: &MemoryBank, question: &[TokenId]) -> Result<Vec<f64>> {
        if bank.is_empty() {
            return Err(Error::EmptyBank);
        }
        let clips: Vec<&ClipIndex> =
            bank.records.iter().map(|r| r.index.as_ref().ok_or(Error::MissingIndex(r.clip))).collect::<Result<_>>()?;
        let q = self.question_index(model, question, bank.next_position)?;
        let weights: Option<Vec<f64>> = self.weighted.then(|| q.layers.iter().map(|&l| self.weight_of(l)).collect());
        fast_relevance(&q, &clips, model.config().n_heads, weights.as_deref())
    }
}

/// Recall through the fast index, then decode. No clip is re-encoded.
pub fn fast_recall_answer(
    model: &Model,
    bank: &MemoryBank,
    index: &IndexModel,
    question: &[TokenId],
    n_a: usize,
    max_steps: usize,
) -> Result<(RecallSet, Vec<TokenId>)> {
    let scores = index.score(model, bank, question)?;
    let recall = recall_top(bank, &scores, n_a)?;
    let tokens = answer(model, bank, &recall, question, max_steps)?;
    Ok((recall, tokens))
}
