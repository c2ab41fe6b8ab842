//! A deterministic, attention-only causal transformer.
//!
//! The model has no MLPs and no normalisation. Each layer computes keys with
//! a seeded orthogonal map `O_l`, queries as `beta_l * O_l x` (same factor, so
//! the attention logit between two tokens is `beta_l` times the inner product
//! of their residuals, restricted to the head's subspace), values with a
//! second orthogonal map `U_l`, and writes the attention output back to the
//! residual stream through `U_l^T`.
//!
//! Embeddings are built from two orthonormal bases: a *topic* basis, which is
//! also what the output head reads, and a *marker* basis used to tag needle
//! content. A marked token carries both its topic and its marker, so a
//! question made of marker tokens finds the marked clip through attention,
//! and only the attended values can tell it which topic the clip was about.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, dot};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub n_topics: usize,
    /// Needle markers; their basis is orthogonal to the topic basis.
    pub n_markers: usize,
    /// Distinct plain content tokens per topic.
    pub tokens_per_topic: usize,
    pub tokens_per_frame: usize,
    /// Per-layer attention temperature `beta_l`, one per layer.
    pub layer_temperatures: Vec<f32>,
    /// Norm of the seeded per-token embedding perturbation (at most 0.1).
    pub perturbation_norm: f32,
    /// Amplitude of the additive sinusoidal position encoding.
    pub position_scale: f32,
    /// Scale of the output projection `U_l^T` that writes attention output
    /// back into the residual stream.
    pub value_gain: f32,
    pub seed: u64,
}

impl ModelConfig {
    /// Zero for the first two layers, then a linear ramp.
    pub fn default_temperatures(n_layers: usize) -> Vec<f32> {
        (0..n_layers).map(|l| if l < 2 { 0.0 } else { 32.0 + 8.0 * (l - 2) as f32 }).collect()
    }

    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 3 {
            return Err(Error::InvalidConfig("need at least 3 layers"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig("d_model must be divisible by n_heads"));
        }
        if self.n_topics == 0 || self.tokens_per_topic == 0 || self.tokens_per_frame == 0 {
            return Err(Error::InvalidConfig("topic and frame counts must be positive"));
        }
        if self.d_model < self.n_topics + self.n_markers {
            return Err(Error::InvalidConfig("d_model smaller than topic + marker basis; cannot be orthonormal"));
        }
        if self.layer_temperatures.len() != self.n_layers {
            return Err(Error::InvalidConfig("one temperature per layer required"));
        }
        if self.layer_temperatures.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::InvalidConfig("temperatures must be finite and non-negative"));
        }
        if self.layer_temperatures.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidConfig("temperatures must be non-decreasing"));
        }
        if !(0.0..=0.1).contains(&self.perturbation_norm) {
            return Err(Error::InvalidConfig("perturbation norm must lie in [0, 0.1]"));
        }
        if !self.value_gain.is_finite() || self.value_gain <= 0.0 {
            return Err(Error::InvalidConfig("value gain must be positive"));
        }
        if !self.position_scale.is_finite() || self.position_scale < 0.0 {
            return Err(Error::InvalidConfig("position scale must be finite and non-negative"));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            n_heads: 2,
            d_model: 32,
            n_topics: 8,
            n_markers: 8,
            tokens_per_topic: 8,
            tokens_per_frame: 4,
            layer_temperatures: Self::default_temperatures(6),
            perturbation_norm: 0.05,
            position_scale: 0.02,
            value_gain: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    /// Plain stream content of one topic.
    Content { topic: usize },
    /// Stream content of a topic, tagged with a needle marker.
    Marked { marker: usize, topic: usize },
    /// "What is this about?" probe carrying a topic direction.
    TopicQuestion { topic: usize },
    /// Question that asks about the clip tagged with `marker`.
    MarkerQuestion { marker: usize },
    /// Output token naming a topic.
    Answer { topic: usize },
}

/// Token id layout, in order: content, marked, topic questions, marker
/// questions, answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub n_topics: usize,
    pub n_markers: usize,
    pub tokens_per_topic: usize,
}

impl Vocab {
    pub const MARKER_QUESTION_VARIANTS: usize = 2;

    fn marked_base(&self) -> usize {
        self.n_topics * self.tokens_per_topic
    }
    fn topic_question_base(&self) -> usize {
        self.marked_base() + self.n_markers * self.n_topics
    }
    fn marker_question_base(&self) -> usize {
        self.topic_question_base() + self.n_topics
    }
    fn answer_base(&self) -> usize {
        self.marker_question_base() + self.n_markers * Self::MARKER_QUESTION_VARIANTS
    }

    pub fn size(&self) -> usize {
        self.answer_base() + self.n_topics
    }

    pub fn content(&self, topic: usize, variant: usize) -> TokenId {
        (topic * self.tokens_per_topic + variant % self.tokens_per_topic) as TokenId
    }
    pub fn marked(&self, marker: usize, topic: usize) -> TokenId {
        (self.marked_base() + marker * self.n_topics + topic) as TokenId
    }
    pub fn topic_question(&self, topic: usize) -> TokenId {
        (self.topic_question_base() + topic) as TokenId
    }
    pub fn marker_question(&self, marker: usize, variant: usize) -> TokenId {
        (self.marker_question_base()
            + marker * Self::MARKER_QUESTION_VARIANTS
            + variant % Self::MARKER_QUESTION_VARIANTS) as TokenId
    }
    pub fn answer(&self, topic: usize) -> TokenId {
        (self.answer_base() + topic) as TokenId
    }

    pub fn kind(&self, id: TokenId) -> Option<TokenKind> {
        let id = id as usize;
        if id < self.marked_base() {
            Some(TokenKind::Content { topic: id / self.tokens_per_topic })
        } else if id < self.topic_question_base() {
            let r = id - self.marked_base();
            Some(TokenKind::Marked { marker: r / self.n_topics, topic: r % self.n_topics })
        } else if id < self.marker_question_base() {
            Some(TokenKind::TopicQuestion { topic: id - self.topic_question_base() })
        } else if id < self.answer_base() {
            let r = id - self.marker_question_base();
            Some(TokenKind::MarkerQuestion { marker: r / Self::MARKER_QUESTION_VARIANTS })
        } else if id < self.size() {
            Some(TokenKind::Answer { topic: id - self.answer_base() })
        } else {
            None
        }
    }

    /// Content or marked tokens, i.e. tokens that make up the stream itself.
    pub fn is_stream_token(&self, id: TokenId) -> bool {
        matches!(self.kind(id), Some(TokenKind::Content { .. } | TokenKind::Marked { .. }))
    }

    /// Topic of a stream or answer token; `None` for questions.
    pub fn topic_of(&self, id: TokenId) -> Option<usize> {
        match self.kind(id)? {
            TokenKind::Content { topic } | TokenKind::Marked { topic, .. } | TokenKind::Answer { topic } => Some(topic),
            _ => None,
        }
    }
}

/// Cached keys and values of one layer. Keys and values are stored as full
/// `d_model` rows; head `h` owns the slice `h * d_head .. (h + 1) * d_head`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerKv {
    pub positions: Vec<u32>,
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

impl LayerKv {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        if self.positions.is_empty() {
            0
        } else {
            self.keys.len() / self.positions.len()
        }
    }

    pub fn key(&self, i: usize, d: usize) -> &[f32] {
        &self.keys[i * d..(i + 1) * d]
    }

    pub fn value(&self, i: usize, d: usize) -> &[f32] {
        &self.values[i * d..(i + 1) * d]
    }

    pub fn push(&mut self, position: u32, key: &[f32], value: &[f32]) {
        self.positions.push(position);
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
    }

    /// Entries at `indices` (which must be ascending) in that order.
    pub fn select(&self, indices: &[usize], d: usize) -> LayerKv {
        let mut out = LayerKv::default();
        for &i in indices {
            out.push(self.positions[i], self.key(i, d), self.value(i, d));
        }
        out
    }
}

/// A per-layer key-value cache with stream-absolute positions.
///
/// Freshly prefilled caches hold the same position set in every layer;
/// compressed memories may keep different positions per layer. Positions are
/// strictly increasing within each layer either way.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerKv>,
}

impl KvCache {
    pub fn empty(n_layers: usize) -> Self {
        Self { layers: vec![LayerKv::default(); n_layers] }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Entry count per layer.
    pub fn layer_lens(&self) -> Vec<usize> {
        self.layers.iter().map(LayerKv::len).collect()
    }

    /// Largest entry count over layers.
    pub fn max_len(&self) -> usize {
        self.layers.iter().map(LayerKv::len).max().unwrap_or(0)
    }

    pub fn total_entries(&self) -> usize {
        self.layers.iter().map(LayerKv::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(LayerKv::is_empty)
    }

    pub fn max_position(&self) -> Option<u32> {
        self.layers.iter().filter_map(|l| l.positions.last().copied()).max()
    }

    /// Merges caches layer by layer, ordering entries by position. An entry
    /// whose position already appears in the same layer is dropped, so the
    /// same token kept by two memories is only attended once.
    pub fn merge<'a, I>(n_layers: usize, d_model: usize, parts: I) -> KvCache
    where
        I: IntoIterator<Item = &'a KvCache>,
    {
        let parts: Vec<&KvCache> = parts.into_iter().collect();
        let mut out = KvCache::empty(n_layers);
        for (l, layer) in out.layers.iter_mut().enumerate() {
            let mut entries: Vec<(u32, usize, usize)> = Vec::new();
            for (p, part) in parts.iter().enumerate() {
                if let Some(src) = part.layers.get(l) {
                    entries.extend(src.positions.iter().enumerate().map(|(i, &pos)| (pos, p, i)));
                }
            }
            entries.sort_by_key(|e| (e.0, e.1));
            entries.dedup_by_key(|e| e.0);
            for (pos, p, i) in entries {
                let src = &parts[p].layers[l];
                layer.push(pos, src.key(i, d_model), src.value(i, d_model));
            }
        }
        out
    }

    /// Appends `other` after `self`; `other` must start at later positions.
    pub fn extend(&mut self, other: &KvCache) {
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            dst.positions.extend_from_slice(&src.positions);
            dst.keys.extend_from_slice(&src.keys);
            dst.values.extend_from_slice(&src.values);
        }
    }
}

/// Head-averaged attention weights of one layer. Rows are the queries of one
/// prefill pass; columns are the past cache entries followed by the pass's
/// own tokens, so row `r` is the same token as column `n_past + r`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub n_past: usize,
    pub data: Vec<f32>,
}

impl AttentionMatrix {
    pub fn zeros(n_rows: usize, n_past: usize) -> Self {
        let n_cols = n_past + n_rows;
        Self { n_rows, n_cols, n_past, data: vec![0.0; n_rows * n_cols] }
    }

    /// Builds a matrix from explicit rows (each of length `n_past + n_rows`).
    pub fn from_rows(n_past: usize, rows: &[Vec<f32>]) -> Self {
        let n_rows = rows.len();
        let n_cols = n_past + n_rows;
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for r in rows {
            assert_eq!(r.len(), n_cols, "row length must equal n_past + n_rows");
            data.extend_from_slice(r);
        }
        Self { n_rows, n_cols, n_past, data }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.n_cols + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.n_cols..(row + 1) * self.n_cols]
    }

    /// Column index of the token queried by `row`.
    pub fn col_of_row(&self, row: usize) -> usize {
        self.n_past + row
    }
}

/// Everything one prefill pass produces.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    /// One head-averaged matrix per layer.
    pub attention: Vec<AttentionMatrix>,
    /// Keys and values of this pass's tokens.
    pub kv: KvCache,
    /// Per layer, `rows x d_model` query vectors of this pass.
    pub queries: Vec<Vec<f32>>,
    /// `rows x d_model` residual stream after the last layer.
    pub hidden: Vec<f32>,
    pub start_position: u32,
}

impl AttentionTrace {
    pub fn n_rows(&self) -> usize {
        self.attention.first().map_or(0, |a| a.n_rows)
    }

    pub fn query(&self, layer: usize, row: usize, d_model: usize) -> &[f32] {
        &self.queries[layer][row * d_model..(row + 1) * d_model]
    }
}

/// Snapshot of the backbone call counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BackboneStats {
    pub prefill_calls: u64,
    /// Prefill calls whose input contained stream (video) tokens.
    pub stream_calls: u64,
    pub stream_tokens: u64,
}

#[derive(Debug, Default)]
struct Counters {
    prefill_calls: AtomicU64,
    stream_calls: AtomicU64,
    stream_tokens: AtomicU64,
}

#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocab,
    /// `vocab x d_model`
    embeddings: Vec<f32>,
    /// `n_topics x d_model`
    topic_basis: Vec<f32>,
    /// `n_markers x d_model`
    marker_basis: Vec<f32>,
    /// Per layer `d_model x d_model` orthogonal key factor.
    key_maps: Vec<Vec<f32>>,
    /// Per layer `d_model x d_model` orthogonal value map.
    value_maps: Vec<Vec<f32>>,
    counters: Counters,
}

impl Model {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let vocab =
            Vocab { n_topics: config.n_topics, n_markers: config.n_markers, tokens_per_topic: config.tokens_per_topic };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let n_basis = config.n_topics + config.n_markers;
        let basis = loop {
            let raw: Vec<Vec<f64>> = (0..n_basis).map(|_| linalg::gaussian_vec(&mut rng, d)).collect();
            if let Ok(b) = linalg::gram_schmidt(&raw) {
                break b;
            }
        };
        let to_f32 =
            |rows: &[Vec<f64>]| -> Vec<f32> { rows.iter().flat_map(|r| r.iter().map(|&x| x as f32)).collect() };
        let topic_basis = to_f32(&basis[..config.n_topics]);
        let marker_basis = to_f32(&basis[config.n_topics..]);

        let mut embeddings = vec![0.0f32; vocab.size() * d];
        for id in 0..vocab.size() {
            let row = &mut embeddings[id * d..(id + 1) * d];
            let add = |row: &mut [f32], b: &[f32]| row.iter_mut().zip(b).for_each(|(r, x)| *r += x);
            match vocab.kind(id as TokenId).expect("id in range") {
                TokenKind::Content { topic } | TokenKind::TopicQuestion { topic } | TokenKind::Answer { topic } => {
                    add(row, &topic_basis[topic * d..(topic + 1) * d])
                }
                TokenKind::Marked { marker, topic } => {
                    add(row, &topic_basis[topic * d..(topic + 1) * d]);
                    add(row, &marker_basis[marker * d..(marker + 1) * d]);
                }
                TokenKind::MarkerQuestion { marker } => add(row, &marker_basis[marker * d..(marker + 1) * d]),
            }
            let dir = linalg::gaussian_vec(&mut rng, d);
            let n = libm::sqrt(dir.iter().map(|x| x * x).sum::<f64>());
            for (r, x) in row.iter_mut().zip(&dir) {
                *r += (x / n) as f32 * config.perturbation_norm;
            }
        }

        let mut key_maps = Vec::with_capacity(config.n_layers);
        let mut value_maps = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            key_maps.push(linalg::random_orthogonal(&mut rng, d));
            value_maps.push(linalg::random_orthogonal(&mut rng, d));
        }

        Ok(Self {
            config,
            vocab,
            embeddings,
            topic_basis,
            marker_basis,
            key_maps,
            value_maps,
            counters: Counters::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }
    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }
    pub fn d_model(&self) -> usize {
        self.config.d_model
    }
    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }
    pub fn topic_basis(&self) -> &[f32] {
        &self.topic_basis
    }
    pub fn marker_basis(&self) -> &[f32] {
        &self.marker_basis
    }
    pub fn key_map(&self, layer: usize) -> &[f32] {
        &self.key_maps[layer]
    }
    pub fn value_map(&self, layer: usize) -> &[f32] {
        &self.value_maps[layer]
    }

    pub fn stats(&self) -> BackboneStats {
        BackboneStats {
            prefill_calls: self.counters.prefill_calls.load(Ordering::Relaxed),
            stream_calls: self.counters.stream_calls.load(Ordering::Relaxed),
            stream_tokens: self.counters.stream_tokens.load(Ordering::Relaxed),
        }
    }

    pub fn reset_stats(&self) {
        self.counters.prefill_calls.store(0, Ordering::Relaxed);
        self.counters.stream_calls.store(0, Ordering::Relaxed);
        self.counters.stream_tokens.store(0, Ordering::Relaxed);
    }

    /// Sinusoidal position encoding, scaled by `position_scale`.
    pub fn position_encoding(&self, position: u32) -> Vec<f32> {
        let d = self.config.d_model;
        let mut pe = vec![0.0f32; d];
        for i in 0..d / 2 {
            let freq = libm::pow(10000.0, -((2 * i) as f64) / d as f64);
            let angle = position as f64 * freq;
            pe[2 * i] = libm::sin(angle) as f32 * self.config.position_scale;
            pe[2 * i + 1] = libm::cos(angle) as f32 * self.config.position_scale;
        }
        pe
    }

    /// Token embedding plus position encoding.
    pub fn embed(&self, token: TokenId, position: u32) -> Result<Vec<f32>> {
        if token as usize >= self.vocab.size() {
            return Err(Error::UnknownToken(token));
        }
        let d = self.config.d_model;
        let mut x = self.embeddings[token as usize * d..(token as usize + 1) * d].to_vec();
        for (xi, p) in x.iter_mut().zip(self.position_encoding(position)) {
            *xi += p;
        }
        Ok(x)
    }

    /// Runs all layers over `tokens` at positions `start_position..`, with
    /// causal attention over `past` followed by the new tokens.
    pub fn prefill(&self, tokens: &[TokenId], past: &KvCache, start_position: u32) -> Result<AttentionTrace> {
        if tokens.is_empty() {
            return Err(Error::EmptyTokens);
        }
        let cfg = &self.config;
        let (d, n_heads, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head());
        if past.n_layers() != 0 && past.n_layers() != cfg.n_layers {
            return Err(Error::InvalidConfig("past cache has the wrong number of layers"));
        }
        if let Some(p) = past.max_position() {
            if p >= start_position {
                return Err(Error::PositionOverlap { past: p, start: start_position });
            }
        }

        let n = tokens.len();
        let mut x = Vec::with_capacity(n * d);
        for (i, &t) in tokens.iter().enumerate() {
            x.extend(self.embed(t, start_position + i as u32)?);
        }
        self.count_call(tokens);

        let empty = LayerKv::default();
        let scale = 1.0 / libm::sqrtf(dh as f32);
        let mut attention = Vec::with_capacity(cfg.n_layers);
        let mut queries = Vec::with_capacity(cfg.n_layers);
        let mut kv = KvCache::empty(cfg.n_layers);

        let mut k_new = vec![0.0f32; n * d];
        let mut v_new = vec![0.0f32; n * d];
        let mut logits: Vec<f32> = Vec::new();
        let mut weights: Vec<f32> = Vec::new();
        let mut head_out = vec![0.0f32; d];

        for l in 0..cfg.n_layers {
            let beta = cfg.layer_temperatures[l];
            let past_l = past.layers.get(l).unwrap_or(&empty);
            let n_past = past_l.len();
            for i in 0..n {
                let xi = &x[i * d..(i + 1) * d];
                linalg::mat_vec(&self.key_maps[l], d, d, xi, &mut k_new[i * d..(i + 1) * d]);
                linalg::mat_vec(&self.value_maps[l], d, d, xi, &mut v_new[i * d..(i + 1) * d]);
            }
            let q_new: Vec<f32> = k_new.iter().map(|k| beta * k).collect();

            let mut a = AttentionMatrix::zeros(n, n_past);
            let mut out = vec![0.0f32; n * d];
            for i in 0..n {
                let visible = n_past + i + 1;
                let key_at = |c: usize| -> &[f32] {
                    if c < n_past {
                        past_l.key(c, d)
                    } else {
                        &k_new[(c - n_past) * d..(c - n_past + 1) * d]
                    }
                };
                let value_at = |c: usize| -> &[f32] {
                    if c < n_past {
                        past_l.value(c, d)
                    } else {
                        &v_new[(c - n_past) * d..(c - n_past + 1) * d]
                    }
                };
                head_out.iter_mut().for_each(|h| *h = 0.0);
                for h in 0..n_heads {
                    let hs = h * dh..(h + 1) * dh;
                    let q = &q_new[i * d..(i + 1) * d][hs.clone()];
                    logits.clear();
                    logits.extend((0..visible).map(|c| dot(q, &key_at(c)[hs.clone()]) * scale));
                    softmax_into(&logits, &mut weights);
                    let row = &mut a.data[i * a.n_cols..i * a.n_cols + visible];
                    for (r, w) in row.iter_mut().zip(&weights) {
                        *r += w / n_heads as f32;
                    }
                    for (c, &w) in weights.iter().enumerate() {
                        let v = &value_at(c)[hs.clone()];
                        for (o, vi) in head_out[hs.clone()].iter_mut().zip(v) {
                            *o += w * vi;
                        }
                    }
                }
                linalg::mat_t_vec_add(&self.value_maps[l], d, d, &head_out, &mut out[i * d..(i + 1) * d]);
            }

            let layer_kv = &mut kv.layers[l];
            for i in 0..n {
                layer_kv.push(start_position + i as u32, &k_new[i * d..(i + 1) * d], &v_new[i * d..(i + 1) * d]);
            }
            for (xi, oi) in x.iter_mut().zip(&out) {
                *xi += cfg.value_gain * oi;
            }
            attention.push(a);
            queries.push(q_new);
        }

        Ok(AttentionTrace { attention, kv, queries, hidden: x, start_position })
    }

    fn count_call(&self, tokens: &[TokenId]) {
        self.counters.prefill_calls.fetch_add(1, Ordering::Relaxed);
        let stream = tokens.iter().filter(|&&t| self.vocab.is_stream_token(t)).count() as u64;
        if stream > 0 {
            self.counters.stream_calls.fetch_add(1, Ordering::Relaxed);
            self.counters.stream_tokens.fetch_add(stream, Ordering::Relaxed);
        }
    }

    /// Output-head logits over the whole vocabulary. Only answer tokens are
    /// scorable; the answer token of topic `t` scores `<hidden, e_t>`.
    pub fn logits(&self, hidden: &[f32]) -> Vec<f32> {
        let d = self.config.d_model;
        let mut out = vec![f32::NEG_INFINITY; self.vocab.size()];
        for t in 0..self.config.n_topics {
            out[self.vocab.answer(t) as usize] = dot(hidden, &self.topic_basis[t * d..(t + 1) * d]);
        }
        out
    }

    /// Argmax over logits, lowest id on ties.
    pub fn argmax(logits: &[f32]) -> TokenId {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        best as TokenId
    }

    /// Prefills `question` over `memories`, then emits `max_steps` greedy
    /// tokens, feeding each one back in.
    pub fn decode_greedy(
        &self,
        memories: &KvCache,
        question: &[TokenId],
        question_start: u32,
        max_steps: usize,
    ) -> Result<Vec<TokenId>> {
        if max_steps == 0 {
            return Err(Error::ZeroSteps);
        }
        let d = self.config.d_model;
        let trace = self.prefill(question, memories, question_start)?;
        let mut cache = if memories.n_layers() == 0 { KvCache::empty(self.config.n_layers) } else { memories.clone() };
        cache.extend(&trace.kv);
        let last = trace.n_rows() - 1;
        let mut next = Self::argmax(&self.logits(&trace.hidden[last * d..(last + 1) * d]));
        let mut out = Vec::with_capacity(max_steps);
        out.push(next);
        let mut position = question_start + question.len() as u32;
        while out.len() < max_steps {
            let step = self.prefill(&[next], &cache, position)?;
            cache.extend(&step.kv);
            next = Self::argmax(&self.logits(&step.hidden[..d]));
            out.push(next);
            position += 1;
        }
        Ok(out)
    }
}

/// Numerically stable softmax.
fn softmax_into(logits: &[f32], out: &mut Vec<f32>) {
    out.clear();
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    out.extend(logits.iter().map(|&z| libm::expf(z - max)));
    let sum: f32 = out.iter().sum();
    out.iter_mut().for_each(|w| *w /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(seed: u64) -> Model {
        Model::build(ModelConfig::with_seed(seed)).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = model(7);
        let b = model(7);
        assert_eq!(a.embeddings(), b.embeddings());
        for l in 0..a.n_layers() {
            assert_eq!(a.key_map(l), b.key_map(l));
            assert_eq!(a.value_map(l), b.value_map(l));
        }
        assert_ne!(a.embeddings(), model(8).embeddings());
    }

    #[test]
    fn rejects_small_d_model() {
        let cfg = ModelConfig { d_model: 6, n_heads: 2, n_markers: 0, ..ModelConfig::default() };
        assert!(matches!(Model::build(cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            ModelConfig { n_layers: 2, layer_temperatures: alloc::vec![0.0, 0.0], ..Default::default() },
            ModelConfig { n_heads: 3, ..Default::default() },
            ModelConfig { layer_temperatures: alloc::vec![0.0, 0.0, 5.0, 4.0, 6.0, 7.0], ..Default::default() },
            ModelConfig { perturbation_norm: 0.5, ..Default::default() },
        ];
        for cfg in bad {
            assert!(Model::build(cfg).is_err());
        }
    }

    #[test]
    fn vocab_layout_round_trips() {
        let m = model(1);
        let v = *m.vocab();
        for t in 0..8 {
            assert_eq!(v.kind(v.answer(t)), Some(TokenKind::Answer { topic: t }));
            assert_eq!(v.kind(v.content(t, 3)), Some(TokenKind::Content { topic: t }));
            assert_eq!(v.kind(v.topic_question(t)), Some(TokenKind::TopicQuestion { topic: t }));
            for c in 0..8 {
                assert_eq!(v.kind(v.marked(c, t)), Some(TokenKind::Marked { marker: c, topic: t }));
            }
        }
        assert_eq!(v.kind(v.marker_question(5, 1)), Some(TokenKind::MarkerQuestion { marker: 5 }));
        assert_eq!(v.kind(v.size() as TokenId), None);
        assert!(v.is_stream_token(v.marked(0, 0)));
        assert!(!v.is_stream_token(v.marker_question(0, 0)));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let m = model(2);
        let t = m.prefill(&[3], &KvCache::empty(6), 0).unwrap();
        for a in &t.attention {
            assert_eq!(a.data, alloc::vec![1.0]);
        }
    }

    #[test]
    fn prefill_errors() {
        let m = model(2);
        assert_eq!(m.prefill(&[], &KvCache::empty(6), 0).unwrap_err(), Error::EmptyTokens);
        let t = m.prefill(&[1, 2], &KvCache::empty(6), 5).unwrap();
        assert!(matches!(m.prefill(&[1], &t.kv, 6), Err(Error::PositionOverlap { .. })));
        assert!(matches!(m.prefill(&[10_000], &KvCache::empty(6), 0), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn decode_errors_on_zero_steps() {
        let m = model(2);
        assert_eq!(m.decode_greedy(&KvCache::empty(6), &[1], 0, 0), Err(Error::ZeroSteps));
    }

    #[test]
    fn merge_dedupes_and_orders() {
        let d = 2;
        let mut a = KvCache::empty(1);
        a.layers[0].push(1, &[1.0, 1.0], &[0.0, 0.0]);
        a.layers[0].push(5, &[5.0, 5.0], &[0.0, 0.0]);
        let mut b = KvCache::empty(1);
        b.layers[0].push(3, &[3.0, 3.0], &[0.0, 0.0]);
        b.layers[0].push(5, &[9.0, 9.0], &[0.0, 0.0]);
        let m = KvCache::merge(1, d, [&a, &b]);
        assert_eq!(m.layers[0].positions, alloc::vec![1, 3, 5]);
        assert_eq!(m.layers[0].key(2, d), &[5.0, 5.0]);
    }
}
