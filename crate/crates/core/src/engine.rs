//! The iterative watch-compress-write loop.
//!
//! Each step prefills one clip (optionally followed by a question) over a
//! bounded past: the last `n_s` context memories, optionally preceded by a
//! few long-term memories recalled from the bank. The clip's cache is then
//! split into a context memory, which enters the window, and a local memory,
//! which is appended to the bank. The working set of a prefill never depends
//! on how many clips came before.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::memindex::{ClipIndex, IndexModel};
use crate::recall::{relevance_from_trace, RelevanceVector};
use crate::scoring::{compress_clip, ClipMemory};
use crate::substrate::{KvCache, Model, TokenId};
use crate::topk;

pub use crate::scoring::CompressionStrategy;

/// What the prefill of a new clip sees besides the clip itself.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum PrefillContext {
    /// The windowed context memories.
    #[default]
    ContextMemory,
    /// The local memories of the windowed clips instead.
    LocalMemory,
    /// Both, deduplicated by position.
    Combined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub frames_per_clip: usize,
    pub tokens_per_frame: usize,
    /// Number of context memories kept in the window (`n_s`).
    pub n_s: usize,
    /// Context memory keep ratio `α_c`.
    pub ratio_context: f64,
    /// Local memory keep ratio `α_s`.
    pub ratio_local: f64,
    /// Long-term memories recalled into each prefill (`n_l`); needs a question.
    pub long_term: usize,
    pub encode_question: bool,
    pub strategy: CompressionStrategy,
    pub prefill_context: PrefillContext,
    /// First layer (1-based) whose attention counts towards relevance.
    pub start_layer: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            frames_per_clip: 8,
            tokens_per_frame: 4,
            n_s: 2,
            ratio_context: 0.25,
            ratio_local: 0.125,
            long_term: 0,
            encode_question: false,
            strategy: CompressionStrategy::Dual,
            prefill_context: PrefillContext::ContextMemory,
            start_layer: 3,
        }
    }
}

impl EngineConfig {
    pub fn clip_len(&self) -> usize {
        self.frames_per_clip * self.tokens_per_frame
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames_per_clip == 0 || self.tokens_per_frame == 0 {
            return Err(Error::InvalidEngineConfig("clips need at least one frame and one token per frame"));
        }
        for r in [self.ratio_context, self.ratio_local] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::InvalidRatio(r));
            }
        }
        if self.long_term > 0 && !self.encode_question {
            return Err(Error::InvalidEngineConfig("long-term recall during encoding needs encode_question"));
        }
        if self.start_layer == 0 {
            return Err(Error::InvalidEngineConfig("start_layer is 1-based"));
        }
        Ok(())
    }
}

/// One clip's entry in the bank.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub clip: usize,
    /// Number of stream tokens in the clip.
    pub n_tokens: usize,
    pub local: ClipMemory,
    /// Encoding-based relevance, when the clip was encoded with a question.
    pub relevance: Option<f64>,
    pub index: Option<ClipIndex>,
}

/// Append-only store of local memories.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub n_layers: usize,
    pub d_model: usize,
    /// First stream position after the last clip.
    pub next_position: u32,
    pub records: Vec<ClipRecord>,
}

impl MemoryBank {
    pub fn new(n_layers: usize, d_model: usize) -> Self {
        Self { n_layers, d_model, next_position: 0, records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Total stored entries per layer.
    pub fn entries_per_layer(&self) -> Vec<usize> {
        let mut out = alloc::vec![0usize; self.n_layers];
        for r in &self.records {
            for (o, n) in out.iter_mut().zip(r.local.kv.layer_lens()) {
                *o += n;
            }
        }
        out
    }

    /// Local memories of `clips` merged in temporal order.
    pub fn gather(&self, clips: &[usize]) -> KvCache {
        KvCache::merge(self.n_layers, self.d_model, clips.iter().map(|&i| &self.records[i].local.kv))
    }

    /// Every local memory in the bank.
    pub fn gather_all(&self) -> KvCache {
        KvCache::merge(self.n_layers, self.d_model, self.records.iter().map(|r| &r.local.kv))
    }

    /// Relevance scores recorded during question-present encoding.
    pub fn relevance(&self) -> Option<Vec<f64>> {
        self.records.iter().map(|r| r.relevance).collect()
    }

    /// Builds and caches the compact index of every record.
    pub fn attach_indexes(&mut self, index: &IndexModel) -> Result<()> {
        for r in &mut self.records {
            r.index = Some(index.clip_index(&r.local)?);
        }
        Ok(())
    }
}

/// Per-layer key counts of the running engine.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WorkingSetReport {
    pub window: Vec<usize>,
    pub bank: Vec<usize>,
    pub last_prefill: Vec<usize>,
    /// Largest per-layer key count seen by any prefill so far.
    pub peak_prefill: usize,
}

#[derive(Debug, Clone)]
pub struct EngineState {
    pub config: EngineConfig,
    /// Clips processed so far (`k`).
    pub step: usize,
    /// `(clip id, context memory)`, oldest first.
    pub window: VecDeque<(usize, ClipMemory)>,
    pub bank: MemoryBank,
    pub next_position: u32,
    last_prefill: Vec<usize>,
    peak_prefill: usize,
}

impl EngineState {
    pub fn new(model: &Model, config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let n_layers = model.n_layers();
        Ok(Self {
            config,
            step: 0,
            window: VecDeque::new(),
            bank: MemoryBank::new(n_layers, model.d_model()),
            next_position: 0,
            last_prefill: alloc::vec![0; n_layers],
            peak_prefill: 0,
        })
    }

    /// Bank records (not in the window) recalled as long-term memory.
    fn long_term_clips(&self) -> Vec<usize> {
        let oldest_windowed = self.window.front().map_or(self.bank.len(), |w| w.0);
        let candidates: Vec<f64> =
            self.bank.records[..oldest_windowed].iter().map(|r| r.relevance.unwrap_or(0.0)).collect();
        topk::top_k(&candidates, self.config.long_term)
    }

    fn assemble_past(&self, with_long_term: bool) -> KvCache {
        let mut parts: Vec<&KvCache> = Vec::new();
        if with_long_term && self.config.long_term > 0 {
            for i in self.long_term_clips() {
                parts.push(&self.bank.records[i].local.kv);
            }
        }
        for (clip, ctx) in &self.window {
            match self.config.prefill_context {
                PrefillContext::ContextMemory => parts.push(&ctx.kv),
                PrefillContext::LocalMemory => parts.push(&self.bank.records[*clip].local.kv),
                PrefillContext::Combined => {
                    parts.push(&ctx.kv);
                    parts.push(&self.bank.records[*clip].local.kv);
                }
            }
        }
        KvCache::merge(self.bank.n_layers, self.bank.d_model, parts)
    }

    /// Watches one clip. Returns the clip's encoding-based relevance when a
    /// question is given.
    pub fn process_clip(
        &mut self,
        model: &Model,
        clip: &[TokenId],
        question: Option<&[TokenId]>,
    ) -> Result<Option<f64>> {
        let cfg = &self.config;
        if clip.is_empty() || clip.len() > cfg.clip_len() {
            return Err(Error::ClipLength { expected: cfg.clip_len(), got: clip.len() });
        }
        let question = question.filter(|q| !q.is_empty());
        if question.is_some() && !cfg.encode_question {
            return Err(Error::QuestionNotEnabled);
        }

        let past = self.assemble_past(question.is_some());
        let mut tokens = clip.to_vec();
        if let Some(q) = question {
            tokens.extend_from_slice(q);
        }
        let trace = model.prefill(&tokens, &past, self.next_position)?;

        self.last_prefill = past.layer_lens().iter().map(|n| n + tokens.len()).collect();
        self.peak_prefill = self.peak_prefill.max(self.last_prefill.iter().copied().max().unwrap_or(0));

        let clip_rows: Vec<usize> = (0..clip.len()).collect();
        let (context, local) = compress_clip(&trace, &clip_rows, cfg.ratio_context, cfg.ratio_local, cfg.strategy)?;

        let relevance = match question {
            Some(q) => {
                let q_rows: Vec<usize> = (clip.len()..clip.len() + q.len()).collect();
                Some(relevance_from_trace(&trace, &q_rows, &clip_rows, cfg.start_layer)?)
            }
            None => None,
        };

        let id = self.bank.len();
        self.bank.records.push(ClipRecord { clip: id, n_tokens: clip.len(), local, relevance, index: None });
        self.window.push_back((id, context));
        while self.window.len() > self.config.n_s {
            self.window.pop_front();
        }
        self.step += 1;
        self.next_position += clip.len() as u32;
        self.bank.next_position = self.next_position;
        Ok(relevance)
    }

    pub fn working_set_report(&self) -> WorkingSetReport {
        let mut window = alloc::vec![0usize; self.bank.n_layers];
        for (_, ctx) in &self.window {
            for (w, n) in window.iter_mut().zip(ctx.kv.layer_lens()) {
                *w += n;
            }
        }
        WorkingSetReport {
            window,
            bank: self.bank.entries_per_layer(),
            last_prefill: self.last_prefill.clone(),
            peak_prefill: self.peak_prefill,
        }
    }

    pub fn into_bank(self) -> MemoryBank {
        self.bank
    }
}

/// Folds [`EngineState::process_clip`] over a whole stream.
pub fn encode_stream(
    model: &Model,
    config: &EngineConfig,
    clips: &[Vec<TokenId>],
    question: Option<&[TokenId]>,
) -> Result<(MemoryBank, Option<RelevanceVector>)> {
    let (state, g) = encode_stream_state(model, config, clips, question)?;
    Ok((state.into_bank(), g))
}

/// Like [`encode_stream`], but hands back the final engine state.
pub fn encode_stream_state(
    model: &Model,
    config: &EngineConfig,
    clips: &[Vec<TokenId>],
    question: Option<&[TokenId]>,
) -> Result<(EngineState, Option<RelevanceVector>)> {
    if clips.is_empty() {
        return Err(Error::NoClips);
    }
    let mut state = EngineState::new(model, config.clone())?;
    let mut values = Vec::new();
    for clip in clips {
        if let Some(g) = state.process_clip(model, clip, question)? {
            values.push(g);
        }
    }
    let g = question.filter(|q| !q.is_empty()).map(|q| RelevanceVector {
        values,
        start_layer: config.start_layer,
        question_len: q.len(),
    });
    Ok((state, g))
}
