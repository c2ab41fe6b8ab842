//! Benchmark scenarios over needle corpora.
//!
//! A scenario fixes the corpus suite, the engine configuration and the way
//! memories are read back. Running it encodes every corpus, answers every
//! question and aggregates a [`RunMetrics`] record. Scenarios share the
//! model's call counters, so they run one after another.

use std::time::Instant;

use streammem_core::{
    answer, collect_samples, encode_stream_state, recall_top, CompressionStrategy, EngineConfig, IndexKeys, IndexModel,
    KvCache, LayerChoice, LayerSelection, MemoryBank, Model, Normalization, PrefillContext, QueryTokens, RecallSet,
    TokenId,
};

use crate::corpus::{gen_corpus, Corpus, StreamSpec};
use crate::error::{Error, Result};
use crate::metrics::{eval_recall, spearman, PhaseTimes, RunMetrics};

/// Which memories the answer is decoded over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeContext {
    /// The `n_a` recalled local memories.
    Recalled,
    /// Every local memory in the bank.
    AllBank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retrieval {
    /// Question-present encoding, relevance from instruction attention.
    Encoding,
    /// The fitted fast index over a question-free bank.
    Fast,
    /// Both; the encoding path fills the primary metrics.
    Both,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexOptions {
    /// Training corpora, seeded from `train_seed` upward.
    pub n_train: usize,
    pub train_seed: u64,
    pub top_layers: usize,
    pub keys_per_clip: usize,
    pub normalization: Normalization,
    pub selection: LayerSelection,
    pub layer_choice: LayerChoice,
    pub query_tokens: QueryTokens,
    pub index_keys: IndexKeys,
    pub weighted: bool,
}

impl Default for IndexOptions {
    fn default() -> Self {
        Self {
            n_train: 20,
            train_seed: 1_000_000,
            top_layers: IndexModel::DEFAULT_TOP_LAYERS,
            keys_per_clip: IndexModel::DEFAULT_KEYS_PER_CLIP,
            normalization: Normalization::Raw,
            selection: LayerSelection::Signed,
            layer_choice: LayerChoice::Selected,
            query_tokens: QueryTokens::Last,
            index_keys: IndexKeys::Salient,
            weighted: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub n_corpora: usize,
    /// Corpus `i` is generated from seed `corpus_seed + i`.
    pub corpus_seed: u64,
    pub n_clips: usize,
    pub n_needles: usize,
    pub noise_rate: f64,
    pub needle_density: f64,
    pub engine: EngineConfig,
    pub n_a: usize,
    pub max_steps: usize,
    pub decode: DecodeContext,
    pub retrieval: Retrieval,
    pub index: IndexOptions,
    /// Also score the uniform frame-sampling baseline.
    pub truncation: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "streammem".into(),
            n_corpora: 50,
            corpus_seed: 0,
            n_clips: 32,
            n_needles: 1,
            noise_rate: 0.1,
            needle_density: 1.0,
            engine: EngineConfig::default(),
            n_a: 4,
            max_steps: 1,
            decode: DecodeContext::Recalled,
            retrieval: Retrieval::Encoding,
            index: IndexOptions::default(),
            truncation: false,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.n_clips == 0 {
            return Err(Error::InvalidScenario("scenario has zero clips".into()));
        }
        if self.n_corpora == 0 {
            return Err(Error::InvalidScenario("scenario has no corpora".into()));
        }
        if self.n_a == 0 {
            return Err(Error::InvalidScenario("n_a must be at least 1".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidScenario("max_steps must be at least 1".into()));
        }
        if self.retrieval != Retrieval::Encoding && self.engine.long_term > 0 {
            return Err(Error::InvalidScenario("long-term recall needs question-present encoding".into()));
        }
        self.engine.validate()?;
        Ok(())
    }

    pub fn stream_spec(&self, seed: u64) -> StreamSpec {
        StreamSpec {
            frames_per_clip: self.engine.frames_per_clip,
            tokens_per_frame: self.engine.tokens_per_frame,
            needle_density: self.needle_density,
            ..StreamSpec::needle_suite(self.n_clips, self.n_needles, self.noise_rate, seed)
        }
    }

    /// Keys per layer that recalled decoding reads: `n_a` clips of
    /// `ceil(α_s · clip_len)` entries.
    pub fn decode_budget(&self) -> usize {
        self.n_a.min(self.n_clips)
            * streammem_core::scoring::keep_count(self.engine.ratio_local, self.engine.clip_len())
    }
}

/// Fits an index on `opts.n_train` corpora drawn like the scenario's own
/// (with disjoint seeds).
pub fn train_index(model: &Model, scenario: &Scenario) -> Result<IndexModel> {
    let opts = &scenario.index;
    let mut pairs: Vec<(Vec<Vec<TokenId>>, Vec<TokenId>)> = Vec::new();
    for i in 0..opts.n_train {
        let corpus = gen_corpus(&scenario.stream_spec(opts.train_seed + i as u64))?;
        for qa in &corpus.qa {
            pairs.push((corpus.clips.clone(), qa.question.clone()));
        }
    }
    let cfg = EngineConfig { long_term: 0, ..scenario.engine.clone() };
    let samples = collect_samples(model, &cfg, &pairs, opts.normalization)?;
    let mut index = IndexModel::fit(
        &samples,
        cfg.start_layer,
        opts.top_layers,
        opts.keys_per_clip,
        opts.normalization,
        opts.selection,
    )?;
    index.layer_choice = opts.layer_choice;
    index.query_tokens = opts.query_tokens;
    index.index_keys = opts.index_keys;
    index.weighted = opts.weighted;
    Ok(index)
}

/// Uniformly samples whole frames up to `budget` tokens, prefills them as a
/// short contiguous stream and decodes the answer after them.
pub fn truncation_answer(
    model: &Model,
    corpus: &Corpus,
    tokens_per_frame: usize,
    budget: usize,
    question: &[TokenId],
    max_steps: usize,
) -> Result<Vec<TokenId>> {
    let frames: Vec<&[TokenId]> = corpus.clips.iter().flat_map(|c| c.chunks(tokens_per_frame)).collect();
    let n_keep = (budget / tokens_per_frame).clamp(1, frames.len());
    let step = frames.len() as f64 / n_keep as f64;
    let mut tokens = Vec::with_capacity(n_keep * tokens_per_frame);
    for i in 0..n_keep {
        let f = ((i as f64 + 0.5) * step) as usize;
        tokens.extend_from_slice(frames[f.min(frames.len() - 1)]);
    }
    let trace = model.prefill(&tokens, &KvCache::empty(model.n_layers()), 0)?;
    Ok(model.decode_greedy(&trace.kv, question, tokens.len() as u32, max_steps)?)
}

fn decode(
    model: &Model,
    bank: &MemoryBank,
    recall: &RecallSet,
    question: &[TokenId],
    scenario: &Scenario,
) -> Result<Vec<TokenId>> {
    Ok(match scenario.decode {
        DecodeContext::Recalled => answer(model, bank, recall, question, scenario.max_steps)?,
        DecodeContext::AllBank => {
            model.decode_greedy(&bank.gather_all(), question, bank.next_position, scenario.max_steps)?
        }
    })
}

#[derive(Default)]
struct Tally {
    n: usize,
    recall: f64,
    correct: usize,
}

impl Tally {
    fn add(&mut self, clips: &[usize], truth: &[usize], tokens: &[TokenId], expected: TokenId) {
        self.n += 1;
        self.recall += eval_recall(clips, truth).0;
        self.correct += (tokens.first() == Some(&expected)) as usize;
    }

    fn rates(&self) -> (f64, f64) {
        let n = self.n.max(1) as f64;
        (self.recall / n, self.correct as f64 / n)
    }
}

/// Runs a scenario; `index` is used for fast retrieval, or trained when
/// absent and needed.
pub fn run_benchmark(model: &Model, scenario: &Scenario, index: Option<&IndexModel>) -> Result<RunMetrics> {
    scenario.validate()?;
    let use_enc = scenario.retrieval != Retrieval::Fast;
    let use_fast = scenario.retrieval != Retrieval::Encoding;
    let trained;
    let index = match (use_fast, index) {
        (false, _) => None,
        (true, Some(i)) => Some(i),
        (true, None) => {
            trained = train_index(model, scenario)?;
            Some(&trained)
        }
    };

    let before = model.stats();
    let mut wall = PhaseTimes::default();
    let mut enc = Tally::default();
    let mut fast = Tally::default();
    let mut trunc = Tally::default();
    let mut rho = Vec::new();
    let mut peak = 0usize;
    let mut entries = 0usize;
    let budget = scenario.decode_budget();
    let enc_cfg = EngineConfig { encode_question: true, ..scenario.engine.clone() };

    for c in 0..scenario.n_corpora {
        let corpus = gen_corpus(&scenario.stream_spec(scenario.corpus_seed + c as u64))?;

        let fast_bank = if let Some(index) = index {
            let t = Instant::now();
            let (state, _) = encode_stream_state(model, &scenario.engine, &corpus.clips, None)?;
            peak = peak.max(state.working_set_report().peak_prefill);
            let mut bank = state.into_bank();
            bank.attach_indexes(index)?;
            wall.encode += t.elapsed().as_secs_f64();
            Some(bank)
        } else {
            None
        };
        let mut bank_size = fast_bank.as_ref().map(|b| b.entries_per_layer().iter().sum::<usize>());

        for qa in &corpus.qa {
            let mut g = None;
            if use_enc {
                let t = Instant::now();
                let (state, rel) = encode_stream_state(model, &enc_cfg, &corpus.clips, Some(&qa.question))?;
                peak = peak.max(state.working_set_report().peak_prefill);
                let bank = state.into_bank();
                bank_size.get_or_insert(bank.entries_per_layer().iter().sum());
                let values = rel.expect("question given").values;
                wall.encode += t.elapsed().as_secs_f64();

                let t = Instant::now();
                let recall = recall_top(&bank, &values, scenario.n_a)?;
                wall.recall += t.elapsed().as_secs_f64();
                let t = Instant::now();
                let tokens = decode(model, &bank, &recall, &qa.question, scenario)?;
                wall.decode += t.elapsed().as_secs_f64();
                enc.add(&recall.clips, &qa.relevant_clips, &tokens, qa.answer);
                g = Some(values);
            }
            if let (Some(index), Some(bank)) = (index, &fast_bank) {
                let t = Instant::now();
                let scores = index.score(model, bank, &qa.question)?;
                let recall = recall_top(bank, &scores, scenario.n_a)?;
                wall.recall += t.elapsed().as_secs_f64();
                let t = Instant::now();
                let tokens = decode(model, bank, &recall, &qa.question, scenario)?;
                wall.decode += t.elapsed().as_secs_f64();
                fast.add(&recall.clips, &qa.relevant_clips, &tokens, qa.answer);
                if let Some(g) = &g {
                    rho.push(spearman(&scores, g));
                }
            }
            if scenario.truncation {
                let t = Instant::now();
                let tokens = truncation_answer(
                    model,
                    &corpus,
                    scenario.engine.tokens_per_frame,
                    budget,
                    &qa.question,
                    scenario.max_steps,
                )?;
                wall.decode += t.elapsed().as_secs_f64();
                trunc.add(&[], &qa.relevant_clips, &tokens, qa.answer);
            }
        }
        entries += bank_size.unwrap_or(0);
    }

    let after = model.stats();
    let primary = if use_enc { &enc } else { &fast };
    let (recall_at_n_a, accuracy) = primary.rates();
    Ok(RunMetrics {
        scenario: scenario.name.clone(),
        n_questions: primary.n,
        recall_at_n_a,
        accuracy,
        truncation_accuracy: scenario.truncation.then(|| trunc.rates().1),
        fast_recall_at_n_a: (use_enc && use_fast).then(|| fast.rates().0),
        fast_accuracy: (use_enc && use_fast).then(|| fast.rates().1),
        spearman_fast_vs_encoding: (!rho.is_empty()).then(|| rho.iter().sum::<f64>() / rho.len() as f64),
        peak_prefill_keys: peak,
        bank_entries: entries as f64 / scenario.n_corpora as f64,
        prefill_calls: after.prefill_calls - before.prefill_calls,
        stream_calls: after.stream_calls - before.stream_calls,
        stream_tokens: after.stream_tokens - before.stream_tokens,
        wall,
    })
}

/// Rows of the compression, prefill-context, decoding-context and clip-size
/// ablations, each a variation of `base`.
pub fn ablation_grid(base: &Scenario) -> Vec<Scenario> {
    let mut out = Vec::new();
    let mut push = |name: &str, f: &dyn Fn(&mut Scenario)| {
        let mut s = base.clone();
        s.name = name.into();
        f(&mut s);
        out.push(s);
    };
    push("compress-context-only", &|s| s.engine.strategy = CompressionStrategy::ContextOnly);
    push("compress-local-only", &|s| s.engine.strategy = CompressionStrategy::LocalOnly);
    push("compress-dual", &|s| s.engine.strategy = CompressionStrategy::Dual);
    push("prefill-context-memory", &|s| s.engine.prefill_context = PrefillContext::ContextMemory);
    push("prefill-local-memory", &|s| s.engine.prefill_context = PrefillContext::LocalMemory);
    push("prefill-combined", &|s| s.engine.prefill_context = PrefillContext::Combined);
    push("decode-all-bank", &|s| s.decode = DecodeContext::AllBank);
    push("decode-recalled", &|s| s.decode = DecodeContext::Recalled);
    for frames in [8, 16, 32] {
        push(&format!("clip-frames-{frames}"), &|s| s.engine.frames_per_clip = frames);
    }
    out
}

/// Rows of the index ablation: from all layers with every question token and
/// every stored key down to selected layers, last token, salient keys.
pub fn index_grid(base: &Scenario) -> Vec<Scenario> {
    let rows = [
        ("index-all-layers-all-tokens", LayerChoice::All, QueryTokens::All, IndexKeys::AllStored),
        ("index-selected-all-tokens", LayerChoice::Selected, QueryTokens::All, IndexKeys::AllStored),
        ("index-selected-last-token", LayerChoice::Selected, QueryTokens::Last, IndexKeys::AllStored),
        ("index-selected-last-salient", LayerChoice::Selected, QueryTokens::Last, IndexKeys::Salient),
    ];
    rows.iter()
        .map(|&(name, layer_choice, query_tokens, index_keys)| {
            let mut s = base.clone();
            s.name = name.into();
            s.retrieval = Retrieval::Both;
            s.index.layer_choice = layer_choice;
            s.index.query_tokens = query_tokens;
            s.index.index_keys = index_keys;
            s
        })
        .collect()
}
