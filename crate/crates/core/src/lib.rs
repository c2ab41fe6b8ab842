//! Streaming clip memory for causal-attention sequence models.
//!
//! A token stream is consumed clip by clip. Each clip is prefilled over a
//! small window of compressed history, then its key-value cache is pruned
//! twice: once into a *context* memory that is carried into the next few
//! prefills, once into a *local* memory that is appended to a memory bank.
//! Questions are answered by recalling the most relevant local memories,
//! either from question-to-clip attention gathered during encoding or from
//! a compact, fitted index that never touches the stream again.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, corpus
//! generation and the CLI live in the `streammem` companion crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod engine;
pub mod error;
pub mod linalg;
pub mod memindex;
pub mod recall;
pub mod scoring;
pub mod substrate;
pub mod topk;

pub use engine::{
    encode_stream, encode_stream_state, ClipRecord, CompressionStrategy, EngineConfig, EngineState, MemoryBank,
    PrefillContext, WorkingSetReport,
};
pub use error::{Error, Result};
pub use memindex::{
    build_clip_index, collect_samples, fast_recall_answer, fast_relevance, fit_weights, raw_layer_relevance,
    select_layers, ClipIndex, IndexKeys, IndexModel, LayerChoice, LayerSelection, Normalization, QueryTokens,
    QuestionIndex, TrainingSample,
};
pub use recall::{answer, recall_top, relevance_all, relevance_from_trace, RecallSet, RelevanceVector};
pub use scoring::{
    compress_clip, context_scores, saliency_scores, select_top, ClipMemory, ScoreKind, ScoreVector, SelectionResult,
};
pub use substrate::{
    AttentionMatrix, AttentionTrace, BackboneStats, KvCache, LayerKv, Model, ModelConfig, TokenId, TokenKind, Vocab,
};
