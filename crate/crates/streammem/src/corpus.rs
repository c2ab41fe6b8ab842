//! Synthetic clip streams with planted needles.
//!
//! Every clip gets a background topic and draws its tokens from that topic,
//! with a fraction `noise_rate` swapped for tokens of other topics. A needle
//! clip instead carries tokens of its topic tagged with a marker that occurs
//! nowhere else in the stream. Each needle comes with a question made of
//! that marker's question tokens, whose answer is the needle's topic.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use streammem_core::{TokenId, Vocab};

use crate::error::{Error, FormatError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Needle {
    pub clip: usize,
    pub topic: usize,
    pub marker: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub n_clips: usize,
    pub frames_per_clip: usize,
    pub tokens_per_frame: usize,
    pub n_topics: usize,
    pub n_markers: usize,
    pub tokens_per_topic: usize,
    pub needles: Vec<Needle>,
    pub noise_rate: f64,
    /// Fraction of a needle clip's non-noise tokens that carry the needle;
    /// the rest are plain tokens of a different, distractor topic.
    #[serde(default = "full_density")]
    pub needle_density: f64,
    pub seed: u64,
}

fn full_density() -> f64 {
    1.0
}

impl StreamSpec {
    /// A stream of `n_clips` with `n_needles` needles placed, topic-assigned
    /// and marked at random (distinct clips, distinct markers).
    pub fn needle_suite(n_clips: usize, n_needles: usize, noise_rate: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_6564_6c65);
        let mut spec = Self { n_clips, needles: Vec::new(), noise_rate, seed, ..Self::default() };
        let mut clips: Vec<usize> = (0..n_clips).collect();
        let mut markers: Vec<usize> = (0..spec.n_markers).collect();
        for _ in 0..n_needles.min(n_clips).min(spec.n_markers) {
            let clip = clips.swap_remove(rng.random_range(0..clips.len()));
            let marker = markers.swap_remove(rng.random_range(0..markers.len()));
            let topic = rng.random_range(0..spec.n_topics);
            spec.needles.push(Needle { clip, topic, marker });
        }
        spec.needles.sort_by_key(|n| n.clip);
        spec
    }

    pub fn clip_len(&self) -> usize {
        self.frames_per_clip * self.tokens_per_frame
    }

    pub fn vocab(&self) -> Vocab {
        Vocab { n_topics: self.n_topics, n_markers: self.n_markers, tokens_per_topic: self.tokens_per_topic }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clips == 0 || self.clip_len() == 0 || self.n_topics == 0 || self.tokens_per_topic == 0 {
            return Err(Error::InvalidSpec("stream needs clips, tokens and topics".into()));
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return Err(Error::InvalidSpec(format!("noise rate {} must lie in [0, 0.5)", self.noise_rate)));
        }
        if self.noise_rate > 0.0 && self.n_topics < 2 {
            return Err(Error::InvalidSpec("noise needs at least two topics".into()));
        }
        if !(self.needle_density > 0.0 && self.needle_density <= 1.0) {
            return Err(Error::InvalidSpec(format!("needle density {} must lie in (0, 1]", self.needle_density)));
        }
        if self.needle_density < 1.0 && self.n_topics < 2 {
            return Err(Error::InvalidSpec("partial needles need a distractor topic".into()));
        }
        if self.needles.len() > self.n_clips {
            return Err(Error::InvalidSpec("more needles than clips".into()));
        }
        let mut seen_clips = std::collections::HashSet::new();
        let mut seen_markers = std::collections::HashSet::new();
        for n in &self.needles {
            if n.clip >= self.n_clips || n.topic >= self.n_topics || n.marker >= self.n_markers {
                return Err(Error::InvalidSpec(format!("needle {n:?} out of range")));
            }
            if !seen_clips.insert(n.clip) || !seen_markers.insert(n.marker) {
                return Err(Error::InvalidSpec("needles must use distinct clips and markers".into()));
            }
        }
        Ok(())
    }
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            n_clips: 32,
            frames_per_clip: 8,
            tokens_per_frame: 4,
            n_topics: 8,
            n_markers: 8,
            tokens_per_topic: 8,
            needles: Vec::new(),
            noise_rate: 0.1,
            needle_density: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub question: Vec<TokenId>,
    /// Clips holding the evidence.
    pub relevant_clips: Vec<usize>,
    pub answer: TokenId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub spec: StreamSpec,
    pub clips: Vec<Vec<TokenId>>,
    /// Assigned (majority) topic of every clip.
    pub clip_topics: Vec<usize>,
    pub qa: Vec<QaItem>,
}

pub fn gen_corpus(spec: &StreamSpec) -> Result<Corpus> {
    spec.validate()?;
    let vocab = spec.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut clips = Vec::with_capacity(spec.n_clips);
    let mut clip_topics = Vec::with_capacity(spec.n_clips);
    for c in 0..spec.n_clips {
        let needle = spec.needles.iter().find(|n| n.clip == c);
        let topic = needle.map_or_else(|| rng.random_range(0..spec.n_topics), |n| n.topic);
        let distractor = match needle {
            Some(_) if spec.needle_density < 1.0 => (topic + rng.random_range(1..spec.n_topics)) % spec.n_topics,
            _ => topic,
        };
        let tokens = (0..spec.clip_len())
            .map(|_| {
                if spec.noise_rate > 0.0 && rng.random_bool(spec.noise_rate) {
                    let other = (topic + rng.random_range(1..spec.n_topics)) % spec.n_topics;
                    vocab.content(other, rng.random_range(0..spec.tokens_per_topic))
                } else if let Some(n) = needle {
                    if spec.needle_density >= 1.0 || rng.random_bool(spec.needle_density) {
                        vocab.marked(n.marker, topic)
                    } else {
                        vocab.content(distractor, rng.random_range(0..spec.tokens_per_topic))
                    }
                } else {
                    vocab.content(topic, rng.random_range(0..spec.tokens_per_topic))
                }
            })
            .collect();
        clips.push(tokens);
        clip_topics.push(topic);
    }
    let qa = spec
        .needles
        .iter()
        .map(|n| QaItem {
            question: (0..Vocab::MARKER_QUESTION_VARIANTS).map(|v| vocab.marker_question(n.marker, v)).collect(),
            relevant_clips: vec![n.clip],
            answer: vocab.answer(n.topic),
        })
        .collect();
    Ok(Corpus { spec: spec.clone(), clips, clip_topics, qa })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Meta { spec: StreamSpec },
    Clip { index: usize, topic: usize, tokens: Vec<TokenId> },
    Qa(QaItem),
}

/// Line-delimited JSON: one `meta` line, then one line per clip, then one
/// per QA item.
pub fn write_jsonl<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    let mut put = |line: &Line| -> Result<()> {
        serde_json::to_writer(&mut out, line)?;
        out.write_all(b"\n")?;
        Ok(())
    };
    put(&Line::Meta { spec: corpus.spec.clone() })?;
    for (i, (tokens, &topic)) in corpus.clips.iter().zip(&corpus.clip_topics).enumerate() {
        put(&Line::Clip { index: i, topic, tokens: tokens.clone() })?;
    }
    for qa in &corpus.qa {
        put(&Line::Qa(qa.clone()))?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Corpus> {
    let mut spec = None;
    let (mut clips, mut clip_topics, mut qa) = (Vec::new(), Vec::new(), Vec::new());
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line)
            .map_err(|e| Error::Format(FormatError::Malformed(format!("line {}: {e}", n + 1))))?;
        match parsed {
            Line::Meta { spec: s } => spec = Some(s),
            Line::Clip { index, topic, tokens } => {
                if index != clips.len() {
                    return Err(Error::Format(FormatError::Malformed(format!(
                        "line {}: clip {index} out of order",
                        n + 1
                    ))));
                }
                clips.push(tokens);
                clip_topics.push(topic);
            }
            Line::Qa(item) => qa.push(item),
        }
    }
    let spec = spec.ok_or_else(|| Error::Format(FormatError::Malformed("missing meta line".into())))?;
    if clips.is_empty() {
        return Err(Error::Format(FormatError::Malformed("corpus has no clips".into())));
    }
    Ok(Corpus { spec, clips, clip_topics, qa })
}
