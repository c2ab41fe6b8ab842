//! Retrieval and ranking metrics, and the per-run metrics record.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Recall and precision of a predicted clip set against the ground truth.
///
/// An empty truth set gives recall 1; an empty prediction gives precision 1.
pub fn eval_recall(predicted: &[usize], truth: &[usize]) -> (f64, f64) {
    let p: BTreeSet<usize> = predicted.iter().copied().collect();
    let t: BTreeSet<usize> = truth.iter().copied().collect();
    let hit = p.intersection(&t).count() as f64;
    let recall = if t.is_empty() { 1.0 } else { hit / t.len() as f64 };
    let precision = if p.is_empty() { 1.0 } else { hit / p.len() as f64 };
    (recall, precision)
}

/// Ranks starting at 1, ties get the average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation. Returns 0 when either input is constant or
/// shorter than two elements.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman inputs differ in length");
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let mx = rx.iter().sum::<f64>() / n as f64;
    let my = ry.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Wall time per phase, in seconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub encode: f64,
    pub recall: f64,
    pub decode: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub scenario: String,
    pub n_questions: usize,
    pub recall_at_n_a: f64,
    pub accuracy: f64,
    /// Accuracy of the uniform-truncation baseline at the same decode budget.
    pub truncation_accuracy: Option<f64>,
    /// Recall and accuracy through the fast index, when one is used.
    pub fast_recall_at_n_a: Option<f64>,
    pub fast_accuracy: Option<f64>,
    /// Mean Spearman correlation between fast and encoding-based scores.
    pub spearman_fast_vs_encoding: Option<f64>,
    pub peak_prefill_keys: usize,
    /// Bank entries summed over layers, averaged over streams.
    pub bank_entries: f64,
    pub prefill_calls: u64,
    pub stream_calls: u64,
    pub stream_tokens: u64,
    pub wall: PhaseTimes,
}

impl RunMetrics {
    const CSV_HEADER: [&'static str; 17] = [
        "scenario",
        "n_questions",
        "recall_at_n_a",
        "accuracy",
        "truncation_accuracy",
        "fast_recall_at_n_a",
        "fast_accuracy",
        "spearman_fast_vs_encoding",
        "peak_prefill_keys",
        "bank_entries",
        "prefill_calls",
        "stream_calls",
        "stream_tokens",
        "wall_encode_s",
        "wall_recall_s",
        "wall_decode_s",
        "wall_total_s",
    ];

    fn csv_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.scenario.clone(),
            self.n_questions.to_string(),
            self.recall_at_n_a.to_string(),
            self.accuracy.to_string(),
            opt(self.truncation_accuracy),
            opt(self.fast_recall_at_n_a),
            opt(self.fast_accuracy),
            opt(self.spearman_fast_vs_encoding),
            self.peak_prefill_keys.to_string(),
            self.bank_entries.to_string(),
            self.prefill_calls.to_string(),
            self.stream_calls.to_string(),
            self.stream_tokens.to_string(),
            self.wall.encode.to_string(),
            self.wall.recall.to_string(),
            self.wall.decode.to_string(),
            (self.wall.encode + self.wall.recall + self.wall.decode).to_string(),
        ]
    }
}

pub fn write_json<W: Write>(runs: &[RunMetrics], out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, runs)?;
    Ok(())
}

pub fn write_csv<W: Write>(runs: &[RunMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RunMetrics::CSV_HEADER).map_err(csv_err)?;
    for r in runs {
        w.write_record(r.csv_row()).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> crate::error::Error {
    crate::error::Error::Io(std::io::Error::other(e))
}
