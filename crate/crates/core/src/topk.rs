//! Deterministic top-k selection.
//!
//! Candidates are ranked by score, highest first; equal scores go to the
//! lower index. The selected indices are returned in ascending index order,
//! never in score order.

use alloc::vec::Vec;
use core::cmp::Ordering;

/// Ranking order used everywhere in the crate: score descending, then index
/// ascending.
pub fn rank_cmp(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Indices `0..scores.len()` sorted by [`rank_cmp`].
pub fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| rank_cmp((a, scores[a]), (b, scores[b])));
    idx
}

/// The `k` best indices (clamped to `scores.len()`), ascending.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_cmp((a, scores[a]), (b, scores[b])));
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}
