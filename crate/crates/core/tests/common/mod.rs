//! Brute-force reference implementations, written without reusing any
//! library code path. Everything is f64 and uses plain nested loops.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streammem_core::{AttentionMatrix, KvCache, Model, TokenId};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reference forward pass: per layer, head-averaged attention rows over
/// `[past ‖ new]` and the new keys.
pub struct RefTrace {
    pub attention: Vec<Vec<Vec<f64>>>,
    pub keys: Vec<Vec<Vec<f64>>>,
    pub queries: Vec<Vec<Vec<f64>>>,
}

pub fn ref_prefill(model: &Model, tokens: &[TokenId], past: &KvCache, start: u32) -> RefTrace {
    let cfg = model.config();
    let d = cfg.d_model;
    let h = cfg.n_heads;
    let dh = d / h;
    let emb = model.embeddings();
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let pos = (start as usize + i) as f64;
            (0..d)
                .map(|c| {
                    let pair = (c / 2) as f64;
                    let freq = 10000f64.powf(-(2.0 * pair) / d as f64);
                    let pe = if c % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
                    emb[t as usize * d + c] as f64 + pe * cfg.position_scale as f64
                })
                .collect()
        })
        .collect();

    let mut out = RefTrace { attention: vec![], keys: vec![], queries: vec![] };
    for l in 0..cfg.n_layers {
        let o = model.key_map(l);
        let u = model.value_map(l);
        let beta = cfg.layer_temperatures[l] as f64;
        let apply = |m: &[f32], v: &[f64]| -> Vec<f64> {
            (0..d).map(|r| (0..d).map(|c| m[r * d + c] as f64 * v[c]).sum()).collect()
        };
        let k_new: Vec<Vec<f64>> = x.iter().map(|xi| apply(o, xi)).collect();
        let v_new: Vec<Vec<f64>> = x.iter().map(|xi| apply(u, xi)).collect();
        let q_new: Vec<Vec<f64>> = k_new.iter().map(|k| k.iter().map(|v| v * beta).collect()).collect();

        let (pk, pv): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match past.layers.get(l) {
            Some(p) => (
                (0..p.len()).map(|i| p.keys[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect()).collect(),
                (0..p.len()).map(|i| p.values[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect()).collect(),
            ),
            None => (vec![], vec![]),
        };
        let n_past = pk.len();
        let all_k: Vec<&Vec<f64>> = pk.iter().chain(&k_new).collect();
        let all_v: Vec<&Vec<f64>> = pv.iter().chain(&v_new).collect();

        let mut rows = vec![];
        let mut deltas = vec![];
        for i in 0..tokens.len() {
            let visible = n_past + i + 1;
            let mut row = vec![0.0; n_past + tokens.len()];
            let mut head_out = vec![0.0; d];
            for head in 0..h {
                let lo = head * dh;
                let logits: Vec<f64> = (0..visible)
                    .map(|c| (lo..lo + dh).map(|e| q_new[i][e] * all_k[c][e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
                for c in 0..visible {
                    let w = (logits[c] - m).exp() / z;
                    row[c] += w / h as f64;
                    for e in lo..lo + dh {
                        head_out[e] += w * all_v[c][e];
                    }
                }
            }
            // U^T head_out
            let back: Vec<f64> = (0..d).map(|c| (0..d).map(|r| u[r * d + c] as f64 * head_out[r]).sum()).collect();
            deltas.push(back);
            rows.push(row);
        }
        for (xi, di) in x.iter_mut().zip(&deltas) {
            for (a, b) in xi.iter_mut().zip(di) {
                *a += cfg.value_gain as f64 * b;
            }
        }
        out.attention.push(rows);
        out.keys.push(k_new);
        out.queries.push(q_new);
    }
    out
}

/// A random causal attention matrix: `n_rows` query rows over `n_past` past
/// columns plus the rows themselves; each row sums to one.
pub fn random_attention(r: &mut impl Rng, n_past: usize, n_rows: usize) -> AttentionMatrix {
    let rows: Vec<Vec<f32>> = (0..n_rows)
        .map(|i| {
            let visible = n_past + i + 1;
            let raw: Vec<f32> = (0..visible).map(|_| r.random::<f32>() + 1e-3).collect();
            let s: f32 = raw.iter().sum();
            let mut row: Vec<f32> = raw.iter().map(|v| v / s).collect();
            row.resize(n_past + n_rows, 0.0);
            row
        })
        .collect();
    AttentionMatrix::from_rows(n_past, &rows)
}

pub fn dense(a: &AttentionMatrix) -> Vec<Vec<f64>> {
    (0..a.n_rows).map(|r| (0..a.n_cols).map(|c| a.data[r * a.n_cols + c] as f64).collect()).collect()
}

/// `s_j = Σ_{k∈ctx} A[j,k] + Σ_{h∈clip} A[h, col(j)]`.
pub fn context_oracle(a: &[Vec<f64>], n_past: usize, ctx: &[usize], clip: &[usize]) -> Vec<f64> {
    let mut s = vec![0.0; clip.len()];
    for (o, &j) in clip.iter().enumerate() {
        for &k in ctx {
            s[o] += a[j][k];
        }
        for &h in clip {
            s[o] += a[h][n_past + j];
        }
    }
    s
}

pub fn saliency_oracle(a: &[Vec<f64>], n_past: usize, clip: &[usize]) -> Vec<f64> {
    let mut s = vec![0.0; clip.len()];
    for (o, &j) in clip.iter().enumerate() {
        for &k in clip {
            s[o] += a[k][n_past + j];
        }
    }
    s
}

/// Indices of the `k` largest values (earlier index on ties), ascending.
pub fn sort_top(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = idx.into_iter().take(k).collect();
    kept.sort();
    kept
}

/// Softmax over every key of every owner at once; mass per owner, summed
/// over queries, averaged over heads.
pub fn global_softmax_oracle(queries: &[Vec<f64>], owners: &[Vec<Vec<f64>>], n_heads: usize) -> Vec<f64> {
    let d = queries[0].len();
    let dh = d / n_heads;
    let mut mass = vec![0.0; owners.len()];
    for q in queries {
        for h in 0..n_heads {
            let lo = h * dh;
            let mut logits = vec![];
            for (o, keys) in owners.iter().enumerate() {
                for k in keys {
                    let z: f64 = (lo..lo + dh).map(|e| q[e] * k[e]).sum::<f64>() / (dh as f64).sqrt();
                    logits.push((o, z));
                }
            }
            let m = logits.iter().map(|p| p.1).fold(f64::MIN, f64::max);
            let total: f64 = logits.iter().map(|p| (p.1 - m).exp()).sum();
            for (o, z) in logits {
                mass[o] += (z - m).exp() / total / n_heads as f64;
            }
        }
    }
    mass
}

pub fn rows_of(flat: &[f32], d: usize) -> Vec<Vec<f64>> {
    flat.chunks(d).map(|c| c.iter().map(|&v| v as f64).collect()).collect()
}
