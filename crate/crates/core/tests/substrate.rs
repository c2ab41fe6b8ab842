mod common;

use common::{ref_prefill, rng};
use proptest::prelude::*;
use rand::Rng;
use streammem_core::{KvCache, Model, ModelConfig, TokenId};

fn model(seed: u64) -> Model {
    Model::build(ModelConfig::with_seed(seed)).unwrap()
}

fn random_tokens(r: &mut impl Rng, m: &Model, n: usize) -> Vec<TokenId> {
    (0..n).map(|_| r.random_range(0..m.vocab().size() as u32)).collect()
}

#[test]
fn forward_pass_matches_reference() {
    for seed in 0..20u64 {
        let m = model(seed);
        let mut r = rng(seed);
        let tokens = random_tokens(&mut r, &m, 4);
        let trace = m.prefill(&tokens, &KvCache::empty(m.n_layers()), 0).unwrap();
        let reference = ref_prefill(&m, &tokens, &KvCache::empty(0), 0);
        for (a, want) in trace.attention.iter().zip(&reference.attention) {
            for (i, row) in want.iter().enumerate() {
                for (c, w) in row.iter().enumerate() {
                    assert!((a.get(i, c) as f64 - w).abs() <= 1e-5, "seed {seed}");
                }
            }
        }
    }
}

#[test]
fn forward_pass_with_past_matches_reference() {
    let m = model(3);
    let mut r = rng(11);
    let first = random_tokens(&mut r, &m, 5);
    let past = m.prefill(&first, &KvCache::empty(m.n_layers()), 0).unwrap().kv;
    let tokens = random_tokens(&mut r, &m, 3);
    let trace = m.prefill(&tokens, &past, 9).unwrap();
    let reference = ref_prefill(&m, &tokens, &past, 9);
    for (l, (a, want)) in trace.attention.iter().zip(&reference.attention).enumerate() {
        for (i, row) in want.iter().enumerate() {
            for (c, w) in row.iter().enumerate() {
                assert!((a.get(i, c) as f64 - w).abs() <= 1e-5);
            }
        }
        for (i, k) in reference.keys[l].iter().enumerate() {
            for (e, v) in k.iter().enumerate() {
                assert!((trace.kv.layers[l].key(i, m.d_model())[e] as f64 - v).abs() <= 1e-5);
            }
        }
    }
}

#[test]
fn topic_and_marker_bases_are_orthonormal() {
    let m = model(7);
    let d = m.d_model();
    let cfg = m.config();
    let basis: Vec<&[f32]> =
        m.topic_basis().chunks(d).take(cfg.n_topics).chain(m.marker_basis().chunks(d).take(cfg.n_markers)).collect();
    for (i, a) in basis.iter().enumerate() {
        for (j, b) in basis.iter().enumerate() {
            let g: f64 = a.iter().zip(b.iter()).map(|(x, y)| *x as f64 * *y as f64).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((g - want).abs() < 1e-6, "gram[{i}][{j}] = {g}");
        }
    }
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
    assert_ne!(model(8).embeddings(), a.embeddings());
}

#[test]
fn identical_embeddings_split_attention_evenly() {
    let m = Model::build(ModelConfig { position_scale: 0.0, ..ModelConfig::with_seed(2) }).unwrap();
    let t = m.vocab().content(0, 0);
    let trace = m.prefill(&[t, t], &KvCache::empty(m.n_layers()), 0).unwrap();
    for a in &trace.attention {
        assert!((a.get(1, 0) - 0.5).abs() < 1e-6 && (a.get(1, 1) - 0.5).abs() < 1e-6);
    }
}

#[test]
fn embedding_perturbation_is_bounded() {
    let m = model(4);
    let d = m.d_model();
    let v = m.vocab();
    for t in 0..v.n_topics {
        let e = &m.topic_basis()[t * d..(t + 1) * d];
        for variant in 0..v.tokens_per_topic {
            let id = v.content(t, variant) as usize;
            let x = &m.embeddings()[id * d..(id + 1) * d];
            let dist: f32 = x.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt();
            assert!(dist <= 0.1 + 1e-6);
        }
    }
}

/// A question of topic `t` over the full cache of a clip of topic `t`
/// answers `t`.
#[test]
fn topic_question_over_pure_clip_answers_topic() {
    let mut ok = 0;
    let total = 200;
    for seed in 0..total {
        let m = model(seed);
        let v = *m.vocab();
        let mut r = rng(seed + 500);
        let t = r.random_range(0..v.n_topics);
        let clip: Vec<TokenId> = (0..32).map(|_| v.content(t, r.random_range(0..v.tokens_per_topic))).collect();
        let kv = m.prefill(&clip, &KvCache::empty(m.n_layers()), 0).unwrap().kv;
        let out = m.decode_greedy(&kv, &[v.topic_question(t)], 32, 1).unwrap();
        ok += (out[0] == v.answer(t)) as u64;
    }
    assert!(ok * 100 >= 99 * total, "{ok}/{total}");
}

#[test]
fn decode_length_and_determinism() {
    let m = model(1);
    let q = [m.vocab().marker_question(0, 0)];
    let a = m.decode_greedy(&KvCache::empty(0), &q, 0, 5).unwrap();
    assert_eq!(a.len(), 5);
    assert_eq!(a, m.decode_greedy(&KvCache::empty(0), &q, 0, 5).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rows_are_stochastic_and_causal(seed in 0u64..1000, n in 1usize..12) {
        let m = model(seed % 4);
        let mut r = rng(seed);
        let tokens = random_tokens(&mut r, &m, n);
        let trace = m.prefill(&tokens, &KvCache::empty(m.n_layers()), 0).unwrap();
        for a in &trace.attention {
            for i in 0..a.n_rows {
                let row = a.row(i);
                let s: f32 = row.iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-5);
                prop_assert!(row.iter().all(|&w| (0.0..=1.0 + 1e-6).contains(&w)));
                prop_assert!(row[i + 1..].iter().all(|&w| w == 0.0));
            }
        }
    }

    #[test]
    fn suffix_does_not_change_prefix(seed in 0u64..1000, np in 1usize..10, ns in 1usize..6) {
        let m = model(seed % 4);
        let mut r = rng(seed);
        let prefix = random_tokens(&mut r, &m, np);
        let suffix = random_tokens(&mut r, &m, ns);
        let alone = m.prefill(&prefix, &KvCache::empty(m.n_layers()), 3).unwrap();
        let joined: Vec<TokenId> = prefix.iter().chain(&suffix).copied().collect();
        let both = m.prefill(&joined, &KvCache::empty(m.n_layers()), 3).unwrap();
        let d = m.d_model();
        for l in 0..m.n_layers() {
            for i in 0..np {
                for c in 0..np {
                    prop_assert!((alone.attention[l].get(i, c) - both.attention[l].get(i, c)).abs() <= 1e-6);
                }
                prop_assert_eq!(alone.kv.layers[l].key(i, d), both.kv.layers[l].key(i, d));
                prop_assert_eq!(alone.kv.layers[l].value(i, d), both.kv.layers[l].value(i, d));
            }
        }
    }

    #[test]
    fn shallow_layers_are_uniform(seed in 0u64..1000, n in 1usize..12) {
        let m = model(seed % 4);
        let mut r = rng(seed);
        let tokens = random_tokens(&mut r, &m, n);
        let trace = m.prefill(&tokens, &KvCache::empty(m.n_layers()), 0).unwrap();
        for a in &trace.attention[..2] {
            for i in 0..n {
                for c in 0..=i {
                    prop_assert!((a.get(i, c) as f64 - 1.0 / (i + 1) as f64).abs() <= 1e-7);
                }
            }
        }
    }
}
