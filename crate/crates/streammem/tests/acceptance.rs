//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod oracle;

use nalgebra::{DMatrix, DVector};
use oracle::{context_oracle, dense, global_softmax_oracle, random_attention, rng, rows_of, saliency_oracle, sort_top};
use rand::Rng;
use std::process::{Command, ExitCode};
use streammem::bankfile::{config_digest, decode_bank, decode_bank_checked, encode_bank};
use streammem::bench::{ablation_grid, run_benchmark, train_index, Retrieval, Scenario};
use streammem::corpus::gen_corpus;
use streammem::{Error, FormatError};
use streammem_core::memindex::residual;
use streammem_core::scoring::keep_count;
use streammem_core::{
    build_clip_index, context_scores, encode_stream, encode_stream_state, fast_recall_answer, fast_relevance,
    fit_weights, raw_layer_relevance, recall_top, relevance_all, relevance_from_trace, saliency_scores, select_layers,
    select_top, AttentionTrace, ClipIndex, ClipMemory, ClipRecord, EngineConfig, KvCache, LayerKv, LayerSelection,
    MemoryBank, Model, ModelConfig, QueryTokens, QuestionIndex, ScoreKind, ScoreVector, TrainingSample,
};

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn model() -> Model {
    Model::build(ModelConfig::with_seed(1)).unwrap()
}

fn random_vec(r: &mut impl Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| (r.random::<f32>() * 2.0 - 1.0) * scale).collect()
}

/// Context, saliency, encoding relevance and fast relevance against
/// brute-force loops.
fn c1_score_oracles() -> Check {
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    let n = 1000;
    for _ in 0..n {
        let n_past = r.random_range(0..8);
        let n_rows = r.random_range(1..12);
        let a = random_attention(&mut r, n_past, n_rows);
        let d = dense(&a);
        let ctx: Vec<usize> = (0..n_past).collect();
        let clip: Vec<usize> = (0..n_rows).collect();
        let s = context_scores(&a, &ctx, &clip).map_err(|e| e.to_string())?;
        let sh = saliency_scores(&a, &clip).map_err(|e| e.to_string())?;
        for (g, w) in s.values.iter().zip(context_oracle(&d, n_past, &ctx, &clip)) {
            worst = worst.max((g - w).abs());
        }
        for (g, w) in sh.values.iter().zip(saliency_oracle(&d, n_past, &clip)) {
            worst = worst.max((g - w).abs());
        }

        // relevance of clip rows [0, split) under question rows [split, n_rows)
        if n_rows >= 2 {
            let split = r.random_range(1..n_rows);
            let trace = AttentionTrace {
                attention: (0..6).map(|_| random_attention(&mut r, n_past, n_rows)).collect(),
                kv: KvCache::empty(6),
                queries: vec![],
                hidden: vec![],
                start_position: 0,
            };
            let cl: Vec<usize> = (0..split).collect();
            let q: Vec<usize> = (split..n_rows).collect();
            let got = relevance_from_trace(&trace, &q, &cl, 3).map_err(|e| e.to_string())?;
            let mut want = 0.0;
            for a in &trace.attention[2..] {
                let d = dense(a);
                for &j in &q {
                    for &k in &cl {
                        want += d[j][n_past + k];
                    }
                }
            }
            worst = worst.max((got - want).abs());
        }

        // fast relevance over random clip indexes
        let (dm, heads, layers) = (8, 2, [3usize, 5]);
        let n_clips = r.random_range(1..5);
        let idx: Vec<ClipIndex> = (0..n_clips)
            .map(|_| {
                let k = r.random_range(1..5);
                ClipIndex {
                    layers: layers.to_vec(),
                    positions: layers.iter().map(|_| (0..k as u32).collect()).collect(),
                    keys: layers.iter().map(|_| random_vec(&mut r, k * dm, 2.0)).collect(),
                    clamped: false,
                }
            })
            .collect();
        let qi = QuestionIndex {
            layers: layers.to_vec(),
            queries: layers.iter().map(|_| random_vec(&mut r, dm, 2.0)).collect(),
            d_model: dm,
        };
        let refs: Vec<&ClipIndex> = idx.iter().collect();
        let got = fast_relevance(&qi, &refs, heads, None).map_err(|e| e.to_string())?;
        let mut want = vec![0.0; n_clips];
        for li in 0..layers.len() {
            let owners: Vec<Vec<Vec<f64>>> = idx.iter().map(|c| rows_of(&c.keys[li], dm)).collect();
            for (w, m) in want.iter_mut().zip(global_softmax_oracle(&rows_of(&qi.queries[li], dm), &owners, heads)) {
                *w += m;
            }
        }
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    ensure(worst <= 1e-5, || format!("max abs error {worst:.3e}"))?;
    Ok(format!("{n} instances, max abs error {worst:.2e}"))
}

fn c2_question_transparency() -> Check {
    let m = model();
    let s = Scenario::default();
    for seed in 0..50 {
        let c = gen_corpus(&s.stream_spec(seed)).map_err(|e| e.to_string())?;
        let q = &c.qa[0].question;
        let (plain, _) = encode_stream(&m, &EngineConfig::default(), &c.clips, None).map_err(|e| e.to_string())?;
        let cfg = EngineConfig { encode_question: true, ..EngineConfig::default() };
        let (with_q, g) = encode_stream(&m, &cfg, &c.clips, Some(q)).map_err(|e| e.to_string())?;
        let strip = |b: &MemoryBank| b.records.iter().map(|r| (r.local.clone(), r.n_tokens)).collect::<Vec<_>>();
        ensure(strip(&plain) == strip(&with_q) && plain.next_position == with_q.next_position, || {
            format!("stream {seed} differs")
        })?;
        ensure(g.is_some(), || "no relevance recorded".into())?;
    }
    Ok("50 streams bit-identical".into())
}

fn c3_constant_working_set() -> Check {
    let m = model();
    let cfg = EngineConfig::default();
    let s = Scenario::default();
    let clips = |n| gen_corpus(&Scenario { n_clips: n, ..s.clone() }.stream_spec(3)).unwrap().clips;
    let (short, _) = encode_stream_state(&m, &cfg, &clips(8), None).map_err(|e| e.to_string())?;
    let (long, _) = encode_stream_state(&m, &cfg, &clips(256), None).map_err(|e| e.to_string())?;
    let (p8, p256) = (short.working_set_report().peak_prefill, long.working_set_report().peak_prefill);
    ensure(p8 == p256, || format!("peak {p8} vs {p256}"))?;

    let per_clip = keep_count(cfg.ratio_local, cfg.clip_len()) * m.n_layers();
    let mut st = streammem_core::EngineState::new(&m, cfg.clone()).map_err(|e| e.to_string())?;
    let stream = clips(16);
    let mut prev = 0;
    for c in &stream {
        st.process_clip(&m, c, None).map_err(|e| e.to_string())?;
        let now: usize = st.working_set_report().bank.iter().sum();
        ensure(now - prev == per_clip, || format!("bank grew by {} not {per_clip}", now - prev))?;
        prev = now;
    }
    Ok(format!("peak {p8} keys for N=8 and N=256, bank +{per_clip} entries per clip"))
}

fn c4_selection_oracles() -> Check {
    let mut r = rng(404);
    let n = 1000;
    for i in 0..n {
        let len = r.random_range(1..40);
        let values: Vec<f64> = (0..len).map(|_| r.random_range(0..8) as f64).collect();
        let ratio = r.random_range(1..=100) as f64 / 100.0;
        let got = select_top(&ScoreVector { kind: ScoreKind::ContextAggregation, values: values.clone() }, ratio)
            .map_err(|e| e.to_string())?
            .kept;
        ensure(got == sort_top(&values, keep_count(ratio, len)), || format!("select_top case {i}"))?;

        let w: Vec<f64> = (0..4).map(|_| r.random_range(-3..4) as f64).collect();
        let want: Vec<usize> = sort_top(&w, 3).into_iter().map(|i| i + 3).collect();
        ensure(select_layers(&w, 3, 3, LayerSelection::Signed) == want, || format!("select_layers case {i}"))?;

        let nt = r.random_range(1..9);
        let k = r.random_range(1..8);
        let local = random_local(&mut r, 6, nt, 8);
        let idx = build_clip_index(&local, &[3, 5], k).map_err(|e| e.to_string())?;
        for (slot, l) in [3usize, 5].into_iter().enumerate() {
            let want = sort_top(&local.saliency[l - 1], k.min(nt));
            let kv = &local.kv.layers[l - 1];
            let keys: Vec<f32> = want.iter().flat_map(|&j| kv.key(j, 8).to_vec()).collect();
            ensure(idx.keys[slot] == keys, || format!("clip index case {i}"))?;
        }
    }
    let m = model();
    let bank = encode_stream(
        &m,
        &EngineConfig::default(),
        &gen_corpus(&Scenario::default().stream_spec(0)).unwrap().clips[..12],
        None,
    )
    .map_err(|e| e.to_string())?
    .0;
    for i in 0..n {
        let g: Vec<f64> = (0..12).map(|_| r.random_range(0..6) as f64).collect();
        let n_a = r.random_range(1..15);
        let got = recall_top(&bank, &g, n_a).map_err(|e| e.to_string())?.clips;
        ensure(got == sort_top(&g, n_a.min(12)), || format!("recall case {i}"))?;
    }
    Ok(format!("{n} instances each of token, layer, key and clip selection"))
}

fn c5_least_squares() -> Check {
    let mut r = rng(505);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let samples: Vec<TrainingSample> = (0..40)
            .map(|i| TrainingSample {
                layer_relevance: (0..4).map(|_| r.random::<f64>()).collect(),
                target: r.random::<f64>() * 3.0,
                corpus: 0,
                clip: i,
            })
            .collect();
        let a = fit_weights(&samples).map_err(|e| e.to_string())?;
        let x = DMatrix::from_fn(samples.len(), 4, |i, j| samples[i].layer_relevance[j]);
        let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.target));
        let want = x.svd(true, true).solve(&y, 1e-14).map_err(|e| e.to_string())?;
        for (g, w) in a.iter().zip(want.iter()) {
            worst = worst.max((g - w).abs() / w.abs().max(1.0));
        }
        let best = residual(&samples, &a);
        ensure(best <= residual(&samples, &[1.0; 4]) + 1e-9, || "worse than uniform".into())?;
        for _ in 0..100 {
            let w: Vec<f64> = (0..4).map(|_| r.random::<f64>() * 4.0 - 2.0).collect();
            ensure(best <= residual(&samples, &w) + 1e-9, || "worse than a random vector".into())?;
        }
    }
    ensure(worst <= 1e-5, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("200 fits, max relative error {worst:.2e}, residual minimal"))
}

fn c6_ablation_ordering() -> Check {
    let m = model();
    let base = Scenario { n_corpora: 200, ..Scenario::default() };
    let grid = ablation_grid(&base);
    let acc = |name: &str| -> std::result::Result<f64, String> {
        let s = grid.iter().find(|s| s.name == name).ok_or(format!("no row {name}"))?;
        Ok(run_benchmark(&m, s, None).map_err(|e| e.to_string())?.accuracy)
    };
    let (dual, ctx, local) = (acc("compress-dual")?, acc("compress-context-only")?, acc("compress-local-only")?);
    let (recalled, all) = (acc("decode-recalled")?, acc("decode-all-bank")?);
    let line = format!(
        "dual {dual:.3}, context-only {ctx:.3}, local-only {local:.3}, recalled {recalled:.3}, all-bank {all:.3}"
    );
    ensure(dual >= ctx && dual >= local && recalled >= all, || line.clone())?;
    Ok(line)
}

fn c7_recall_quality() -> Check {
    let m = model();
    let s = Scenario { n_corpora: 200, retrieval: Retrieval::Both, ..Scenario::default() };
    let index = train_index(&m, &s).map_err(|e| e.to_string())?;
    let r = run_benchmark(&m, &s, Some(&index)).map_err(|e| e.to_string())?;
    let fast = r.fast_recall_at_n_a.unwrap_or(0.0);
    let line = format!("encoding recall {:.3}, fast recall {fast:.3}", r.recall_at_n_a);
    ensure(r.recall_at_n_a >= 0.95 && fast >= 0.9 * r.recall_at_n_a, || line.clone())?;
    Ok(line)
}

fn c8_no_stream_reprocessing() -> Check {
    let m = model();
    let s = Scenario::default();
    let index = train_index(&m, &s).map_err(|e| e.to_string())?;
    let c = gen_corpus(&Scenario { n_needles: 2, ..s.clone() }.stream_spec(42)).map_err(|e| e.to_string())?;
    let cfg = EngineConfig::default();
    let (mut bank, _) = encode_stream(&m, &cfg, &c.clips, None).map_err(|e| e.to_string())?;
    bank.attach_indexes(&index).map_err(|e| e.to_string())?;
    fast_recall_answer(&m, &bank, &index, &c.qa[0].question, 4, 1).map_err(|e| e.to_string())?;

    m.reset_stats();
    fast_recall_answer(&m, &bank, &index, &c.qa[1].question, 4, 1).map_err(|e| e.to_string())?;
    let fast = m.stats().stream_calls;
    m.reset_stats();
    relevance_all(&m, &cfg, &c.clips, &c.qa[1].question).map_err(|e| e.to_string())?;
    let enc = m.stats().stream_calls;
    let line = format!("second question: {fast} stream calls via index, {enc} via re-encoding (N={})", c.clips.len());
    ensure(fast == 0 && enc >= c.clips.len() as u64, || line.clone())?;
    Ok(line)
}

fn random_local(r: &mut impl Rng, n_layers: usize, n: usize, d: usize) -> ClipMemory {
    let mut kv = KvCache::empty(n_layers);
    let mut saliency = vec![];
    for layer in kv.layers.iter_mut() {
        *layer = LayerKv {
            positions: (0..n as u32).collect(),
            keys: random_vec(r, n * d, 2.0),
            values: random_vec(r, n * d, 1.0),
        };
        saliency.push((0..n).map(|_| r.random_range(0..5) as f64).collect());
    }
    ClipMemory { kv, saliency }
}

fn random_bank(r: &mut impl Rng) -> MemoryBank {
    let (n_layers, d) = (r.random_range(1..7), 2 * r.random_range(1..5));
    let mut bank = MemoryBank::new(n_layers, d);
    bank.next_position = r.random_range(0..1000);
    for clip in 0..r.random_range(0..6) {
        let n = r.random_range(1..6);
        let local = random_local(r, n_layers, n, d);
        let index = if r.random_bool(0.5) { Some(build_clip_index(&local, &[n_layers], 3).unwrap()) } else { None };
        let relevance = if r.random_bool(0.5) { Some(r.random::<f64>()) } else { None };
        bank.records.push(ClipRecord { clip, n_tokens: n, local, relevance, index });
    }
    bank
}

fn c9_bank_files() -> Check {
    let mut r = rng(909);
    let digest = [3u8; 32];
    for i in 0..50 {
        let bank = random_bank(&mut r);
        let bytes = encode_bank(&bank, 2, &digest).map_err(|e| e.to_string())?;
        let back = decode_bank_checked(&bytes, &digest).map_err(|e| e.to_string())?;
        ensure(back == bank, || format!("bank {i} did not round-trip"))?;

        let flip = r.random_range(0..bytes.len());
        let mut bad = bytes.clone();
        bad[flip] ^= 1 << r.random_range(0..8);
        let kind = |res: streammem::Result<_>| match res {
            Err(Error::Format(f)) => Some(f),
            _ => None,
        };
        let got = kind(decode_bank(&bad).map(|_| ()));
        let ok = match flip {
            0..=3 => matches!(got, Some(FormatError::BadMagic(_))),
            4..=5 => matches!(got, Some(FormatError::BadVersion(_))),
            _ => got.is_some(),
        };
        ensure(ok, || format!("bank {i}: flipped byte {flip} gave {got:?}"))?;
        ensure(
            matches!(kind(decode_bank(&bytes[..bytes.len() - 1]).map(|_| ())), Some(FormatError::Truncated)),
            || format!("bank {i}: truncation not reported"),
        )?;
        ensure(matches!(decode_bank_checked(&bytes, &[4; 32]), Err(Error::ConfigMismatch)), || {
            format!("bank {i}: digest mismatch not reported")
        })?;
    }

    // the CLI maps format errors to exit code 2
    let dir = std::env::temp_dir().join(format!("streammem-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("bank.fxm");
    let bank = random_bank(&mut r);
    let mut bytes = encode_bank(&bank, 2, &config_digest(&ModelConfig::with_seed(1))).map_err(|e| e.to_string())?;
    std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
    let run = |p: &std::path::Path| {
        Command::new(env!("CARGO_BIN_EXE_streammem"))
            .arg("inspect-bank")
            .arg("--bank")
            .arg(p)
            .output()
            .map(|o| o.status.code())
    };
    let good = run(&path).map_err(|e| e.to_string())?;
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
    let bad = run(&path).map_err(|e| e.to_string())?;
    let missing = run(&dir.join("absent.fxm")).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_dir_all(&dir);
    ensure(good == Some(0) && bad == Some(2) && missing == Some(1), || {
        format!("exit codes: intact {good:?}, corrupt {bad:?}, missing {missing:?}")
    })?;
    Ok("50 random banks round-trip; corruption, truncation and digest mismatch rejected; CLI exit 2".into())
}

fn c10_normalization() -> Check {
    let mut worst_row: f64 = 0.0;
    let mut worst_fast: f64 = 0.0;
    let s = Scenario::default();
    for seed in 0..10u64 {
        let m = Model::build(ModelConfig::with_seed(seed + 1)).unwrap();
        let c = gen_corpus(&s.stream_spec(seed)).map_err(|e| e.to_string())?;
        let trace = m.prefill(&c.clips[0], &KvCache::empty(m.n_layers()), 0).map_err(|e| e.to_string())?;
        let trace = m.prefill(&c.clips[1], &trace.kv, 64).map_err(|e| e.to_string())?;
        for a in &trace.attention {
            for i in 0..a.n_rows {
                worst_row = worst_row.max((a.row(i).iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
            }
        }

        let (bank, _) = encode_stream(&m, &EngineConfig::default(), &c.clips, None).map_err(|e| e.to_string())?;
        let layers: Vec<usize> = (3..=m.n_layers()).collect();
        let qi = QuestionIndex::encode(&m, &c.qa[0].question, bank.next_position, &layers, QueryTokens::Last)
            .map_err(|e| e.to_string())?;
        let raw = raw_layer_relevance(&qi, &bank, m.config().n_heads).map_err(|e| e.to_string())?;
        for li in 0..layers.len() {
            worst_fast = worst_fast.max((raw.iter().map(|row| row[li]).sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst_row <= 1e-5 && worst_fast <= 1e-6, || format!("row {worst_row:.2e}, per-layer {worst_fast:.2e}"))?;
    Ok(format!("attention rows within {worst_row:.1e} of 1, per-layer fast mass within {worst_fast:.1e} of 1"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("score oracles", c1_score_oracles),
        ("question transparency", c2_question_transparency),
        ("constant working set", c3_constant_working_set),
        ("selection oracles", c4_selection_oracles),
        ("least-squares fit", c5_least_squares),
        ("ablation ordering", c6_ablation_ordering),
        ("recall quality", c7_recall_quality),
        ("no stream reprocessing", c8_no_stream_reprocessing),
        ("bank files", c9_bank_files),
        ("normalization", c10_normalization),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match std::panic::catch_unwind(f) {
            Ok(Ok(detail)) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Ok(Err(detail)) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
            Err(_) => {
                failed += 1;
                println!("FAIL {:>2} {name}: panicked", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
