use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use streammem::bankfile::{config_digest, decode_bank, load_bank, save_bank};
use streammem::bench::{ablation_grid, index_grid, run_benchmark, train_index, Retrieval, Scenario};
use streammem::corpus::{gen_corpus, read_jsonl, write_jsonl, Corpus, StreamSpec};
use streammem::indexfile::{load_index, save_index};
use streammem::metrics::{eval_recall, write_csv, write_json};
use streammem::{Error, Result};
use streammem_core::{
    answer, collect_samples, encode_stream, fast_recall_answer, recall_top, relevance_all, EngineConfig, IndexModel,
    LayerSelection, Model, ModelConfig, Normalization,
};

#[derive(Parser)]
#[command(name = "streammem", version, about = "Streaming clip memory with compressed recall")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a needle corpus as JSONL.
    GenCorpus(GenCorpusArgs),
    /// Encode a corpus into a memory bank file.
    Encode(EncodeArgs),
    /// Answer a question by encoding-based recall.
    Ask(AskArgs),
    /// Fit the fast index on generated corpora.
    FitIndex(FitIndexArgs),
    /// Answer a question through the fast index, without re-encoding.
    AskFast(AskFastArgs),
    /// Run benchmark scenarios and write metrics.
    Bench(BenchArgs),
    /// Summarize a bank file.
    InspectBank(InspectArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    n_clips: usize,
    #[arg(long, default_value_t = 1)]
    needles: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 8)]
    frames_per_clip: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct EngineArgs {
    #[arg(long, default_value_t = 8)]
    frames_per_clip: usize,
    #[arg(long, default_value_t = 0.25)]
    alpha_c: f64,
    #[arg(long, default_value_t = 0.125)]
    alpha_s: f64,
    #[arg(long, default_value_t = 2)]
    n_s: usize,
    #[arg(long, default_value_t = 0)]
    long_term: usize,
    #[arg(long, default_value_t = 3)]
    start_layer: usize,
}

impl EngineArgs {
    fn config(&self, encode_question: bool) -> EngineConfig {
        EngineConfig {
            frames_per_clip: self.frames_per_clip,
            ratio_context: self.alpha_c,
            ratio_local: self.alpha_s,
            n_s: self.n_s,
            long_term: self.long_term,
            encode_question,
            start_layer: self.start_layer,
            ..EngineConfig::default()
        }
    }
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    engine: EngineArgs,
    /// Append question `--question` to every clip and store relevance.
    #[arg(long)]
    encode_question: bool,
    #[arg(long, default_value_t = 0)]
    question: usize,
    /// Model seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct AskArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long, default_value_t = 0)]
    question: usize,
    #[arg(long, default_value_t = 4)]
    n_a: usize,
    #[arg(long, default_value_t = 1)]
    max_steps: usize,
    /// Used only when the bank carries no stored relevance.
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct FitIndexArgs {
    #[arg(long)]
    out: PathBuf,
    /// Training corpora; when absent, `--n-train` needle corpora are generated.
    #[arg(long)]
    corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = 20)]
    n_train: usize,
    #[arg(long, default_value_t = 32)]
    n_clips: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long = "K", default_value_t = IndexModel::DEFAULT_TOP_LAYERS)]
    top_layers: usize,
    #[arg(long = "k", default_value_t = IndexModel::DEFAULT_KEYS_PER_CLIP)]
    keys_per_clip: usize,
    #[arg(long, default_value_t = 3)]
    start_layer: usize,
    #[arg(long)]
    per_corpus: bool,
    #[arg(long)]
    absolute: bool,
    #[arg(long, default_value_t = 8)]
    frames_per_clip: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// First seed of generated training corpora.
    #[arg(long, default_value_t = 1_000_000)]
    train_seed: u64,
}

#[derive(Args)]
struct AskFastArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long, default_value_t = 0)]
    question: usize,
    #[arg(long, default_value_t = 4)]
    n_a: usize,
    #[arg(long, default_value_t = 1)]
    max_steps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    /// Clip memory against the truncation baseline, both retrieval paths.
    Default,
    Ablation,
    Index,
    All,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value_t = Grid::Default)]
    grid: Grid,
    #[arg(long, default_value_t = 50)]
    n_corpora: usize,
    #[arg(long, default_value_t = 32)]
    n_clips: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 4)]
    n_a: usize,
    /// Fraction of a needle clip's tokens that carry the needle.
    #[arg(long, default_value_t = 1.0)]
    needle_density: f64,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Model seed; corpora use seeds from `--corpus-seed` upward.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    corpus_seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    bank: PathBuf,
    /// Checked against the bank's digest when given.
    #[arg(long)]
    seed: Option<u64>,
}

fn model(seed: u64) -> Result<Model> {
    Ok(Model::build(ModelConfig::with_seed(seed))?)
}

fn read_corpus(path: &Path) -> Result<Corpus> {
    read_jsonl(BufReader::new(File::open(path)?))
}

fn question_of(corpus: &Corpus, i: usize) -> Result<&streammem::corpus::QaItem> {
    corpus.qa.get(i).ok_or_else(|| Error::InvalidScenario(format!("corpus has no question {i}")))
}

fn print_json(v: &serde_json::Value) {
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(v).expect("json value"));
}

fn gen_corpus_cmd(a: GenCorpusArgs) -> Result<()> {
    let spec = StreamSpec {
        frames_per_clip: a.frames_per_clip,
        ..StreamSpec::needle_suite(a.n_clips, a.needles, a.noise, a.seed)
    };
    let corpus = gen_corpus(&spec)?;
    let mut w = BufWriter::new(File::create(&a.out)?);
    write_jsonl(&corpus, &mut w)?;
    w.flush()?;
    print_json(&json!({"clips": corpus.clips.len(), "questions": corpus.qa.len(), "out": a.out}));
    Ok(())
}

fn encode_cmd(a: EncodeArgs) -> Result<()> {
    let m = model(a.seed)?;
    let corpus = read_corpus(&a.corpus)?;
    let cfg = a.engine.config(a.encode_question);
    let question = if a.encode_question { Some(question_of(&corpus, a.question)?.question.clone()) } else { None };
    let (bank, _) = encode_stream(&m, &cfg, &corpus.clips, question.as_deref())?;
    save_bank(&bank, m.config().n_heads, &config_digest(m.config()), &a.out)?;
    print_json(&json!({
        "clips": bank.len(),
        "entries_per_layer": bank.entries_per_layer(),
        "next_position": bank.next_position,
        "relevance": bank.relevance(),
        "out": a.out,
    }));
    Ok(())
}

fn ask_cmd(a: AskArgs) -> Result<()> {
    let m = model(a.seed)?;
    let corpus = read_corpus(&a.corpus)?;
    let qa = question_of(&corpus, a.question)?;
    let bank = load_bank(&a.bank, &config_digest(m.config()))?;
    let g = match bank.relevance() {
        Some(g) => g,
        None => relevance_all(&m, &a.engine.config(true), &corpus.clips, &qa.question)?.values,
    };
    let recall = recall_top(&bank, &g, a.n_a)?;
    let tokens = answer(&m, &bank, &recall, &qa.question, a.max_steps)?;
    let (r, p) = eval_recall(&recall.clips, &qa.relevant_clips);
    print_json(&json!({
        "recalled": recall.clips,
        "relevance": g,
        "answer": tokens,
        "expected": qa.answer,
        "correct": tokens.first() == Some(&qa.answer),
        "recall": r,
        "precision": p,
        "backbone": stats_json(&m),
    }));
    Ok(())
}

fn fit_index_cmd(a: FitIndexArgs) -> Result<()> {
    let m = model(a.seed)?;
    let normalization = if a.per_corpus { Normalization::PerCorpus } else { Normalization::Raw };
    let selection = if a.absolute { LayerSelection::Absolute } else { LayerSelection::Signed };
    let cfg =
        EngineConfig { frames_per_clip: a.frames_per_clip, start_layer: a.start_layer, ..EngineConfig::default() };
    let index = if a.corpus.is_empty() {
        let scenario = Scenario {
            n_clips: a.n_clips,
            noise_rate: a.noise,
            engine: cfg,
            index: streammem::bench::IndexOptions {
                n_train: a.n_train,
                train_seed: a.train_seed,
                top_layers: a.top_layers,
                keys_per_clip: a.keys_per_clip,
                normalization,
                selection,
                ..Default::default()
            },
            ..Default::default()
        };
        train_index(&m, &scenario)?
    } else {
        let mut pairs = Vec::new();
        for path in &a.corpus {
            let c = read_corpus(path)?;
            for qa in &c.qa {
                pairs.push((c.clips.clone(), qa.question.clone()));
            }
        }
        let samples = collect_samples(&m, &cfg, &pairs, normalization)?;
        IndexModel::fit(&samples, a.start_layer, a.top_layers, a.keys_per_clip, normalization, selection)?
    };
    save_index(&index, &a.out)?;
    print_json(&json!({"weights": index.weights, "selected_layers": index.selected, "out": a.out}));
    Ok(())
}

fn ask_fast_cmd(a: AskFastArgs) -> Result<()> {
    let m = model(a.seed)?;
    let corpus = read_corpus(&a.corpus)?;
    let qa = question_of(&corpus, a.question)?;
    let index = load_index(&a.index)?;
    let mut bank = load_bank(&a.bank, &config_digest(m.config()))?;
    let stale = bank.records.iter().any(|r| r.index.as_ref().is_none_or(|i| i.layers != index.active_layers()));
    if stale {
        bank.attach_indexes(&index)?;
    }
    m.reset_stats();
    let (recall, tokens) = fast_recall_answer(&m, &bank, &index, &qa.question, a.n_a, a.max_steps)?;
    let (r, p) = eval_recall(&recall.clips, &qa.relevant_clips);
    print_json(&json!({
        "recalled": recall.clips,
        "answer": tokens,
        "expected": qa.answer,
        "correct": tokens.first() == Some(&qa.answer),
        "recall": r,
        "precision": p,
        "backbone": stats_json(&m),
    }));
    Ok(())
}

fn stats_json(m: &Model) -> serde_json::Value {
    let s = m.stats();
    json!({"prefill_calls": s.prefill_calls, "stream_calls": s.stream_calls, "stream_tokens": s.stream_tokens})
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let m = model(a.seed)?;
    let base = Scenario {
        n_corpora: a.n_corpora,
        n_clips: a.n_clips,
        noise_rate: a.noise,
        needle_density: a.needle_density,
        n_a: a.n_a,
        corpus_seed: a.corpus_seed,
        ..Default::default()
    };
    let default = Scenario { name: "streammem".into(), retrieval: Retrieval::Both, truncation: true, ..base.clone() };
    let scenarios = match a.grid {
        Grid::Default => vec![default],
        Grid::Ablation => ablation_grid(&base),
        Grid::Index => index_grid(&base),
        Grid::All => {
            let mut v = vec![default];
            v.extend(ablation_grid(&base));
            v.extend(index_grid(&base));
            v
        }
    };
    let mut runs = Vec::new();
    for s in &scenarios {
        let r = run_benchmark(&m, s, None)?;
        eprintln!("{:<32} recall@{} {:.3} accuracy {:.3}", r.scenario, s.n_a, r.recall_at_n_a, r.accuracy);
        runs.push(r);
    }
    if let Some(p) = &a.json {
        write_json(&runs, BufWriter::new(File::create(p)?))?;
    }
    if let Some(p) = &a.csv {
        write_csv(&runs, BufWriter::new(File::create(p)?))?;
    }
    if a.json.is_none() && a.csv.is_none() {
        write_json(&runs, std::io::stdout().lock())?;
        println!();
    }
    Ok(())
}

fn inspect_cmd(a: InspectArgs) -> Result<()> {
    let bytes = std::fs::read(&a.bank)?;
    let (header, bank) = decode_bank(&bytes)?;
    if let Some(seed) = a.seed {
        if header.digest != config_digest(&ModelConfig::with_seed(seed)) {
            return Err(Error::ConfigMismatch);
        }
    }
    let digest: String = header.digest.iter().map(|b| format!("{b:02x}")).collect();
    let records: Vec<_> = bank
        .records
        .iter()
        .map(|r| {
            json!({
                "clip": r.clip,
                "n_tokens": r.n_tokens,
                "entries_per_layer": r.local.entries_per_layer(),
                "relevance": r.relevance,
                "indexed_layers": r.index.as_ref().map(|i| i.layers.clone()),
            })
        })
        .collect();
    print_json(&json!({
        "digest": digest,
        "n_layers": header.n_layers,
        "n_heads": header.n_heads,
        "d_model": header.d_model,
        "next_position": bank.next_position,
        "entries_per_layer": bank.entries_per_layer(),
        "records": records,
    }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus_cmd(a),
        Command::Encode(a) => encode_cmd(a),
        Command::Ask(a) => ask_cmd(a),
        Command::FitIndex(a) => fit_index_cmd(a),
        Command::AskFast(a) => ask_fast_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::InspectBank(a) => inspect_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_format() { 2 } else { 1 })
        }
    }
}
