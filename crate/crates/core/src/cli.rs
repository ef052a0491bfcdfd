//! Command-line surface: `generate` runs a corpus through the engine,
//! `eval` scores the resulting generations, `analyze` turns traces into
//! per-step metric curves.
//!
//! Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 backend
//! error. The `GCD_LOG` environment variable (`error`, `info`, `debug`)
//! controls logging.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, TokenId};
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{self, CorpusError, CorpusItem, VocabMap};
use crate::engine::{self, EngineError, GenerationResult, Termination};
use crate::eval::{self, CaptionRecord, ChairScores, PopeAnswer, PopeItem, PopeScores};
use crate::trace::{trace_line, TraceLine};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("backend error: {0}")]
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
            CliError::Backend(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(e) => CliError::Io(e.to_string()),
            ConfigError::Backend(BackendError::Io(e)) => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gcd", about = "Contrastive decoding engine and evaluation harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run generations over a corpus, one trace file per seed.
    Generate(GenerateArgs),
    /// Score generations against a corpus.
    Eval {
        #[command(subcommand)]
        benchmark: EvalBenchmark,
    },
    /// Derive per-step metric files from traces.
    Analyze {
        #[command(subcommand)]
        kind: AnalyzeKind,
    },
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Canonical JSON run configuration; flags below override its keys.
    #[arg(long)]
    pub config: PathBuf,
    /// Decoding method: baseline, m3id, sid, or crops.
    #[arg(long)]
    pub method: Option<String>,
    /// Seed override; repeat the flag for several seeds.
    #[arg(long = "seed", action = ArgAction::Append)]
    pub seed: Vec<u64>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output directory for trace and generation files.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvalBenchmark {
    /// Object-hallucination rates over generated captions.
    Chair(ChairArgs),
    /// Accuracy/F1 over binary object-presence answers.
    Pope(PopeArgs),
}

#[derive(Debug, Args)]
pub struct ChairArgs {
    #[arg(long)]
    pub generations: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Report JSON path.
    #[arg(long)]
    pub out: PathBuf,
    /// Run config supplying the vocab-map path when --vocab-map is absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Token-id to object-name JSON map.
    #[arg(long)]
    pub vocab_map: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PopeArgs {
    #[arg(long)]
    pub generations: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Report JSON path.
    #[arg(long)]
    pub out: PathBuf,
    /// Run config supplying the answer-token ids when flags are absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// First-token id counted as a "yes" answer.
    #[arg(long)]
    pub yes_token: Option<u32>,
    /// First-token id counted as a "no" answer.
    #[arg(long)]
    pub no_token: Option<u32>,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeKind {
    /// Write vd.csv, vtd.csv, and jsd.csv averaged over corpus items per step.
    Dependency {
        /// Trace JSONL file from one generate run.
        #[arg(long)]
        traces: PathBuf,
        /// Output directory for the CSV files.
        #[arg(long)]
        out: PathBuf,
    },
}

/// One generation in the generations JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub seed: u64,
    pub tokens: Vec<u32>,
    pub termination: Termination,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(args) => cmd_generate(&args),
        Command::Eval { benchmark } => match benchmark {
            EvalBenchmark::Chair(args) => cmd_eval_chair(&args),
            EvalBenchmark::Pope(args) => cmd_eval_pope(&args),
        },
        Command::Analyze { kind } => match kind {
            AnalyzeKind::Dependency { traces, out } => cmd_analyze_dependency(&traces, &out),
        },
    }
}

fn apply_overrides(config: &mut RunConfig, args: &GenerateArgs) -> Result<(), CliError> {
    if let Some(method) = &args.method {
        config.method = method
            .parse()
            .map_err(|e: String| CliError::Config(e))?;
    }
    if !args.seed.is_empty() {
        config.seeds = args.seed.clone();
    }
    if let Some(corpus) = &args.corpus {
        config.corpus = Some(corpus.clone());
    }
    if let Some(out) = &args.out {
        config.out = Some(out.clone());
    }
    Ok(())
}

fn token_ids(raw: &[u32]) -> Vec<TokenId> {
    raw.iter().map(|&id| TokenId(id)).collect()
}

fn engine_error_to_cli(id: &str, e: EngineError) -> CliError {
    match e {
        EngineError::Backend { step, source } => {
            CliError::Backend(format!("item {id:?} failed at step {step}: {source}"))
        }
        other => CliError::Config(format!("item {id:?}: {other}")),
    }
}

/// Runs every (seed, item) pair and writes one trace file per seed plus a
/// shared generations file. Items run in parallel; files are written by this
/// single thread in input order, so repeated runs are byte-identical.
pub fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let mut config = RunConfig::load(&args.config)?;
    apply_overrides(&mut config, args)?;
    config.validate()?;

    let corpus_path = config
        .corpus
        .clone()
        .ok_or_else(|| CliError::Config("no corpus path: pass --corpus or set \"corpus\"".into()))?;
    let out_dir = config
        .out
        .clone()
        .ok_or_else(|| CliError::Config("no output path: pass --out or set \"out\"".into()))?;

    let items = corpus::load_corpus(&corpus_path)?;
    for item in &items {
        if item.prompt_tokens.is_empty() {
            return Err(CliError::Config(format!(
                "item {:?} has an empty prompt",
                item.id
            )));
        }
    }

    let backend = config.build_backend()?;
    std::fs::create_dir_all(&out_dir)?;

    let mut generation_lines: Vec<String> = Vec::new();
    for &seed in &config.seeds {
        let gen_config = config.generation_config(seed);
        let results: Vec<GenerationResult> = items
            .par_iter()
            .map(|item| {
                engine::generate(
                    backend.as_ref(),
                    &token_ids(&item.visual_tokens),
                    &token_ids(&item.prompt_tokens),
                    &gen_config,
                )
                .map_err(|e| engine_error_to_cli(&item.id, e))
            })
            .collect::<Result<_, _>>()?;

        let trace_path = out_dir.join(format!("traces-{seed}.jsonl"));
        let mut trace_file = std::fs::File::create(&trace_path)?;
        for (item, result) in items.iter().zip(&results) {
            for trace in &result.traces {
                writeln!(trace_file, "{}", trace_line(&item.id, seed, trace))?;
            }
            generation_lines.push(
                serde_json::to_string(&GenerationRecord {
                    id: item.id.clone(),
                    seed,
                    tokens: result.tokens.iter().map(|t| t.0).collect(),
                    termination: result.termination,
                })
                .expect("record serializes"),
            );
        }
        log::info!("wrote {}", trace_path.display());
    }

    let generations_path = out_dir.join("generations.jsonl");
    let mut file = std::fs::File::create(&generations_path)?;
    for line in generation_lines {
        writeln!(file, "{line}")?;
    }
    log::info!("wrote {}", generations_path.display());
    Ok(())
}

fn read_generations(path: &Path) -> Result<Vec<GenerationRecord>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: GenerationRecord = serde_json::from_str(line).map_err(|e| {
            CliError::Config(format!("generations line {}: {e}", i + 1))
        })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(CliError::Config("empty generations file".into()));
    }
    Ok(records)
}

/// Groups generations by seed and checks each group covers exactly the
/// corpus ids.
fn group_by_seed<'a>(
    records: &'a [GenerationRecord],
    items: &[CorpusItem],
) -> Result<BTreeMap<u64, BTreeMap<&'a str, &'a GenerationRecord>>, CliError> {
    let corpus_ids: BTreeSet<&str> = items.iter().map(|i| i.id.as_str()).collect();
    let mut by_seed: BTreeMap<u64, BTreeMap<&str, &GenerationRecord>> = BTreeMap::new();
    for record in records {
        by_seed
            .entry(record.seed)
            .or_default()
            .insert(record.id.as_str(), record);
    }
    for (seed, group) in &by_seed {
        let gen_ids: BTreeSet<&str> = group.keys().copied().collect();
        let missing: Vec<&str> = corpus_ids.difference(&gen_ids).copied().collect();
        let extra: Vec<&str> = gen_ids.difference(&corpus_ids).copied().collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(CliError::Config(format!(
                "id mismatch for seed {seed}: missing from generations {missing:?}, absent from corpus {extra:?}"
            )));
        }
    }
    Ok(by_seed)
}

fn mean<T: Copy, F: Fn(T) -> f64>(values: &[T], f: F) -> f64 {
    values.iter().map(|&v| f(v)).sum::<f64>() / values.len() as f64
}

#[derive(Debug, Serialize)]
struct ChairReport {
    per_seed: BTreeMap<u64, ChairScores>,
    mean: ChairScores,
}

pub fn cmd_eval_chair(args: &ChairArgs) -> Result<(), CliError> {
    let config = args.config.as_ref().map(|p| RunConfig::load(p)).transpose()?;
    let vocab_path = args
        .vocab_map
        .clone()
        .or_else(|| config.as_ref().and_then(|c| c.vocab_map.clone()))
        .ok_or_else(|| {
            CliError::Config(
                "caption scoring needs an object vocabulary: pass --vocab-map or set \"vocab_map\" in --config"
                    .into(),
            )
        })?;
    let vocab: VocabMap = corpus::load_vocab_map(&vocab_path)?;
    let items = corpus::load_corpus(&args.corpus)?;
    let records = read_generations(&args.generations)?;
    let by_seed = group_by_seed(&records, &items)?;

    let mut per_seed = BTreeMap::new();
    for (&seed, group) in &by_seed {
        let caption_records: Vec<CaptionRecord> = items
            .iter()
            .map(|item| {
                let gt = item.gt_objects.clone().ok_or_else(|| {
                    CliError::Config(format!("item {:?} has no gt_objects", item.id))
                })?;
                let generation = group[item.id.as_str()];
                Ok(CaptionRecord::new(
                    item.id.clone(),
                    corpus::extract_mentions(&generation.tokens, &vocab),
                    gt.into_iter().collect(),
                ))
            })
            .collect::<Result<_, CliError>>()?;
        let scores =
            eval::chair_scores(&caption_records).map_err(|e| CliError::Config(e.to_string()))?;
        per_seed.insert(seed, scores);
    }

    let all: Vec<ChairScores> = per_seed.values().copied().collect();
    let report = ChairReport {
        mean: ChairScores {
            c_s: mean(&all, |s| s.c_s),
            c_i: mean(&all, |s| s.c_i),
            recall: mean(&all, |s| s.recall),
        },
        per_seed,
    };
    write_json(&args.out, &report)
}

#[derive(Debug, Serialize)]
struct PopeReport {
    per_seed: BTreeMap<u64, PopeScores>,
    mean: PopeScores,
}

pub fn cmd_eval_pope(args: &PopeArgs) -> Result<(), CliError> {
    let config = args.config.as_ref().map(|p| RunConfig::load(p)).transpose()?;
    let yes_token = args
        .yes_token
        .or_else(|| config.as_ref().and_then(|c| c.pope_yes_token))
        .ok_or_else(|| {
            CliError::Config("binary VQA scoring needs --yes-token (or pope_yes_token in --config)".into())
        })?;
    let no_token = args
        .no_token
        .or_else(|| config.as_ref().and_then(|c| c.pope_no_token))
        .ok_or_else(|| {
            CliError::Config("binary VQA scoring needs --no-token (or pope_no_token in --config)".into())
        })?;
    if yes_token == no_token {
        return Err(CliError::Config("yes and no tokens must differ".into()));
    }

    let items = corpus::load_corpus(&args.corpus)?;
    let records = read_generations(&args.generations)?;
    let by_seed = group_by_seed(&records, &items)?;

    let mut per_seed = BTreeMap::new();
    for (&seed, group) in &by_seed {
        let pope_items: Vec<PopeItem> = items
            .iter()
            .map(|item| {
                let gold = item.gold.ok_or_else(|| {
                    CliError::Config(format!("item {:?} has no gold answer", item.id))
                })?;
                let question_object = item.question_object.clone().ok_or_else(|| {
                    CliError::Config(format!("item {:?} has no question_object", item.id))
                })?;
                let generation = group[item.id.as_str()];
                // Anything other than the yes token reads as "no".
                let predicted = match generation.tokens.first() {
                    Some(&t) if t == yes_token => PopeAnswer::Yes,
                    _ => PopeAnswer::No,
                };
                Ok(PopeItem {
                    id: item.id.clone(),
                    question_object,
                    gold,
                    predicted,
                })
            })
            .collect::<Result<_, CliError>>()?;
        let scores =
            eval::pope_scores(&pope_items).map_err(|e| CliError::Config(e.to_string()))?;
        per_seed.insert(seed, scores);
    }

    let all: Vec<PopeScores> = per_seed.values().copied().collect();
    let report = PopeReport {
        mean: PopeScores {
            accuracy: mean(&all, |s| s.accuracy),
            f1: mean(&all, |s| s.f1),
        },
        per_seed,
    };
    write_json(&args.out, &report)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut file = std::fs::File::create(path)?;
    let json = serde_json::to_string_pretty(value).expect("report serializes");
    writeln!(file, "{json}")?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn read_trace_lines(path: &Path) -> Result<Vec<TraceLine>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = TraceLine::parse(line)
            .map_err(|e| CliError::Config(format!("trace line {}: {e}", i + 1)))?;
        lines.push(parsed);
    }
    if lines.is_empty() {
        return Err(CliError::Config("empty trace file".into()));
    }
    Ok(lines)
}

fn write_curve_csv(path: &Path, per_step: &BTreeMap<u64, Vec<f64>>) -> Result<(), CliError> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "t,value")?;
    for (step, values) in per_step {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        writeln!(file, "{step},{mean}")?;
    }
    Ok(())
}

/// Averages the recorded per-step metrics over corpus items and writes
/// `vd.csv`, `vtd.csv`, and `jsd.csv`.
pub fn cmd_analyze_dependency(traces: &Path, out: &Path) -> Result<(), CliError> {
    let lines = read_trace_lines(traces)?;

    let metrics: [(&str, fn(&TraceLine) -> Option<f64>, &str); 3] = [
        ("vd.csv", |l: &TraceLine| l.vd, "no-visual"),
        ("vtd.csv", |l: &TraceLine| l.vtd, "pruned-text"),
        ("jsd.csv", |l: &TraceLine| l.jsd_hal, "degraded-pair"),
    ];

    let mut curves: Vec<(&str, BTreeMap<u64, Vec<f64>>)> = Vec::new();
    for (file_name, getter, pass) in metrics {
        let mut per_step: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for line in &lines {
            let value = getter(line).ok_or_else(|| {
                CliError::Config(format!(
                    "trace for item {:?} step {} lacks the {pass} pass; \
                     dependency analysis needs a method that records it",
                    line.id, line.step
                ))
            })?;
            per_step.entry(line.step).or_default().push(value);
        }
        curves.push((file_name, per_step));
    }

    std::fs::create_dir_all(out)?;
    for (file_name, per_step) in curves {
        write_curve_csv(&out.join(file_name), &per_step)?;
        log::info!("wrote {}", out.join(file_name).display());
    }
    Ok(())
}
