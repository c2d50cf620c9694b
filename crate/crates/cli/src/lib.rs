//! The `kgrec` command line: split, build-dataset, train, eval, answer,
//! and synth for generating a synthetic graph.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 numeric failure
//! during training, 4 artifact mismatch (vocabulary hash or verification),
//! 1 anything else (I/O, malformed files).

use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use kgrec_core::checkpoint::{self, CheckpointError};
use kgrec_core::dataset::{verify_dataset, DatasetError};
use kgrec_core::eval::{rank_by_score, EvalError};
use kgrec_core::oracle::answer_joint;
use kgrec_core::synthetic::{self, SyntheticConfig};
use kgrec_core::train::{self, LogEntry, TrainError};
use kgrec_core::{
    build_dataset, evaluate, load_graph, parse_query, split_edges, Dataset, DatasetConfig, KgError, KgSplit,
    KnowledgeGraph, Model, SplitName, TargetMode, Task, TrainConfig, Variant,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }
}

impl From<KgError> for CliError {
    fn from(e: KgError) -> Self {
        let code = match e {
            KgError::InvalidFraction(_) | KgError::SplitInfeasible { .. } => EXIT_USAGE,
            KgError::Manifest(_) => EXIT_MISMATCH,
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        let code = match e {
            DatasetError::Config { .. } | DatasetError::ZeroShotInTrain(_) | DatasetError::Shortfall(_) | DatasetError::NoUsers => {
                EXIT_USAGE
            }
            DatasetError::Manifest(_) => EXIT_MISMATCH,
            DatasetError::Kg(e) => return e.into(),
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let code = match e {
            CheckpointError::VocabMismatch { .. } => EXIT_MISMATCH,
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::Config { .. } | TrainError::Model(_) | TrainError::NoRecords => EXIT_USAGE,
            TrainError::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::new(EXIT_USAGE, e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn read_config(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
}

fn write_text(path: &Path, body: &str) -> CliResult {
    fs::write(path, body).map_err(|e| CliError::new(EXIT_FAILURE, format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| CliError::new(EXIT_FAILURE, format!("{}: {e}", path.display())))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let f: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if f > 0.0 && f < 1.0 {
        Ok(f)
    } else {
        Err(format!("fraction must lie strictly between 0 and 1, got {f}"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "kgrec", version, about = "Item recommendation constrained by logical queries over a knowledge graph")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnswerMode {
    Symbolic,
    Embedding,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GraphChoice {
    Train,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Small,
    Medium,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Hold out a fraction of the graph's edges.
    Split {
        #[arg(long)]
        triples: PathBuf,
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        users: PathBuf,
        /// Name of the user-item interaction relation.
        #[arg(long)]
        like: String,
        #[arg(long, value_parser = parse_fraction)]
        fraction: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample train/valid/test records from a split directory.
    BuildDataset {
        #[arg(long)]
        split_dir: PathBuf,
        /// key = value counts file, e.g. `train.basic = 100`.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides `seed` in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and keep the best checkpoint on validation.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// key = value hyperparameters; flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated cutoffs.
        #[arg(long, value_delimiter = ',', default_value = "10,20")]
        k: Vec<usize>,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: SplitName,
        /// Fit on training records: rank every answer instead of hard ones.
        #[arg(long)]
        all_answers: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Interactive query loop reading `user <name> | <query>` lines.
    Answer {
        /// Split directory holding the graph.
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        mode: AnswerMode,
        /// Graph used for exact answers.
        #[arg(long, value_enum, default_value = "train")]
        graph: GraphChoice,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Write a synthetic cluster-structured graph (triples, items, users).
    Synth {
        #[arg(long, value_enum, default_value = "small")]
        preset: Preset,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: kgrec_core::model::ModelError| e.to_string())
}

fn parse_split(s: &str) -> Result<SplitName, String> {
    s.parse()
}

/// Parses `args` (program name first) and runs the command. Never exits
/// the process; returns the exit code.
pub fn run<I, T>(args: I, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command, input, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cmd: Command, input: &mut dyn BufRead, out: &mut dyn Write) -> CliResult {
    match cmd {
        Command::Split { triples, items, users, like, fraction, seed, out: dir } => {
            cmd_split(&triples, &items, &users, &like, fraction, seed, &dir, out)
        }
        Command::BuildDataset { split_dir, config, out_dir, seed } => cmd_build_dataset(&split_dir, &config, &out_dir, seed, out),
        Command::Train { data, config, variant, seed, epochs, out: dir } => {
            cmd_train(&data, config.as_deref(), variant, seed, epochs, &dir, out)
        }
        Command::Eval { data, checkpoint, k, split, all_answers, out: dir } => {
            cmd_eval(&data, &checkpoint, &k, split, all_answers, dir.as_deref(), out)
        }
        Command::Answer { kg, checkpoint, mode, graph, top } => cmd_answer(&kg, checkpoint.as_deref(), mode, graph, top, input, out),
        Command::Synth { preset, seed, out: dir } => cmd_synth(preset, seed, &dir, out),
    }
}

fn say(out: &mut dyn Write, text: impl AsRef<str>) -> CliResult {
    out.write_all(text.as_ref().as_bytes()).map_err(|e| CliError::new(EXIT_FAILURE, e.to_string()))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_split(
    triples: &Path,
    items: &Path,
    users: &Path,
    like: &str,
    fraction: f64,
    seed: u64,
    dir: &Path,
    out: &mut dyn Write,
) -> CliResult {
    let kg = load_graph(triples, items, users, like)?;
    let split = split_edges(&kg, fraction, seed)?;
    let manifest = split.save(dir)?;
    say(
        out,
        format!(
            "triples {}  train {}  held-out {}\ncontent hash {}\n",
            manifest.full_triples, manifest.train_triples, manifest.held_out_triples, manifest.content_hash
        ),
    )
}

pub fn cmd_build_dataset(split_dir: &Path, config: &Path, out_dir: &Path, seed: Option<u64>, out: &mut dyn Write) -> CliResult {
    let text = read_config(config)?;
    let mut cfg = DatasetConfig::parse(&text)?;
    match seed {
        Some(s) => cfg.seed = s,
        None if !text.lines().any(|l| l.split('#').next().unwrap_or("").trim_start().starts_with("seed")) => {
            return Err(CliError::usage("a seed is required: set `seed` in the config or pass --seed"));
        }
        None => {}
    }
    let (split, _) = KgSplit::load(split_dir)?;
    let ds = build_dataset(&split, &cfg)?;
    let problems = verify_dataset(&split, &ds, cfg.answer_cap);
    if !problems.is_empty() {
        return Err(CliError::new(EXIT_MISMATCH, format!("verification failed:\n{}", problems.join("\n"))));
    }
    ds.save(out_dir, &cfg)?;
    say(out, ds.stats().to_string())?;
    say(out, "verified: 0 violations\n")
}

#[derive(Serialize)]
struct TrainSummary {
    variant: Variant,
    seed: u64,
    best_epoch: usize,
    best_val_hit20: Option<f64>,
    epochs_run: usize,
    best_sha256: String,
    last_sha256: String,
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    error: String,
    log: &'a [LogEntry],
    checkpoint: Option<String>,
}

pub fn cmd_train(
    data: &Path,
    config: Option<&Path>,
    variant: Option<Variant>,
    seed: u64,
    epochs: Option<usize>,
    dir: &Path,
    out: &mut dyn Write,
) -> CliResult {
    let mut cfg = match config {
        Some(p) => TrainConfig::parse(&read_config(p)?)?,
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    if let Some(v) = variant {
        cfg.variant = v;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let (ds, _) = Dataset::load(data)?;
    create_dir(dir)?;
    let hash = ds.vocab_hash();
    write_text(&dir.join("train_config.json"), &(serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n"))?;

    let mut log_text = String::new();
    let result = train::train::<f64>(&ds, &cfg, |e| {
        log_text.push_str(&serde_json::to_string(e).expect("log entry serializes"));
        log_text.push('\n');
    });
    write_text(&dir.join("train_log.jsonl"), &log_text)?;
    let outcome = match result {
        Ok(o) => o,
        Err(fail) => {
            let ckpt = match &fail.model {
                Some(m) => {
                    let path = dir.join("diagnostic.ckpt");
                    checkpoint::save(&path, m, seed, &hash, fail.log.len())?;
                    Some(path.display().to_string())
                }
                None => None,
            };
            let diag = Diagnostic { error: fail.error.to_string(), log: &fail.log, checkpoint: ckpt };
            let path = dir.join("diagnostic.json");
            write_text(&path, &(serde_json::to_string_pretty(&diag).expect("diagnostic serializes") + "\n"))?;
            let mut e = CliError::from(fail.error);
            e.message = format!("{}; diagnostic written to {}", e.message, path.display());
            return Err(e);
        }
    };
    let best_sha256 = checkpoint::save(&dir.join("best.ckpt"), &outcome.best, seed, &hash, outcome.best_epoch)?;
    let last_sha256 = checkpoint::save(&dir.join("last.ckpt"), &outcome.last, seed, &hash, outcome.log.len())?;
    let summary = TrainSummary {
        variant: cfg.variant,
        seed,
        best_epoch: outcome.best_epoch,
        best_val_hit20: outcome.best_val,
        epochs_run: outcome.log.len(),
        best_sha256,
        last_sha256,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    write_text(&dir.join("summary.json"), &json)?;
    say(out, json)
}

pub fn cmd_eval(
    data: &Path,
    ckpt: &Path,
    ks: &[usize],
    split: SplitName,
    all_answers: bool,
    dir: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult {
    let (ds, _) = Dataset::load(data)?;
    let (model, header) = checkpoint::load::<f64>(ckpt)?;
    header.check_vocab(&ds.vocab_hash())?;
    let mode = if all_answers { TargetMode::AllAnswers } else { TargetMode::HardOnly };
    let report = evaluate(&model, &ds.items, ds.split(split), ks, mode)?;
    let table = report.to_table();
    if let Some(dir) = dir {
        create_dir(dir)?;
        write_text(&dir.join("report.txt"), &table)?;
        write_text(&dir.join("report.json"), &report.to_json())?;
    }
    say(out, table)
}

fn load_model_for(kg: &KnowledgeGraph, ckpt: &Path) -> CliResult<Model> {
    let (model, header) = checkpoint::load::<f64>(ckpt)?;
    header.check_vocab(&kg.vocab_hash())?;
    Ok(model)
}

pub fn cmd_answer(
    kg_dir: &Path,
    ckpt: Option<&Path>,
    mode: AnswerMode,
    graph: GraphChoice,
    top: usize,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
) -> CliResult {
    let (split, _) = KgSplit::load(kg_dir)?;
    let kg = match graph {
        GraphChoice::Train => &split.train,
        GraphChoice::Full => &split.full,
    };
    let model = match (mode, ckpt) {
        (AnswerMode::Symbolic, _) => None,
        (_, Some(p)) => Some(load_model_for(kg, p)?),
        (_, None) => return Err(CliError::usage("--checkpoint is required for embedding and both modes")),
    };
    let mut line = String::new();
    loop {
        line.clear();
        let n = input.read_line(&mut line).map_err(|e| CliError::new(EXIT_FAILURE, e.to_string()))?;
        if n == 0 {
            break;
        }
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if text == "quit" || text == "exit" {
            break;
        }
        match answer_line(kg, model.as_ref(), mode, top, text) {
            Ok(reply) => say(out, reply)?,
            Err(msg) => say(out, format!("error: {msg}\n"))?,
        }
    }
    Ok(())
}

/// Reply to one REPL line.
pub fn answer_line(kg: &KnowledgeGraph, model: Option<&Model>, mode: AnswerMode, top: usize, line: &str) -> Result<String, String> {
    let rest = line.strip_prefix("user").filter(|r| r.starts_with(char::is_whitespace)).ok_or("expected `user <name> | <query>`")?;
    let (name, query) = rest.split_once('|').ok_or("expected `|` between user and query")?;
    let name = name.trim();
    let user = kg.entities().get(name).ok_or_else(|| format!("unknown user `{name}`"))?;
    if !kg.users().contains(user) {
        return Err(format!("`{name}` is not a user"));
    }
    let query_offset = line.len() - query.len();
    let q = parse_query(query, kg).map_err(|e| format!("{e} (query starts at byte {query_offset} of the line)"))?;
    let mut reply = String::new();
    let exact = answer_joint(kg, user, &q);
    if matches!(mode, AnswerMode::Symbolic | AnswerMode::Both) {
        reply.push_str(&format!("exact answers ({}):", exact.len()));
        for i in &exact {
            reply.push(' ');
            reply.push_str(kg.entities().name(i));
        }
        reply.push('\n');
    }
    if let Some(model) = model.filter(|_| mode != AnswerMode::Symbolic) {
        let emb = model.task_embeddings(user, &q);
        let qs = &emb.tasks[Task::Joint.index()];
        let ranked = rank_by_score(kg.items().iter().map(|i| (i, model.logit(qs, i))).collect());
        reply.push_str(&format!("embedding top {top}:\n"));
        for (rank, (i, _)) in ranked.iter().take(top).enumerate() {
            let mark = if mode == AnswerMode::Both && !exact.contains(*i) { "  (not in exact answers)" } else { "" };
            reply.push_str(&format!("{:>4}. {}  {:.4}{}\n", rank + 1, kg.entities().name(*i), model.score(qs, *i), mark));
        }
    }
    Ok(reply)
}

pub fn cmd_synth(preset: Preset, seed: u64, dir: &Path, out: &mut dyn Write) -> CliResult {
    let cfg = match preset {
        Preset::Small => SyntheticConfig::small(seed),
        Preset::Medium => SyntheticConfig::medium(seed),
    };
    let g = synthetic::generate(&cfg);
    create_dir(dir)?;
    write_text(&dir.join("triples.tsv"), &g.triples_tsv)?;
    write_text(&dir.join("items.txt"), &g.items)?;
    write_text(&dir.join("users.txt"), &g.users)?;
    say(out, format!("wrote {} (interaction relation `{}`)\n", dir.display(), synthetic::LIKE_RELATION))
}

/// sha256 over the files of a split or dataset directory, in name order.
pub fn directory_digest(dir: &Path) -> CliResult<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| CliError::new(EXIT_FAILURE, format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut all = Vec::new();
    for n in names {
        let bytes = fs::read(dir.join(&n)).map_err(|e| CliError::new(EXIT_FAILURE, format!("{n}: {e}")))?;
        all.extend_from_slice(n.as_bytes());
        all.push(0);
        all.extend_from_slice(sha256_hex(&bytes).as_bytes());
    }
    Ok(sha256_hex(&all))
}
