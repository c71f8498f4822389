//! Command-line surface. Flags override the config file, which overrides
//! the built-in defaults.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use corpusqa::config::{AppConfig, DEFAULT_CONFIG_PATH};
use corpusqa::engine::{ChatSession, ChatTurn};
use corpusqa::harness::{
    self, cap_words, emit_sweep_report, make_blind_pairs, read_judgments_csv, read_responses_jsonl,
    ReportFormat, SweepSpec,
};
use corpusqa::ingest::{load_document, ChunkingPolicy, DocFormat};
use corpusqa::llm::GenerationParams;
use corpusqa::{AnswerResult, Engine, RetrievalParams, SystemPromptPreset, VectorIndex};

use crate::server::{self, AppState};

#[derive(Debug, Parser)]
#[command(name = "corpusqa", version, about = "Retrieval-augmented question answering over document corpora")]
#[command(arg_required_else_help = true, subcommand_required = true)]
pub struct Cli {
    /// Configuration file (JSON). Missing file means built-in defaults.
    #[arg(long, global = true, value_name = "FILE", default_value = DEFAULT_CONFIG_PATH)]
    pub config: PathBuf,

    /// Index file; overrides `index_path` from the config.
    #[arg(long, global = true, value_name = "FILE")]
    pub index: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load, chunk, embed and store documents.
    Ingest(IngestArgs),
    /// Answer one question from the index.
    Query(QueryArgs),
    /// Interactive chat with memory, reading questions from stdin.
    Chat(ChatArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
    /// Run a parameter sweep and write a report.
    Sweep(SweepArgs),
    /// Blind A/B evaluation.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Index maintenance.
    #[command(subcommand)]
    Index(IndexCommand),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(required = true, value_name = "PATH")]
    pub paths: Vec<PathBuf>,
    /// Force the document format instead of mapping from the extension.
    #[arg(long, value_parser = clap::value_parser!(DocFormat))]
    pub format: Option<DocFormat>,
    #[arg(long, value_name = "N")]
    pub chunk_words: Option<usize>,
    #[arg(long, value_name = "N")]
    pub overlap_words: Option<usize>,
}

/// Generation and retrieval overrides shared by `query` and `chat`.
#[derive(Debug, Clone, Args, Default)]
pub struct KnobArgs {
    #[arg(long, value_name = "N")]
    pub top_k: Option<usize>,
    #[arg(long, value_name = "T")]
    pub temperature: Option<f64>,
    #[arg(long, value_name = "N")]
    pub max_tokens: Option<usize>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// strict_assistant | brief_expert | populariser | custom
    #[arg(long = "system-prompt", value_name = "ID")]
    pub system_prompt: Option<String>,
    /// Prompt text when --system-prompt custom is used.
    #[arg(long, value_name = "TEXT")]
    pub system_prompt_text: Option<String>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    pub text: String,
    #[command(flatten)]
    pub knobs: KnobArgs,
    /// Print the retrieved chunks after the answer.
    #[arg(long)]
    pub show_sources: bool,
    /// Print the full result as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    /// JSON-lines transcript to resume from and append to.
    #[arg(long, value_name = "FILE")]
    pub session: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub memory_window: Option<usize>,
    #[command(flatten)]
    pub knobs: KnobArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long, value_name = "ADDR")]
    pub bind: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_name = "FILE")]
    pub spec: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, default_value = "csv", value_parser = ["csv", "markdown"])]
    pub format: String,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Build anonymized answer pairs and a separate key.
    Pair(PairArgs),
    /// Score judgments against the key.
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
pub struct PairArgs {
    /// System A answers, JSON lines of {"query","answer"}.
    #[arg(long, value_name = "FILE")]
    pub a: PathBuf,
    /// System B answers, same layout and query order as --a.
    #[arg(long, value_name = "FILE")]
    pub b: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_name = "FILE")]
    pub pairs: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub key: PathBuf,
    /// Truncate system A answers to this many words.
    #[arg(long, value_name = "N")]
    pub cap_a_words: Option<usize>,
    /// Truncate system B answers to this many words.
    #[arg(long, value_name = "N")]
    pub cap_b_words: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long, value_name = "FILE")]
    pub key: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub judgments: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    /// Print the index manifest.
    Info,
}

/// Settings for one query after layering flags over config.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub retrieval: RetrievalParams,
    pub generation: GenerationParams,
    pub preset: SystemPromptPreset,
    pub budget_tokens: usize,
}

impl KnobArgs {
    pub fn resolve(&self, config: &AppConfig) -> anyhow::Result<Resolved> {
        let d = &config.defaults;
        let preset = match &self.system_prompt {
            Some(id) => SystemPromptPreset::resolve(id, self.system_prompt_text.as_deref())?,
            None => config.preset()?,
        };
        let resolved = Resolved {
            retrieval: RetrievalParams { top_k: self.top_k.unwrap_or(d.top_k) },
            generation: GenerationParams {
                temperature: self.temperature.unwrap_or(d.temperature),
                max_tokens: self.max_tokens.unwrap_or(d.max_tokens),
                seed: self.seed,
            },
            preset,
            budget_tokens: d.budget_tokens,
        };
        if resolved.retrieval.top_k == 0 {
            bail!("--top-k must be >= 1");
        }
        resolved.generation.validate()?;
        Ok(resolved)
    }
}

impl Cli {
    pub fn load_config(&self) -> anyhow::Result<AppConfig> {
        let mut config = AppConfig::load_or_default(&self.config)?;
        if let Some(index) = &self.index {
            config.index_path = index.clone();
        }
        Ok(config)
    }
}

fn open_engine(config: &AppConfig) -> anyhow::Result<Engine> {
    let index = AppConfig::open_index(&config.index_path)
        .with_context(|| format!("opening index {}", config.index_path.display()))?;
    Ok(config.build_engine(index)?)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let config = cli.load_config()?;
    match cli.command {
        Command::Ingest(args) => ingest(&config, &args),
        Command::Query(args) => query(&config, &args),
        Command::Chat(args) => chat(&config, &args),
        Command::Serve(args) => serve(config, &args),
        Command::Sweep(args) => sweep(&config, &args),
        Command::Eval(EvalCommand::Pair(args)) => eval_pair(&args),
        Command::Eval(EvalCommand::Score(args)) => eval_score(&args),
        Command::Index(IndexCommand::Info) => index_info(&config),
    }
}

fn ingest(config: &AppConfig, args: &IngestArgs) -> anyhow::Result<()> {
    let policy = ChunkingPolicy::new(
        args.chunk_words.unwrap_or(config.chunking.chunk_words()),
        args.overlap_words.unwrap_or(config.chunking.overlap_words()),
    )?;
    let engine = open_engine(config)?;
    let mut seen = HashSet::new();
    let mut total = 0;
    for path in &args.paths {
        let doc_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .filter(|s| !s.is_empty())
            .with_context(|| format!("cannot derive a document id from {}", path.display()))?
            .to_string();
        if !seen.insert(doc_id.clone()) {
            bail!("two inputs map to document id `{doc_id}`; rename one of them");
        }
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let raw = load_document(&path.to_string_lossy(), &bytes, args.format, &doc_id)?;
        let n = engine
            .ingest(&raw, policy)
            .with_context(|| format!("ingesting {}", path.display()))?;
        println!("{}: {n} chunks", path.display());
        total += n;
    }
    engine.index().save(&config.index_path)?;
    println!(
        "index {}: {} entries ({total} written)",
        config.index_path.display(),
        engine.index().len()
    );
    Ok(())
}

fn print_answer(result: &AnswerResult, show_sources: bool, out: &mut impl Write) -> io::Result<()> {
    writeln!(out, "{}", result.answer)?;
    if result.no_context {
        writeln!(out, "(answered without retrieved context)")?;
    }
    if show_sources {
        for h in &result.hits {
            writeln!(out, "[{}] {} score={:.6}", h.chunk_id, h.doc_id, h.score)?;
        }
    }
    Ok(())
}

fn query(config: &AppConfig, args: &QueryArgs) -> anyhow::Result<()> {
    let r = args.knobs.resolve(config)?;
    let engine = open_engine(config)?;
    let result = engine.answer_query(&args.text, &r.retrieval, &r.generation, &r.preset, r.budget_tokens)?;
    let mut out = io::stdout().lock();
    if args.json {
        serde_json::to_writer_pretty(&mut out, &result)?;
        writeln!(out)?;
    } else {
        print_answer(&result, args.show_sources, &mut out)?;
    }
    Ok(())
}

fn read_transcript(path: &Path) -> anyhow::Result<Vec<ChatTurn>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let reader = BufReader::new(File::open(path)?);
    let mut turns = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        turns.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{} line {}", path.display(), i + 1))?,
        );
    }
    Ok(turns)
}

fn chat(config: &AppConfig, args: &ChatArgs) -> anyhow::Result<()> {
    let r = args.knobs.resolve(config)?;
    let engine = open_engine(config)?;
    let turns = match &args.session {
        Some(path) => read_transcript(path)?,
        None => Vec::new(),
    };
    let session_id = "cli".to_string();
    engine.insert_session(ChatSession {
        session_id: session_id.clone(),
        preset: r.preset.clone(),
        memory_window: args.memory_window.unwrap_or(config.defaults.memory_window),
        turns,
    })?;
    let mut transcript = match &args.session {
        Some(path) => Some(BufWriter::new(
            OpenOptions::new().create(true).append(true).open(path)?,
        )),
        None => None,
    };
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    write!(out, "> ")?;
    out.flush()?;
    for line in stdin.lock().lines() {
        let line = line?;
        let text = line.trim();
        if text == "/quit" || text == "/exit" {
            break;
        }
        if !text.is_empty() {
            match engine.chat_turn(&session_id, text, &r.retrieval, &r.generation, r.budget_tokens) {
                Ok((result, _)) => {
                    print_answer(&result, true, &mut out)?;
                    if let Some(w) = transcript.as_mut() {
                        let session = engine.session(&session_id)?;
                        let turn = session.turns.last().expect("turn just appended");
                        serde_json::to_writer(&mut *w, turn)?;
                        w.write_all(b"\n")?;
                        w.flush()?;
                    }
                }
                Err(e) => writeln!(out, "error: {e}")?,
            }
        }
        write!(out, "> ")?;
        out.flush()?;
    }
    writeln!(out)?;
    Ok(())
}

fn serve(config: AppConfig, args: &ServeArgs) -> anyhow::Result<()> {
    let engine = open_engine(&config)?;
    let bind = args.bind.clone().unwrap_or_else(|| config.server.bind_address.clone());
    let port = args.port.unwrap_or(config.server.port);
    let index_path = Some(config.index_path.clone());
    let state = AppState::new(engine, config, index_path)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(server::serve(state, &bind, port))
}

fn sweep(config: &AppConfig, args: &SweepArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.spec).with_context(|| format!("reading {}", args.spec.display()))?;
    let spec: SweepSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", args.spec.display()))?;
    let format: ReportFormat = args.format.parse().map_err(anyhow::Error::msg)?;
    let engine = open_engine(config)?;
    let records = harness::run_sweep(&spec, &engine, config.defaults.budget_tokens, config.server.parallelism)?;
    fs::write(&args.out, emit_sweep_report(&records, format)?)?;
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    println!("{} records written to {} ({failed} failed)", records.len(), args.out.display());
    Ok(())
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (std::path::absolute(a), std::path::absolute(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn read_responses(path: &Path) -> anyhow::Result<Vec<harness::Response>> {
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    read_responses_jsonl(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

fn eval_pair(args: &PairArgs) -> anyhow::Result<()> {
    if same_file(&args.pairs, &args.key) {
        bail!("--pairs and --key must be different files; keep the key away from the judges");
    }
    let cap = |rs: Vec<harness::Response>, n: Option<usize>| match n {
        None => rs,
        Some(n) => rs
            .into_iter()
            .map(|r| harness::Response { answer: cap_words(&r.answer, n), ..r })
            .collect(),
    };
    let a = cap(read_responses(&args.a)?, args.cap_a_words);
    let b = cap(read_responses(&args.b)?, args.cap_b_words);
    let (pairs, key) = make_blind_pairs(&a, &b, args.seed)?;
    let mut w = BufWriter::new(File::create(&args.pairs)?);
    harness::write_pairs_jsonl(&pairs, &mut w)?;
    w.flush()?;
    fs::write(&args.key, serde_json::to_string_pretty(&key)? + "\n")?;
    println!("{} pairs written to {}; key in {}", pairs.len(), args.pairs.display(), args.key.display());
    Ok(())
}

fn eval_score(args: &ScoreArgs) -> anyhow::Result<()> {
    let key = serde_json::from_str(&fs::read_to_string(&args.key)?)
        .with_context(|| format!("parsing {}", args.key.display()))?;
    let judgments = read_judgments_csv(File::open(&args.judgments)?)
        .with_context(|| format!("parsing {}", args.judgments.display()))?;
    let report = harness::score(&key, &judgments)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn index_info(config: &AppConfig) -> anyhow::Result<()> {
    if !config.index_path.exists() {
        bail!("no index at {}", config.index_path.display());
    }
    let index = VectorIndex::load(&config.index_path)?;
    println!("{}", serde_json::to_string_pretty(&index.manifest())?);
    Ok(())
}
