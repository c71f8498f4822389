//! Parameter sweeps and blind A/B evaluation.
//!
//! A sweep runs every cell of the grid
//! `queries × temperatures × top_ks × max_tokens × presets × repetitions`
//! and returns one record per cell in that lexicographic order, whatever
//! order the cells finished in.
//!
//! The blind protocol pairs two systems' answers per query, hides which
//! side is which behind a seeded coin, and stores the assignment in a key
//! that is kept apart from the pairs handed to judges.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Read, Write};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Engine, PresetId, RetrievalParams, SystemPromptPreset};
use crate::llm::{FinishReason, GenerationParams, DEFAULT_MAX_TOKENS};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid sweep spec: {0}")]
    InvalidSpec(String),
    #[error("no records to report")]
    EmptyRecords,
    #[error("response lists differ in length: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("queries differ at position {index}")]
    QueryMismatch { index: usize },
    #[error("judgment references unknown pair {0}")]
    UnknownPairId(String),
    #[error("pair {0} was judged more than once")]
    DuplicateJudgment(String),
    #[error("no judgments to score")]
    EmptyJudgments,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn default_temperatures() -> Vec<f64> {
    vec![0.1, 0.4, 0.7, 1.5]
}

fn default_top_ks() -> Vec<usize> {
    vec![2, 3, 4, 6]
}

fn default_max_tokens() -> Vec<usize> {
    vec![DEFAULT_MAX_TOKENS]
}

fn default_presets() -> Vec<PresetId> {
    vec![PresetId::StrictAssistant]
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub queries: Vec<String>,
    #[serde(default = "default_temperatures")]
    pub temperatures: Vec<f64>,
    #[serde(default = "default_top_ks")]
    pub top_ks: Vec<usize>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens_list: Vec<usize>,
    #[serde(default = "default_presets")]
    pub presets: Vec<PresetId>,
    #[serde(default = "one")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SweepSpec {
    /// A spec over `queries` with every other dimension at its default.
    pub fn new(queries: Vec<String>) -> Self {
        SweepSpec {
            queries,
            temperatures: default_temperatures(),
            top_ks: default_top_ks(),
            max_tokens_list: default_max_tokens(),
            presets: default_presets(),
            repetitions: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: &str| Err(HarnessError::InvalidSpec(msg.to_string()));
        if self.queries.is_empty() || self.queries.iter().any(|q| q.trim().is_empty()) {
            return bad("queries must be non-empty strings");
        }
        if self.temperatures.is_empty()
            || self.top_ks.is_empty()
            || self.max_tokens_list.is_empty()
            || self.presets.is_empty()
        {
            return bad("every grid dimension needs at least one value");
        }
        if self.temperatures.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return bad("temperatures must be >= 0");
        }
        if self.top_ks.contains(&0) {
            return bad("top_ks must be >= 1");
        }
        if self.max_tokens_list.contains(&0) {
            return bad("max_tokens must be >= 1");
        }
        if self.presets.contains(&PresetId::Custom) {
            return bad("sweeps take named presets only");
        }
        if self.repetitions == 0 {
            return bad("repetitions must be >= 1");
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.queries.len()
            * self.temperatures.len()
            * self.top_ks.len()
            * self.max_tokens_list.len()
            * self.presets.len()
            * self.repetitions
    }

    fn cells(&self) -> Vec<SweepCell<'_>> {
        let mut cells = Vec::with_capacity(self.cell_count());
        for query in &self.queries {
            for &temperature in &self.temperatures {
                for &top_k in &self.top_ks {
                    for &max_tokens in &self.max_tokens_list {
                        for &preset in &self.presets {
                            for rep in 0..self.repetitions {
                                cells.push(SweepCell {
                                    query,
                                    temperature,
                                    top_k,
                                    max_tokens,
                                    preset,
                                    rep,
                                    seed: self.seed.wrapping_add(rep as u64),
                                });
                            }
                        }
                    }
                }
            }
        }
        cells
    }
}

struct SweepCell<'a> {
    query: &'a str,
    temperature: f64,
    top_k: usize,
    max_tokens: usize,
    preset: PresetId,
    rep: usize,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRef {
    pub chunk_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub query: String,
    pub preset: PresetId,
    pub temperature: f64,
    pub top_k: usize,
    pub max_tokens: usize,
    pub rep: usize,
    pub seed: u64,
    pub answer: String,
    pub hits: Vec<HitRef>,
    pub duration_ms: u64,
    /// `None` when the cell failed; see `error`.
    pub finish_reason: Option<FinishReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SweepRecord {
    fn finish_label(&self) -> &'static str {
        self.finish_reason.as_ref().map_or("error", FinishReason::as_str)
    }

    fn answer_or_error(&self) -> String {
        match &self.error {
            Some(e) => format!("ERROR: {e}"),
            None => self.answer.clone(),
        }
    }
}

/// Runs every grid cell with at most `parallelism` cells in flight. Cell
/// failures are recorded in place.
pub fn run_sweep(
    spec: &SweepSpec,
    engine: &Engine,
    budget_tokens: usize,
    parallelism: usize,
) -> Result<Vec<SweepRecord>, HarnessError> {
    use rayon::prelude::*;

    spec.validate()?;
    let cells = spec.cells();
    let run_cell = |cell: &SweepCell<'_>| {
        let rp = RetrievalParams { top_k: cell.top_k };
        let gp = GenerationParams {
            temperature: cell.temperature,
            max_tokens: cell.max_tokens,
            seed: Some(cell.seed),
        };
        let preset = SystemPromptPreset::named(cell.preset);
        let started = Instant::now();
        let outcome = engine.answer_query(cell.query, &rp, &gp, &preset, budget_tokens);
        let duration_ms = started.elapsed().as_millis() as u64;
        let mut record = SweepRecord {
            query: cell.query.to_string(),
            preset: cell.preset,
            temperature: cell.temperature,
            top_k: cell.top_k,
            max_tokens: cell.max_tokens,
            rep: cell.rep,
            seed: cell.seed,
            answer: String::new(),
            hits: Vec::new(),
            duration_ms,
            finish_reason: None,
            error: None,
        };
        match outcome {
            Ok(r) => {
                record.answer = r.answer;
                record.hits = r
                    .hits
                    .into_iter()
                    .map(|h| HitRef { chunk_id: h.chunk_id, score: h.score })
                    .collect();
                record.finish_reason = Some(r.finish_reason);
            }
            Err(e) => record.error = Some(e.to_string()),
        }
        record
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| HarnessError::InvalidSpec(format!("thread pool: {e}")))?;
    Ok(pool.install(|| cells.par_iter().map(run_cell).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format `{other}` (expected csv|markdown)")),
        }
    }
}

pub const CSV_HEADER: [&str; 9] = [
    "query",
    "preset",
    "temperature",
    "top_k",
    "max_tokens",
    "rep",
    "duration_ms",
    "finish_reason",
    "answer",
];

pub fn emit_sweep_report(records: &[SweepRecord], format: ReportFormat) -> Result<String, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::EmptyRecords);
    }
    match format {
        ReportFormat::Csv => csv_report(records),
        ReportFormat::Markdown => Ok(markdown_report(records)),
    }
}

fn csv_report(records: &[SweepRecord]) -> Result<String, HarnessError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.query.clone(),
            r.preset.to_string(),
            r.temperature.to_string(),
            r.top_k.to_string(),
            r.max_tokens.to_string(),
            r.rep.to_string(),
            r.duration_ms.to_string(),
            r.finish_label().to_string(),
            r.answer_or_error(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv writer emits the UTF-8 it was given"))
}

fn md_cell(s: &str) -> String {
    s.replace('|', "\\|").replace("\r\n", "<br>").replace('\n', "<br>")
}

fn markdown_report(records: &[SweepRecord]) -> String {
    let mut queries: Vec<&str> = Vec::new();
    for r in records {
        if !queries.contains(&r.query.as_str()) {
            queries.push(&r.query);
        }
    }
    let mut out = String::new();
    for (i, query) in queries.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let mut rows: Vec<&SweepRecord> = records.iter().filter(|r| r.query == *query).collect();
        rows.sort_by(|a, b| a.temperature.total_cmp(&b.temperature).then(a.top_k.cmp(&b.top_k)));
        let _ = writeln!(out, "### Query: {}\n", md_cell(query));
        out.push_str("| preset | temperature | top_k | max_tokens | rep | finish_reason | answer |\n");
        out.push_str("|---|---|---|---|---|---|---|\n");
        for r in rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} |",
                r.preset,
                r.temperature,
                r.top_k,
                r.max_tokens,
                r.rep,
                r.finish_label(),
                md_cell(&r.answer_or_error())
            );
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Blind evaluation

/// One system's answer to one query. Extra fields in input files are ignored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub query: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindPair {
    pub pair_id: String,
    pub query: String,
    pub response_left: String,
    pub response_right: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assignment {
    #[serde(rename = "A_left")]
    ALeft,
    #[serde(rename = "A_right")]
    ARight,
}

/// pair_id → which side system A landed on.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EvalKey(pub BTreeMap<String, Assignment>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preference {
    Left,
    Right,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub pair_id: String,
    pub factual_left: bool,
    pub factual_right: bool,
    pub preferred: Preference,
    #[serde(default)]
    pub comment: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PreferenceCounts {
    pub a: usize,
    pub b: usize,
    pub tie: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_pairs: usize,
    pub factual_rate_a: f64,
    pub factual_rate_b: f64,
    pub preference_counts: PreferenceCounts,
}

/// Truncates an answer to its first `max_words` words.
pub fn cap_words(answer: &str, max_words: usize) -> String {
    let words: Vec<&str> = answer.split_whitespace().collect();
    if words.len() <= max_words {
        answer.to_string()
    } else {
        words[..max_words].join(" ")
    }
}

fn pair_id(i: usize) -> String {
    format!("pair-{:04}", i + 1)
}

/// Pairs answer `i` of system A with answer `i` of system B. A seeded fair
/// coin decides which side A is shown on.
pub fn make_blind_pairs(
    responses_a: &[Response],
    responses_b: &[Response],
    seed: u64,
) -> Result<(Vec<BlindPair>, EvalKey), HarnessError> {
    if responses_a.len() != responses_b.len() {
        return Err(HarnessError::LengthMismatch {
            a: responses_a.len(),
            b: responses_b.len(),
        });
    }
    if let Some(index) = responses_a
        .iter()
        .zip(responses_b)
        .position(|(a, b)| a.query.trim() != b.query.trim())
    {
        return Err(HarnessError::QueryMismatch { index });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(responses_a.len());
    let mut key = EvalKey::default();
    for (i, (a, b)) in responses_a.iter().zip(responses_b).enumerate() {
        let id = pair_id(i);
        let a_left = rng.random_bool(0.5);
        let (left, right) = if a_left { (a, b) } else { (b, a) };
        pairs.push(BlindPair {
            pair_id: id.clone(),
            query: a.query.clone(),
            response_left: left.answer.clone(),
            response_right: right.answer.clone(),
        });
        key.0.insert(id, if a_left { Assignment::ALeft } else { Assignment::ARight });
    }
    Ok((pairs, key))
}

/// De-anonymizes judgments through the key and tallies per-system rates.
pub fn score(key: &EvalKey, judgments: &[Judgment]) -> Result<EvalReport, HarnessError> {
    if judgments.is_empty() {
        return Err(HarnessError::EmptyJudgments);
    }
    let mut seen = HashSet::new();
    let (mut factual_a, mut factual_b) = (0usize, 0usize);
    let mut prefs = PreferenceCounts::default();
    for j in judgments {
        let side = *key
            .0
            .get(&j.pair_id)
            .ok_or_else(|| HarnessError::UnknownPairId(j.pair_id.clone()))?;
        if !seen.insert(j.pair_id.as_str()) {
            return Err(HarnessError::DuplicateJudgment(j.pair_id.clone()));
        }
        let (a_factual, b_factual) = match side {
            Assignment::ALeft => (j.factual_left, j.factual_right),
            Assignment::ARight => (j.factual_right, j.factual_left),
        };
        factual_a += usize::from(a_factual);
        factual_b += usize::from(b_factual);
        match (j.preferred, side) {
            (Preference::Tie, _) => prefs.tie += 1,
            (Preference::Left, Assignment::ALeft) | (Preference::Right, Assignment::ARight) => prefs.a += 1,
            _ => prefs.b += 1,
        }
    }
    let n = judgments.len();
    Ok(EvalReport {
        n_pairs: n,
        factual_rate_a: factual_a as f64 / n as f64,
        factual_rate_b: factual_b as f64 / n as f64,
        preference_counts: prefs,
    })
}

pub fn read_responses_jsonl(reader: impl BufRead) -> Result<Vec<Response>, HarnessError> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_pairs_jsonl(pairs: &[BlindPair], mut writer: impl Write) -> Result<(), HarnessError> {
    for p in pairs {
        serde_json::to_writer(&mut writer, p)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pairs_jsonl(reader: impl BufRead) -> Result<Vec<BlindPair>, HarnessError> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn read_judgments_csv(reader: impl Read) -> Result<Vec<Judgment>, HarnessError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    r.deserialize().map(|row| row.map_err(HarnessError::from)).collect()
}

pub fn write_judgments_csv(judgments: &[Judgment], writer: impl Write) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(writer);
    for j in judgments {
        w.serialize(j)?;
    }
    w.flush()?;
    Ok(())
}
