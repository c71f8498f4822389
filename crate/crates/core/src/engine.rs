//! Query and chat orchestration: retrieve, assemble the prompt under a token
//! budget, generate, and keep per-session conversation memory.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, PoisonError, RwLock, RwLockReadGuard};

use serde::{Deserialize, Serialize};

use crate::embed::{EmbedError, Embedder};
use crate::index::{IndexEntry, IndexError, RetrievalHit, VectorIndex};
use crate::ingest::{chunk_document, normalize, ChunkingPolicy, IngestError, RawDocument};
use crate::llm::{
    approx_token_count, ChatMessage, FinishReason, GenerationError, GenerationParams, Generator,
};

pub const DEFAULT_TOP_K: usize = 3;
pub const DEFAULT_MEMORY_WINDOW: usize = 4;
pub const DEFAULT_BUDGET_TOKENS: usize = 3072;
/// Slack reserved on top of system prompt and query when checking budgets.
pub const FRAMING_ALLOWANCE: usize = 8;

const STRICT_ASSISTANT: &str = "You are an AI assistant that answers questions in a friendly manner, based on the given source documents.
- Generate human readable output, avoid creating output with gibberish text.
- Generate only the requested output, don't include any other language before or after the requested output.
- Never say thank you, that you are happy to help, that you are an AI agent, etc. Just answer directly.
- Generate professional language.
- Never generate offensive or foul language.
- Do not write \"The authors\" in any answer.
- Do not use \"[]\" in any answer.
- Write every answer like a list of known facts without referring to anybody or any document in the third person.
- Never use references in square brackets or otherwise in the output, but provide material examples if possible.";

const BRIEF_EXPERT: &str = "You are an expert on additive manufacturing that answers questions in a friendly manner, based on the given source documents. Here are some rules you always follow:
- Generate human readable output, avoid creating output with gibberish text.
- Keep your answers very brief
- Do not refer to any documents, figures in your answer. just give me the answer that you extract from them.
- Never use references in square brackets or otherwise in the output, but provide material examples if possible";

const POPULARISER: &str =
    "You are a science and technology populariser who seeks to explain concepts in a simple manner.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetId {
    StrictAssistant,
    BriefExpert,
    Populariser,
    Custom,
}

impl PresetId {
    pub const NAMED: [PresetId; 3] = [
        PresetId::StrictAssistant,
        PresetId::BriefExpert,
        PresetId::Populariser,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PresetId::StrictAssistant => "strict_assistant",
            PresetId::BriefExpert => "brief_expert",
            PresetId::Populariser => "populariser",
            PresetId::Custom => "custom",
        }
    }
}

impl fmt::Display for PresetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PresetId {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict_assistant" => Ok(PresetId::StrictAssistant),
            "brief_expert" => Ok(PresetId::BriefExpert),
            "populariser" => Ok(PresetId::Populariser),
            "custom" => Ok(PresetId::Custom),
            other => Err(EngineError::UnknownPreset(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemPromptPreset {
    pub id: PresetId,
    pub text: String,
}

impl SystemPromptPreset {
    /// The built-in text for a named preset; `Custom` yields an empty prompt.
    pub fn named(id: PresetId) -> Self {
        let text = match id {
            PresetId::StrictAssistant => STRICT_ASSISTANT,
            PresetId::BriefExpert => BRIEF_EXPERT,
            PresetId::Populariser => POPULARISER,
            PresetId::Custom => "",
        };
        SystemPromptPreset { id, text: text.to_string() }
    }

    pub fn custom(text: impl Into<String>) -> Self {
        SystemPromptPreset { id: PresetId::Custom, text: text.into() }
    }

    /// Resolves a preset id, with `custom_text` required for `custom`.
    pub fn resolve(id: &str, custom_text: Option<&str>) -> Result<Self, EngineError> {
        match id.parse::<PresetId>()? {
            PresetId::Custom => custom_text
                .filter(|t| !t.trim().is_empty())
                .map(SystemPromptPreset::custom)
                .ok_or_else(|| EngineError::UnknownPreset("custom (missing text)".into())),
            named => Ok(SystemPromptPreset::named(named)),
        }
    }
}

impl Default for SystemPromptPreset {
    fn default() -> Self {
        SystemPromptPreset::named(PresetId::StrictAssistant)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalParams {
    pub top_k: usize,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        RetrievalParams { top_k: DEFAULT_TOP_K }
    }
}

/// The knobs a turn ran with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnParams {
    pub top_k: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl TurnParams {
    fn new(rp: &RetrievalParams, gp: &GenerationParams) -> Self {
        TurnParams {
            top_k: rp.top_k,
            temperature: gp.temperature,
            max_tokens: gp.max_tokens,
            seed: gp.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub user_text: String,
    pub answer_text: String,
    pub hits: Vec<RetrievalHit>,
    pub params: TurnParams,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatSession {
    pub session_id: String,
    pub preset: SystemPromptPreset,
    pub memory_window: usize,
    pub turns: Vec<ChatTurn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssembledPrompt {
    pub messages: Vec<ChatMessage>,
    pub used_chunk_ids: Vec<String>,
    pub dropped_chunk_ids: Vec<String>,
    pub history_turns_used: usize,
    pub approx_prompt_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerResult {
    pub answer: String,
    /// Hits that made it into the prompt, best first.
    pub hits: Vec<RetrievalHit>,
    pub no_context: bool,
    pub assembled: AssembledPrompt,
    pub finish_reason: FinishReason,
    pub params: TurnParams,
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("query text is empty")]
    EmptyQuery,
    #[error("unknown system prompt preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("prompt budget of {budget} tokens is below the minimum of {needed}")]
    BudgetTooSmall { budget: usize, needed: usize },
    #[error("session {0} not found")]
    SessionNotFound(String),
    #[error("ingest: {0}")]
    Ingest(#[from] IngestError),
    #[error("embedding: {0}")]
    Embedding(#[from] EmbedError),
    #[error("index: {0}")]
    Index(#[from] IndexError),
    #[error("generation: {0}")]
    Generation(#[from] GenerationError),
}

/// Embeds the query and scans the index. An empty index yields no hits.
pub fn retrieve(
    query_text: &str,
    rp: &RetrievalParams,
    embedder: &dyn Embedder,
    index: &VectorIndex,
) -> Result<Vec<RetrievalHit>, EngineError> {
    if query_text.trim().is_empty() {
        return Err(EngineError::EmptyQuery);
    }
    if rp.top_k == 0 {
        return Err(EngineError::InvalidParams("top_k must be >= 1".into()));
    }
    if index.is_empty() {
        return Ok(Vec::new());
    }
    let query = embedder.embed_one(query_text)?;
    Ok(index.top_k(&query, rp.top_k)?)
}

fn context_message(hits: &[&RetrievalHit]) -> String {
    let blocks: Vec<String> = hits
        .iter()
        .map(|h| format!("[{}]\n{}", h.chunk_id, h.text))
        .collect();
    format!("Context:\n{}", blocks.join("\n\n"))
}

fn build_messages(
    preset: &SystemPromptPreset,
    hits: &[&RetrievalHit],
    history: &[ChatTurn],
    query_text: &str,
) -> Vec<ChatMessage> {
    let mut messages = Vec::with_capacity(3 + 2 * history.len());
    messages.push(ChatMessage::system(preset.text.clone()));
    if !hits.is_empty() {
        messages.push(ChatMessage::user(context_message(hits)));
    }
    for turn in history {
        messages.push(ChatMessage::user(turn.user_text.clone()));
        messages.push(ChatMessage::assistant(turn.answer_text.clone()));
    }
    messages.push(ChatMessage::user(query_text));
    messages
}

fn prompt_tokens(messages: &[ChatMessage]) -> usize {
    messages.iter().map(|m| approx_token_count(&m.content)).sum()
}

/// Builds `[system, context?, history..., query]` and shrinks it until it
/// fits `budget_tokens`: lowest-scoring hits go first, then the oldest
/// history turns.
pub fn assemble_prompt(
    preset: &SystemPromptPreset,
    hits: &[RetrievalHit],
    history: &[ChatTurn],
    memory_window: usize,
    query_text: &str,
    budget_tokens: usize,
) -> Result<AssembledPrompt, EngineError> {
    let needed =
        approx_token_count(&preset.text) + approx_token_count(query_text) + FRAMING_ALLOWANCE;
    if budget_tokens < needed {
        return Err(EngineError::BudgetTooSmall { budget: budget_tokens, needed });
    }
    let mut ranked: Vec<&RetrievalHit> = hits.iter().collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    let window = &history[history.len().saturating_sub(memory_window)..];

    let mut used = ranked.len();
    let mut oldest = 0;
    loop {
        let messages = build_messages(preset, &ranked[..used], &window[oldest..], query_text);
        let tokens = prompt_tokens(&messages);
        if tokens <= budget_tokens {
            return Ok(AssembledPrompt {
                messages,
                used_chunk_ids: ranked[..used].iter().map(|h| h.chunk_id.clone()).collect(),
                dropped_chunk_ids: ranked[used..].iter().map(|h| h.chunk_id.clone()).collect(),
                history_turns_used: window.len() - oldest,
                approx_prompt_tokens: tokens,
            });
        }
        if used > 0 {
            used -= 1;
        } else if oldest < window.len() {
            oldest += 1;
        } else {
            unreachable!("system prompt and query fit by the budget precondition");
        }
    }
}

fn now_utc() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn lock_err<T>(_: PoisonError<T>) -> EngineError {
    EngineError::InvalidParams("engine state poisoned by a panicked request".into())
}

/// Settings applied when a request leaves a knob unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDefaults {
    pub retrieval: RetrievalParams,
    pub generation: GenerationParams,
    pub preset: SystemPromptPreset,
    pub memory_window: usize,
    pub budget_tokens: usize,
}

impl Default for QueryDefaults {
    fn default() -> Self {
        QueryDefaults {
            retrieval: RetrievalParams::default(),
            generation: GenerationParams::default(),
            preset: SystemPromptPreset::default(),
            memory_window: DEFAULT_MEMORY_WINDOW,
            budget_tokens: DEFAULT_BUDGET_TOKENS,
        }
    }
}

/// Thread-safe engine. The index follows a many-readers/one-writer
/// discipline; each chat session is processed one turn at a time while
/// different sessions run in parallel.
pub struct Engine {
    embedder: Box<dyn Embedder>,
    generator: Box<dyn Generator>,
    index: RwLock<VectorIndex>,
    sessions: Mutex<HashMap<String, Arc<Mutex<ChatSession>>>>,
}

impl Engine {
    pub fn new(
        embedder: Box<dyn Embedder>,
        generator: Box<dyn Generator>,
        index: VectorIndex,
    ) -> Result<Self, EngineError> {
        if !index.is_empty() {
            index.check_compatible(embedder.model_name(), embedder.dim())?;
        }
        Ok(Engine {
            embedder,
            generator,
            index: RwLock::new(index),
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn generator(&self) -> &dyn Generator {
        self.generator.as_ref()
    }

    pub fn index(&self) -> RwLockReadGuard<'_, VectorIndex> {
        self.index.read().unwrap_or_else(PoisonError::into_inner)
    }

    /// Normalizes, chunks, embeds and stores one document. Returns the
    /// number of chunks written.
    pub fn ingest(&self, raw: &RawDocument, policy: ChunkingPolicy) -> Result<usize, EngineError> {
        let doc = normalize(raw);
        let chunks = chunk_document(&doc, policy)?;
        let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
        let vectors = self.embedder.embed_batch(&texts)?;
        let entries = chunks
            .into_iter()
            .zip(vectors)
            .map(|(c, vector)| IndexEntry {
                meta: [
                    ("source_name".to_string(), c.source_name),
                    ("seq".to_string(), c.seq.to_string()),
                ]
                .into_iter()
                .collect(),
                chunk_id: c.chunk_id,
                doc_id: c.doc_id,
                text: c.text,
                vector,
            })
            .collect();
        let mut index = self.index.write().map_err(lock_err)?;
        Ok(index.upsert(self.embedder.model_name(), entries)?)
    }

    /// Runs `f` against the index with exclusive access.
    pub fn with_index_mut<T>(&self, f: impl FnOnce(&mut VectorIndex) -> T) -> Result<T, EngineError> {
        let mut index = self.index.write().map_err(lock_err)?;
        Ok(f(&mut index))
    }

    pub fn retrieve(&self, query_text: &str, rp: &RetrievalParams) -> Result<Vec<RetrievalHit>, EngineError> {
        retrieve(query_text, rp, self.embedder.as_ref(), &self.index())
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        preset: &SystemPromptPreset,
        history: &[ChatTurn],
        memory_window: usize,
        query_text: &str,
        rp: &RetrievalParams,
        gp: &GenerationParams,
        budget_tokens: usize,
    ) -> Result<AnswerResult, EngineError> {
        gp.validate()?;
        let hits = self.retrieve(query_text, rp)?;
        let assembled =
            assemble_prompt(preset, &hits, history, memory_window, query_text, budget_tokens)?;
        let generated = self.generator.generate(&assembled.messages, gp)?;
        let used: Vec<RetrievalHit> = hits.into_iter().take(assembled.used_chunk_ids.len()).collect();
        Ok(AnswerResult {
            answer: generated.text,
            no_context: used.is_empty(),
            hits: used,
            assembled,
            finish_reason: generated.finish_reason,
            params: TurnParams::new(rp, gp),
        })
    }

    /// Stateless retrieve → assemble → generate.
    pub fn answer_query(
        &self,
        query_text: &str,
        rp: &RetrievalParams,
        gp: &GenerationParams,
        preset: &SystemPromptPreset,
        budget_tokens: usize,
    ) -> Result<AnswerResult, EngineError> {
        self.run(preset, &[], 0, query_text, rp, gp, budget_tokens)
    }

    pub fn create_session(&self, preset: SystemPromptPreset, memory_window: usize) -> Result<String, EngineError> {
        let session_id = uuid::Uuid::new_v4().to_string();
        self.insert_session(ChatSession {
            session_id: session_id.clone(),
            preset,
            memory_window,
            turns: Vec::new(),
        })?;
        Ok(session_id)
    }

    /// Registers an existing session, e.g. one restored from a transcript.
    pub fn insert_session(&self, session: ChatSession) -> Result<(), EngineError> {
        let mut sessions = self.sessions.lock().map_err(lock_err)?;
        sessions.insert(session.session_id.clone(), Arc::new(Mutex::new(session)));
        Ok(())
    }

    fn session_handle(&self, session_id: &str) -> Result<Arc<Mutex<ChatSession>>, EngineError> {
        let sessions = self.sessions.lock().map_err(lock_err)?;
        sessions
            .get(session_id)
            .cloned()
            .ok_or_else(|| EngineError::SessionNotFound(session_id.to_string()))
    }

    pub fn session(&self, session_id: &str) -> Result<ChatSession, EngineError> {
        let handle = self.session_handle(session_id)?;
        let session = handle.lock().map_err(lock_err)?;
        Ok(session.clone())
    }

    /// One chat turn with the session's recent turns as memory. The turn is
    /// appended only when generation succeeds. Returns the result and the
    /// new turn's index.
    pub fn chat_turn(
        &self,
        session_id: &str,
        user_text: &str,
        rp: &RetrievalParams,
        gp: &GenerationParams,
        budget_tokens: usize,
    ) -> Result<(AnswerResult, usize), EngineError> {
        let handle = self.session_handle(session_id)?;
        let mut session = handle.lock().map_err(lock_err)?;
        let result = self.run(
            &session.preset,
            &session.turns,
            session.memory_window,
            user_text,
            rp,
            gp,
            budget_tokens,
        )?;
        session.turns.push(ChatTurn {
            user_text: user_text.to_string(),
            answer_text: result.answer.clone(),
            hits: result.hits.clone(),
            params: result.params,
            created_at: now_utc(),
        });
        Ok((result, session.turns.len() - 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::MockEmbedder;
    use crate::ingest::{load_document, DocFormat};
    use crate::llm::{default_templates, GenerationResult, ScriptedGenerator};

    fn words(n: usize, tag: &str) -> String {
        (0..n).map(|i| format!("{tag}{i}")).collect::<Vec<_>>().join(" ")
    }

    fn hit(id: &str, score: f64, n_words: usize) -> RetrievalHit {
        RetrievalHit {
            chunk_id: id.into(),
            doc_id: id.into(),
            score,
            text: words(n_words, "w"),
        }
    }

    fn turn(i: usize) -> ChatTurn {
        ChatTurn {
            user_text: format!("question {i}"),
            answer_text: format!("answer {i}"),
            hits: vec![],
            params: TurnParams::new(&RetrievalParams::default(), &GenerationParams::default()),
            created_at: "t".into(),
        }
    }

    fn mock_engine() -> Engine {
        Engine::new(
            Box::new(MockEmbedder::new(64, 0).unwrap()),
            Box::new(ScriptedGenerator::new("mock", default_templates()).unwrap()),
            VectorIndex::new(),
        )
        .unwrap()
    }

    fn corpus_engine() -> Engine {
        let engine = mock_engine();
        let docs = [
            ("a", "laser powder bed fusion melts metal powder layer by layer"),
            ("b", "aluminum alloys crack during rapid solidification"),
            ("c", "electron beam melting uses a vacuum chamber"),
            ("d", "residual stress builds up from thermal gradients"),
            ("e", "heat treatment relieves stress and changes texture"),
        ];
        for (id, text) in docs {
            let raw = load_document(&format!("{id}.txt"), text.as_bytes(), None, id).unwrap();
            engine.ingest(&raw, ChunkingPolicy::default()).unwrap();
        }
        engine
    }

    #[test]
    fn presets_verbatim() {
        let strict = SystemPromptPreset::named(PresetId::StrictAssistant);
        assert!(strict.text.starts_with(
            "You are an AI assistant that answers questions in a friendly manner, based on the given source documents."
        ));
        assert!(SystemPromptPreset::named(PresetId::BriefExpert)
            .text
            .starts_with("You are an expert on additive manufacturing that answers questions"));
        assert_eq!(
            SystemPromptPreset::named(PresetId::Populariser).text,
            "You are a science and technology populariser who seeks to explain concepts in a simple manner."
        );
        assert!(matches!("nope".parse::<PresetId>(), Err(EngineError::UnknownPreset(_))));
        assert!(SystemPromptPreset::resolve("custom", None).is_err());
        assert_eq!(SystemPromptPreset::resolve("custom", Some("be terse")).unwrap().text, "be terse");
    }

    #[test]
    fn budget_drops_lowest_hit() {
        let preset = SystemPromptPreset::custom(words(50, "p"));
        let hits = [hit("h1", 0.9, 100), hit("h2", 0.8, 100), hit("h3", 0.7, 100)];
        let query = words(10, "q");
        let a = assemble_prompt(&preset, &hits, &[], 4, &query, 290).unwrap();
        assert_eq!(a.used_chunk_ids, ["h1", "h2"]);
        assert_eq!(a.dropped_chunk_ids, ["h3"]);
        assert!(a.approx_prompt_tokens <= 290);
        assert_eq!(a.approx_prompt_tokens, 50 + 10 + 1 + 2 * 101);
    }

    #[test]
    fn zero_hits_omit_context() {
        let preset = SystemPromptPreset::default();
        let a = assemble_prompt(&preset, &[], &[], 4, "what is EDM", 3072).unwrap();
        assert_eq!(a.messages.len(), 2);
        assert_eq!(a.messages[0], ChatMessage::system(preset.text.clone()));
        assert_eq!(a.messages[1], ChatMessage::user("what is EDM"));
    }

    #[test]
    fn message_layout() {
        let preset = SystemPromptPreset::named(PresetId::Populariser);
        let hits = [hit("d#0", 0.9, 3), hit("d#1", 0.5, 2)];
        let a = assemble_prompt(&preset, &hits, &[turn(1)], 4, "next?", 3072).unwrap();
        let roles: Vec<_> = a.messages.iter().map(|m| m.role.as_str()).collect();
        assert_eq!(roles, ["system", "user", "user", "assistant", "user"]);
        assert_eq!(a.messages[1].content, "Context:\n[d#0]\nw0 w1 w2\n\n[d#1]\nw0 w1");
        assert_eq!(a.messages[4].content, "next?");
    }

    #[test]
    fn memory_window_keeps_latest_turns() {
        let preset = SystemPromptPreset::default();
        let history = [turn(1), turn(2), turn(3)];
        let a = assemble_prompt(&preset, &[], &history, 2, "q", 3072).unwrap();
        let contents: Vec<_> = a.messages.iter().map(|m| m.content.as_str()).collect();
        assert_eq!(contents[1..], ["question 2", "answer 2", "question 3", "answer 3", "q"]);
        let a = assemble_prompt(&preset, &[], &history, 0, "q", 3072).unwrap();
        assert_eq!(a.messages.len(), 2);
    }

    #[test]
    fn history_dropped_after_hits() {
        let preset = SystemPromptPreset::custom("sys");
        let hits = [hit("h1", 0.9, 20)];
        let long_turn = |i| ChatTurn { answer_text: words(10, "a"), ..turn(i) };
        let history = [long_turn(1), long_turn(2)];
        // sys 1 + query 1 + two turns of 12 = 26; the context message adds 22
        let a = assemble_prompt(&preset, &hits, &history, 4, "q", 26).unwrap();
        assert_eq!(a.dropped_chunk_ids, ["h1"]);
        assert_eq!(a.history_turns_used, 2);
        let a = assemble_prompt(&preset, &hits, &history, 4, "q", 20).unwrap();
        assert_eq!(a.history_turns_used, 1);
        assert_eq!(a.messages[1].content, "question 2");
        assert_eq!(a.approx_prompt_tokens, 14);
    }

    #[test]
    fn budget_floor() {
        let preset = SystemPromptPreset::custom(words(50, "p"));
        let err = assemble_prompt(&preset, &[], &[], 0, "a b", 59).unwrap_err();
        assert!(matches!(err, EngineError::BudgetTooSmall { needed: 60, .. }));
        assert!(assemble_prompt(&preset, &[], &[], 0, "a b", 60).is_ok());
    }

    #[test]
    fn retrieve_on_empty_index() {
        let engine = mock_engine();
        assert!(engine.retrieve("anything", &RetrievalParams::default()).unwrap().is_empty());
        assert!(matches!(
            engine.retrieve("  ", &RetrievalParams::default()),
            Err(EngineError::EmptyQuery)
        ));
    }

    #[test]
    fn retrieve_forwards_top_k() {
        let engine = corpus_engine();
        let hits = engine.retrieve("alloy cracking", &RetrievalParams { top_k: 3 }).unwrap();
        assert_eq!(hits.len(), 3);
        assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn exact_chunk_text_ranks_first() {
        let engine = corpus_engine();
        let text = "residual stress builds up from thermal gradients";
        let hits = engine.retrieve(text, &RetrievalParams { top_k: 5 }).unwrap();
        assert_eq!(hits[0].chunk_id, "d#0");
        assert!((hits[0].score - 1.0).abs() < 1e-9);
        assert!(hits[1].score < hits[0].score);
    }

    #[test]
    fn answer_defaults_and_degradation() {
        let engine = mock_engine();
        let r = engine
            .answer_query(
                "what is EDM",
                &RetrievalParams::default(),
                &GenerationParams::default(),
                &SystemPromptPreset::default(),
                DEFAULT_BUDGET_TOKENS,
            )
            .unwrap();
        assert!(r.no_context);
        assert!(!r.answer.is_empty());
        assert_eq!((r.params.top_k, r.params.temperature, r.params.max_tokens), (3, 0.1, 768));
    }

    #[test]
    fn answer_is_deterministic_at_zero_temperature() {
        let engine = corpus_engine();
        let gp = GenerationParams { temperature: 0.0, ..Default::default() };
        let run = || {
            engine
                .answer_query("why do alloys crack", &RetrievalParams::default(), &gp, &SystemPromptPreset::default(), 3072)
                .unwrap()
        };
        let first = run();
        assert!(!first.no_context);
        assert_eq!(first.hits.len(), 3);
        for _ in 0..5 {
            assert_eq!(run(), first);
        }
    }

    #[test]
    fn chat_memory_and_window() {
        let engine = corpus_engine();
        let gp = GenerationParams { temperature: 0.0, ..Default::default() };
        let rp = RetrievalParams::default();
        let sid = engine.create_session(SystemPromptPreset::default(), 4).unwrap();
        let (first, i0) = engine.chat_turn(&sid, "what is melting", &rp, &gp, 3072).unwrap();
        assert_eq!(i0, 0);
        assert_eq!(first.assembled.history_turns_used, 0);
        let (second, i1) = engine.chat_turn(&sid, "and cracking?", &rp, &gp, 3072).unwrap();
        assert_eq!(i1, 1);
        let contents: Vec<_> = second.assembled.messages.iter().map(|m| m.content.as_str()).collect();
        assert!(contents.contains(&"what is melting"));
        assert!(contents.contains(&first.answer.as_str()));
        assert_eq!(engine.session(&sid).unwrap().turns.len(), 2);

        let stateless = engine.create_session(SystemPromptPreset::default(), 0).unwrap();
        engine.chat_turn(&stateless, "what is melting", &rp, &gp, 3072).unwrap();
        let (r, _) = engine.chat_turn(&stateless, "and cracking?", &rp, &gp, 3072).unwrap();
        let direct = engine
            .answer_query("and cracking?", &rp, &gp, &SystemPromptPreset::default(), 3072)
            .unwrap();
        assert_eq!(r, direct);
    }

    struct Failing;

    impl Generator for Failing {
        fn model_name(&self) -> &str {
            "failing"
        }

        fn generate(&self, _: &[ChatMessage], _: &GenerationParams) -> Result<GenerationResult, GenerationError> {
            Err(GenerationError::BackendUnavailable("down".into()))
        }
    }

    #[test]
    fn failed_turn_not_recorded() {
        let engine = Engine::new(
            Box::new(MockEmbedder::new(64, 0).unwrap()),
            Box::new(Failing),
            VectorIndex::new(),
        )
        .unwrap();
        let sid = engine.create_session(SystemPromptPreset::default(), 4).unwrap();
        let err = engine
            .chat_turn(&sid, "hello", &RetrievalParams::default(), &GenerationParams::default(), 3072)
            .unwrap_err();
        assert!(matches!(err, EngineError::Generation(_)));
        assert!(err.to_string().starts_with("generation:"));
        assert!(engine.session(&sid).unwrap().turns.is_empty());
    }

    #[test]
    fn unknown_session() {
        let engine = mock_engine();
        assert!(matches!(
            engine.chat_turn("nope", "hi", &RetrievalParams::default(), &GenerationParams::default(), 3072),
            Err(EngineError::SessionNotFound(_))
        ));
    }

    #[test]
    fn ingest_records_metadata() {
        let engine = mock_engine();
        let text = words(1200, "x");
        let raw = load_document("notes.tex", text.as_bytes(), Some(DocFormat::Plain), "p").unwrap();
        assert_eq!(engine.ingest(&raw, ChunkingPolicy::default()).unwrap(), 3);
        let index = engine.index();
        let e = index.get("p#2").unwrap();
        assert_eq!(e.meta["seq"], "2");
        assert_eq!(e.meta["source_name"], "notes.tex");
    }

    #[test]
    fn rejects_index_from_other_embedder() {
        let engine = corpus_engine();
        let index = engine.index().clone();
        let other = Engine::new(
            Box::new(MockEmbedder::new(64, 9).unwrap()),
            Box::new(ScriptedGenerator::new("mock", default_templates()).unwrap()),
            index,
        );
        assert!(matches!(other, Err(EngineError::Index(IndexError::ModelMismatch { .. }))));
    }
}
