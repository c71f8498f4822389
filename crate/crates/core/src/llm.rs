//! Answer generation backends: an OpenAI-compatible chat-completions client
//! and a scripted offline mock.
//!
//! Sampling temperature is forwarded to the backend, never applied locally.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::embed::BackendKind;
use crate::hash::{fnv1a64, mix64};

pub const DEFAULT_LLM_MODEL: &str = "llama2-7b-chat";
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_MAX_TOKENS: usize = 768;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GenerationError {
    #[error("generation backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("malformed generation response: {0}")]
    MalformedResponse(String),
    #[error("prompt exceeds the model context: {0}")]
    ContextOverflow(String),
    #[error("message list is empty")]
    EmptyMessages,
    #[error("last message must have the user role")]
    LastMessageNotUser,
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("scripted generator has no templates")]
    NoTemplates,
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: None,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), GenerationError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GenerationError::InvalidParams(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GenerationError::InvalidParams("max_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
}

impl FinishReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            FinishReason::Stop => "stop",
            FinishReason::Length => "length",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub finish_reason: FinishReason,
    pub approx_completion_tokens: usize,
}

/// One approximate token per whitespace-delimited word.
pub fn approx_token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

pub trait Generator: Send + Sync {
    fn model_name(&self) -> &str;

    fn generate(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<GenerationResult, GenerationError>;
}

fn check_messages(messages: &[ChatMessage], params: &GenerationParams) -> Result<(), GenerationError> {
    let last = messages.last().ok_or(GenerationError::EmptyMessages)?;
    if last.role != Role::User {
        return Err(GenerationError::LastMessageNotUser);
    }
    params.validate()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub kind: BackendKind,
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub timeout_ms: u64,
    /// Answer templates for the scripted mock.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<Vec<String>>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            kind: BackendKind::Mock,
            endpoint_url: None,
            model_name: DEFAULT_LLM_MODEL.to_string(),
            timeout_ms: 30_000,
            templates: None,
        }
    }
}

pub fn build_generator(config: &LlmConfig) -> Result<Box<dyn Generator>, GenerationError> {
    Ok(match config.kind {
        BackendKind::Mock => {
            let templates = config.templates.clone().unwrap_or_else(default_templates);
            Box::new(ScriptedGenerator::new(&config.model_name, templates)?)
        }
        BackendKind::Remote => Box::new(RemoteGenerator::new(config)?),
    })
}

pub fn default_templates() -> Vec<String> {
    [
        "The retrieved sources indicate that process parameters such as laser power, scan speed and hatch spacing govern melt pool stability and therefore the defect population of the printed part.",
        "Based on the provided context, the main factors are the thermal history of each layer, the solidification conditions at the melt pool boundary and the feedstock powder quality.",
        "According to the documents, cracking and porosity arise from steep thermal gradients and rapid cooling, and both can be reduced through preheating, tuned scan strategies and post-process heat treatment.",
        "The context describes how microstructure, residual stress and surface roughness are linked to the energy density delivered during fusion, which is why parameter optimization is essential.",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}

/// Offline generator that picks one of a fixed set of answer templates by
/// hashing the conversation.
#[derive(Debug, Clone)]
pub struct ScriptedGenerator {
    model_name: String,
    templates: Vec<String>,
}

impl ScriptedGenerator {
    pub fn new(model_name: &str, templates: Vec<String>) -> Result<Self, GenerationError> {
        if templates.is_empty() {
            return Err(GenerationError::NoTemplates);
        }
        Ok(ScriptedGenerator {
            model_name: model_name.to_string(),
            templates,
        })
    }
}

impl Generator for ScriptedGenerator {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn generate(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<GenerationResult, GenerationError> {
        check_messages(messages, params)?;
        scripted_mock_generate(messages, params, &self.templates)
    }
}

/// `role \x1f content` per message, joined with `\x1e`.
fn canonical_conversation(messages: &[ChatMessage]) -> String {
    messages
        .iter()
        .map(|m| format!("{}\x1f{}", m.role.as_str(), m.content))
        .collect::<Vec<_>>()
        .join("\x1e")
}

/// Picks `templates[h % n]` at temperature 0, where `h` is the FNV-1a hash
/// of the canonical conversation. Above temperature 0 the pick is perturbed
/// by the seed and a `·v<r>` suffix word is appended, `r = (h ^ seed) % 1000`.
/// The result is cut to `max_tokens` words.
pub fn scripted_mock_generate(
    messages: &[ChatMessage],
    params: &GenerationParams,
    templates: &[String],
) -> Result<GenerationResult, GenerationError> {
    if templates.is_empty() {
        return Err(GenerationError::NoTemplates);
    }
    params.validate()?;
    let h = fnv1a64(canonical_conversation(messages).as_bytes());
    let n = templates.len() as u64;
    let full = if params.temperature == 0.0 {
        templates[(h % n) as usize].clone()
    } else {
        let seed = params.seed.unwrap_or(0);
        let pick = ((h ^ mix64(seed)) % n) as usize;
        let r = (h ^ seed) % 1000;
        format!("{} ·v{r}", templates[pick])
    };
    let words: Vec<&str> = full.split_whitespace().collect();
    let (text, finish_reason) = if words.len() > params.max_tokens {
        (words[..params.max_tokens].join(" "), FinishReason::Length)
    } else {
        (full, FinishReason::Stop)
    };
    Ok(GenerationResult {
        approx_completion_tokens: approx_token_count(&text),
        text,
        finish_reason,
    })
}

/// Client for an OpenAI-compatible `/v1/chat/completions` endpoint.
pub struct RemoteGenerator {
    url: String,
    model_name: String,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

impl RemoteGenerator {
    pub fn new(config: &LlmConfig) -> Result<Self, GenerationError> {
        let base = config
            .endpoint_url
            .as_deref()
            .ok_or_else(|| GenerationError::InvalidConfig("remote llm requires endpoint_url".into()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| GenerationError::InvalidConfig(e.to_string()))?;
        Ok(RemoteGenerator {
            url: format!("{}/v1/chat/completions", base.trim_end_matches('/')),
            model_name: config.model_name.clone(),
            client,
        })
    }
}

fn looks_like_context_overflow(body: &str) -> bool {
    let lower = body.to_lowercase();
    lower.contains("context_length_exceeded")
        || lower.contains("maximum context length")
        || lower.contains("context length")
}

impl Generator for RemoteGenerator {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn generate(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<GenerationResult, GenerationError> {
        check_messages(messages, params)?;
        let response = self
            .client
            .post(&self.url)
            .json(&CompletionRequest {
                model: &self.model_name,
                messages,
                temperature: params.temperature,
                max_tokens: params.max_tokens,
                seed: params.seed,
            })
            .send()
            .map_err(|e| GenerationError::BackendUnavailable(e.to_string()))?;
        let status = response.status();
        let body = response
            .text()
            .map_err(|e| GenerationError::BackendUnavailable(e.to_string()))?;
        if !status.is_success() {
            if status.is_client_error() && looks_like_context_overflow(&body) {
                return Err(GenerationError::ContextOverflow(body));
            }
            return Err(GenerationError::BackendUnavailable(format!("HTTP {status}: {body}")));
        }
        let parsed: CompletionResponse = serde_json::from_str(&body)
            .map_err(|e| GenerationError::MalformedResponse(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GenerationError::MalformedResponse("no choices".into()))?;
        let text = choice.message.content.unwrap_or_default();
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            _ => FinishReason::Stop,
        };
        Ok(GenerationResult {
            approx_completion_tokens: approx_token_count(&text),
            text,
            finish_reason,
        })
    }
}
