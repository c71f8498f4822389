//! Application configuration: a single JSON file where every field is
//! optional. Command-line flags override the file, the file overrides the
//! built-in defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embed::{build_embedder, EmbedError, EmbedderConfig};
use crate::engine::{
    Engine, EngineError, PresetId, QueryDefaults, RetrievalParams, SystemPromptPreset,
    DEFAULT_BUDGET_TOKENS, DEFAULT_MEMORY_WINDOW, DEFAULT_TOP_K,
};
use crate::harness::SweepSpec;
use crate::index::VectorIndex;
use crate::ingest::ChunkingPolicy;
use crate::llm::{build_generator, GenerationParams, LlmConfig, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE};

pub const DEFAULT_CONFIG_PATH: &str = "corpusqa.json";
pub const DEFAULT_INDEX_PATH: &str = "corpusqa.index.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Defaults {
    pub top_k: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    pub system_prompt_id: PresetId,
    /// Text for the `custom` preset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system_prompt: Option<String>,
    pub memory_window: usize,
    pub budget_tokens: usize,
}

impl Default for Defaults {
    fn default() -> Self {
        Defaults {
            top_k: DEFAULT_TOP_K,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            system_prompt_id: PresetId::StrictAssistant,
            system_prompt: None,
            memory_window: DEFAULT_MEMORY_WINDOW,
            budget_tokens: DEFAULT_BUDGET_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub bind_address: String,
    pub port: u16,
    pub parallelism: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind_address: "127.0.0.1".into(),
            port: 8787,
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub embedder: EmbedderConfig,
    pub llm: LlmConfig,
    pub index_path: PathBuf,
    pub chunking: ChunkingPolicy,
    pub defaults: Defaults,
    pub server: ServerConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            embedder: EmbedderConfig::default(),
            llm: LlmConfig::default(),
            index_path: PathBuf::from(DEFAULT_INDEX_PATH),
            chunking: ChunkingPolicy::default(),
            defaults: Defaults::default(),
            server: ServerConfig::default(),
        }
    }
}

/// Secrets-free view of the settings a client can rely on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveConfig {
    pub embedding_model: String,
    pub embedding_dim: usize,
    pub llm_model: String,
    pub chunk_words: usize,
    pub overlap_words: usize,
    pub defaults: Defaults,
    pub presets: Vec<SystemPromptPreset>,
    pub sweep_temperatures: Vec<f64>,
    pub sweep_top_ks: Vec<usize>,
}

impl AppConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config = Self::from_json(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Loads `path` when it exists, otherwise falls back to the defaults.
    pub fn load_or_default(path: &Path) -> Result<Self, ConfigError> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::default())
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.embedder
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.generation_params()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.preset()?;
        if self.defaults.top_k == 0 {
            return Err(ConfigError::Invalid("defaults.top_k must be >= 1".into()));
        }
        if self.defaults.budget_tokens == 0 || self.server.parallelism == 0 {
            return Err(ConfigError::Invalid(
                "budget_tokens and parallelism must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn preset(&self) -> Result<SystemPromptPreset, ConfigError> {
        SystemPromptPreset::resolve(
            self.defaults.system_prompt_id.as_str(),
            self.defaults.system_prompt.as_deref(),
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn retrieval_params(&self) -> RetrievalParams {
        RetrievalParams { top_k: self.defaults.top_k }
    }

    pub fn generation_params(&self) -> GenerationParams {
        GenerationParams {
            temperature: self.defaults.temperature,
            max_tokens: self.defaults.max_tokens,
            seed: None,
        }
    }

    pub fn query_defaults(&self) -> Result<QueryDefaults, ConfigError> {
        Ok(QueryDefaults {
            retrieval: self.retrieval_params(),
            generation: self.generation_params(),
            preset: self.preset()?,
            memory_window: self.defaults.memory_window,
            budget_tokens: self.defaults.budget_tokens,
        })
    }

    pub fn effective(&self) -> EffectiveConfig {
        let sweep = SweepSpec::new(Vec::new());
        EffectiveConfig {
            embedding_model: self.embedder.model_name.clone(),
            embedding_dim: self.embedder.dim,
            llm_model: self.llm.model_name.clone(),
            chunk_words: self.chunking.chunk_words(),
            overlap_words: self.chunking.overlap_words(),
            defaults: self.defaults.clone(),
            presets: PresetId::NAMED.iter().map(|&id| SystemPromptPreset::named(id)).collect(),
            sweep_temperatures: sweep.temperatures,
            sweep_top_ks: sweep.top_ks,
        }
    }

    /// Builds the configured backends around `index`.
    pub fn build_engine(&self, index: VectorIndex) -> Result<Engine, EngineError> {
        let embedder = build_embedder(&self.embedder)?;
        let generator = build_generator(&self.llm)?;
        Engine::new(embedder, generator, index)
    }

    /// Loads the index at `path`, or starts an empty one if the file is absent.
    pub fn open_index(path: &Path) -> Result<VectorIndex, EngineError> {
        if path.exists() {
            Ok(VectorIndex::load(path)?)
        } else {
            Ok(VectorIndex::new())
        }
    }
}

impl From<EmbedError> for ConfigError {
    fn from(e: EmbedError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}
