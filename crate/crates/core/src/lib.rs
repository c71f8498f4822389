//! Retrieval-augmented question answering over technical document corpora.
//!
//! The pipeline runs ingest → chunk → embed → index → retrieve → assemble
//! prompt → generate. Embedding and generation are delegated to
//! OpenAI-compatible HTTP services, with deterministic offline mocks for
//! testing. [`harness`] drives parameter sweeps and blind A/B evaluations.

pub mod config;
pub mod embed;
pub mod engine;
pub mod harness;
mod hash;
pub mod index;
pub mod ingest;
pub mod llm;

pub use config::AppConfig;
pub use embed::{l2_normalize, mock_embed, Embedder, EmbeddingVector, MockEmbedder};
pub use engine::{
    assemble_prompt, retrieve, AnswerResult, AssembledPrompt, ChatSession, ChatTurn, Engine,
    EngineError, PresetId, RetrievalParams, SystemPromptPreset,
};
pub use index::{cosine_similarity, IndexEntry, RetrievalHit, VectorIndex};
pub use ingest::{chunk_document, load_document, normalize, Chunk, ChunkingPolicy, DocFormat};
pub use llm::{approx_token_count, ChatMessage, GenerationParams, Generator, ScriptedGenerator};
