//! Exact cosine-similarity vector index with JSON-lines persistence.
//!
//! The file layout is one manifest line followed by one entry per line:
//!
//! ```text
//! {"format_version":1,"model_name":"...","dim":768,"entry_count":2,"created_at":"..."}
//! {"chunk_id":"a#0","doc_id":"a","text":"...","meta":{...},"vector":[...]}
//! {"chunk_id":"a#1","doc_id":"a","text":"...","meta":{...},"vector":[...]}
//! ```
//!
//! Vectors are written with shortest round-trip decimals, so a reload is
//! value-exact and re-saving a loaded index reproduces the file byte for byte.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::{norm, EmbeddingVector};

pub const FORMAT_VERSION: u32 = 1;
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector for {chunk_id} is not unit length (norm {norm})")]
    UnnormalizedVector { chunk_id: String, norm: f64 },
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("index was built with model {index_model}, but the embedder is {embedder_model}")]
    ModelMismatch {
        index_model: String,
        embedder_model: String,
    },
    #[error("corrupt index: {0}")]
    CorruptIndex(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub chunk_id: String,
    pub doc_id: String,
    pub text: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format_version: u32,
    pub model_name: String,
    pub dim: usize,
    pub entry_count: usize,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub chunk_id: String,
    pub doc_id: String,
    pub score: f64,
    pub text: String,
}

/// Cosine of the angle between two vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, IndexError> {
    if a.dim() != b.dim() {
        return Err(IndexError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(IndexError::ZeroVector);
    }
    Ok((dot(a.values(), b.values()) / (na * nb)).clamp(-1.0, 1.0))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Descending score, then ascending chunk id.
fn rank(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// In-memory store. Wrap in a `RwLock` to share it across threads: queries
/// take `&self`, mutation takes `&mut self`.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    model_name: Option<String>,
    dim: Option<usize>,
    created_at: String,
    entries: Vec<IndexEntry>,
    norms: Vec<f64>,
    positions: HashMap<String, usize>,
}

impl Default for VectorIndex {
    fn default() -> Self {
        Self::new()
    }
}

impl VectorIndex {
    /// An empty index; model name and dimension are adopted from the first
    /// upsert.
    pub fn new() -> Self {
        VectorIndex {
            model_name: None,
            dim: None,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            entries: Vec::new(),
            norms: Vec::new(),
            positions: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn model_name(&self) -> Option<&str> {
        self.model_name.as_deref()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn get(&self, chunk_id: &str) -> Option<&IndexEntry> {
        self.positions.get(chunk_id).map(|&i| &self.entries[i])
    }

    pub fn manifest(&self) -> IndexManifest {
        IndexManifest {
            format_version: FORMAT_VERSION,
            model_name: self.model_name.clone().unwrap_or_default(),
            dim: self.dim.unwrap_or(0),
            entry_count: self.entries.len(),
            created_at: self.created_at.clone(),
        }
    }

    /// Fails if this index was built by a different embedder.
    pub fn check_compatible(&self, model_name: &str, dim: usize) -> Result<(), IndexError> {
        if let Some(expected) = self.dim {
            if expected != dim {
                return Err(IndexError::DimensionMismatch { expected, got: dim });
            }
        }
        match &self.model_name {
            Some(m) if m != model_name => Err(IndexError::ModelMismatch {
                index_model: m.clone(),
                embedder_model: model_name.to_string(),
            }),
            _ => Ok(()),
        }
    }

    /// Inserts or replaces entries by chunk id. Validation happens up
    /// front, so a failing batch leaves the index untouched.
    pub fn upsert(
        &mut self,
        model_name: &str,
        entries: Vec<IndexEntry>,
    ) -> Result<usize, IndexError> {
        let Some(first) = entries.first() else {
            return Ok(0);
        };
        if !self.is_empty() {
            self.check_compatible(model_name, first.vector.dim())?;
        }
        let dim = self.dim.unwrap_or(first.vector.dim());
        for e in &entries {
            if e.vector.dim() != dim {
                return Err(IndexError::DimensionMismatch {
                    expected: dim,
                    got: e.vector.dim(),
                });
            }
            let n = e.vector.norm();
            if (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(IndexError::UnnormalizedVector {
                    chunk_id: e.chunk_id.clone(),
                    norm: n,
                });
            }
        }
        if self.is_empty() {
            self.dim = Some(dim);
            self.model_name = Some(model_name.to_string());
        }
        let count = entries.len();
        for e in entries {
            self.insert_unchecked(e);
        }
        Ok(count)
    }

    fn insert_unchecked(&mut self, entry: IndexEntry) {
        let n = entry.vector.norm();
        match self.positions.get(&entry.chunk_id) {
            Some(&i) => {
                self.entries[i] = entry;
                self.norms[i] = n;
            }
            None => {
                self.positions.insert(entry.chunk_id.clone(), self.entries.len());
                self.entries.push(entry);
                self.norms.push(n);
            }
        }
    }

    /// Exact full scan. Hits are ordered by descending score with ties
    /// broken by ascending chunk id.
    pub fn top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<RetrievalHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        let dim = self.dim.ok_or(IndexError::EmptyIndex)?;
        if self.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        if query.dim() != dim {
            return Err(IndexError::DimensionMismatch {
                expected: dim,
                got: query.dim(),
            });
        }
        let qn = query.norm();
        if qn == 0.0 {
            return Err(IndexError::ZeroVector);
        }
        let q = query.values();
        let mut scored: Vec<(f64, &str)> = self
            .entries
            .iter()
            .zip(&self.norms)
            .map(|(e, n)| {
                let s = (dot(q, e.vector.values()) / (qn * n)).clamp(-1.0, 1.0);
                (s, e.chunk_id.as_str())
            })
            .collect();
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank);
            scored.truncate(k);
        }
        scored.sort_unstable_by(rank);
        Ok(scored
            .into_iter()
            .map(|(score, id)| {
                let e = &self.entries[self.positions[id]];
                RetrievalHit {
                    chunk_id: e.chunk_id.clone(),
                    doc_id: e.doc_id.clone(),
                    score,
                    text: e.text.clone(),
                }
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            serde_json::to_writer(&mut w, &self.manifest()).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
            for e in &self.entries {
                serde_json::to_writer(&mut w, e).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines();
        let manifest_line = lines
            .next()
            .ok_or_else(|| IndexError::CorruptIndex("missing manifest line".into()))??;
        let manifest: IndexManifest = serde_json::from_str(&manifest_line)
            .map_err(|e| IndexError::CorruptIndex(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(IndexError::CorruptIndex(format!(
                "unsupported format_version {}",
                manifest.format_version
            )));
        }
        let mut index = VectorIndex {
            model_name: None,
            dim: None,
            created_at: manifest.created_at.clone(),
            entries: Vec::with_capacity(manifest.entry_count),
            norms: Vec::with_capacity(manifest.entry_count),
            positions: HashMap::with_capacity(manifest.entry_count),
        };
        if manifest.entry_count > 0 {
            if manifest.dim == 0 {
                return Err(IndexError::CorruptIndex("non-empty index with dim 0".into()));
            }
            index.dim = Some(manifest.dim);
            index.model_name = Some(manifest.model_name.clone());
        }
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            let entry: IndexEntry = serde_json::from_str(&line)
                .map_err(|e| IndexError::CorruptIndex(format!("entry line {}: {e}", lineno + 2)))?;
            if entry.vector.dim() != manifest.dim {
                return Err(IndexError::CorruptIndex(format!(
                    "entry {} has dim {}, manifest says {}",
                    entry.chunk_id,
                    entry.vector.dim(),
                    manifest.dim
                )));
            }
            if (norm(entry.vector.values()) - 1.0).abs() > NORM_TOLERANCE {
                return Err(IndexError::CorruptIndex(format!(
                    "entry {} is not unit length",
                    entry.chunk_id
                )));
            }
            if index.positions.contains_key(&entry.chunk_id) {
                return Err(IndexError::CorruptIndex(format!(
                    "duplicate chunk_id {}",
                    entry.chunk_id
                )));
            }
            index.insert_unchecked(entry);
        }
        if index.len() != manifest.entry_count {
            return Err(IndexError::CorruptIndex(format!(
                "manifest declares {} entries, file holds {}",
                manifest.entry_count,
                index.len()
            )));
        }
        Ok(index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::l2_normalize;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    fn entry(id: &str, values: &[f64]) -> IndexEntry {
        IndexEntry {
            chunk_id: id.into(),
            doc_id: id.split('#').next().unwrap().into(),
            text: format!("text of {id}"),
            meta: BTreeMap::new(),
            vector: l2_normalize(values).unwrap(),
        }
    }

    fn basis_index() -> VectorIndex {
        let mut idx = VectorIndex::new();
        idx.upsert(
            "m",
            vec![
                entry("e1#0", &[1.0, 0.0, 0.0]),
                entry("e2#0", &[0.0, 1.0, 0.0]),
                entry("e3#0", &[0.0, 0.0, 1.0]),
            ],
        )
        .unwrap();
        idx
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine_similarity(&v(&[1.0, 2.0, 2.0]), &v(&[2.0, 1.0, 2.0])).unwrap();
        assert!((c - 8.0 / 9.0).abs() < 1e-9);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_similarity(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(IndexError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])),
            Err(IndexError::ZeroVector)
        ));
    }

    #[test]
    fn upsert_counts_and_replaces() {
        let mut idx = basis_index();
        assert_eq!(idx.len(), 3);
        let mut e = entry("e2#0", &[0.0, 1.0, 0.0]);
        e.text = "new".into();
        assert_eq!(idx.upsert("m", vec![e]).unwrap(), 1);
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.get("e2#0").unwrap().text, "new");
        assert_eq!(idx.manifest().entry_count, 3);
    }

    #[test]
    fn upsert_guards() {
        let mut idx = basis_index();
        let err = idx.upsert("m", vec![entry("x#0", &[1.0, 0.0])]).unwrap_err();
        assert!(matches!(err, IndexError::DimensionMismatch { expected: 3, got: 2 }));
        let bad = IndexEntry {
            vector: v(&[2.0, 0.0, 0.0]),
            ..entry("x#0", &[1.0, 0.0, 0.0])
        };
        assert!(matches!(
            idx.upsert("m", vec![bad]),
            Err(IndexError::UnnormalizedVector { .. })
        ));
        assert!(matches!(
            idx.upsert("other", vec![entry("y#0", &[1.0, 0.0, 0.0])]),
            Err(IndexError::ModelMismatch { .. })
        ));
        assert_eq!(idx.len(), 3);
    }

    #[test]
    fn top_k_basis_example() {
        let idx = basis_index();
        let q = l2_normalize(&[0.9, 0.1, 0.0]).unwrap();
        let hits = idx.top_k(&q, 2).unwrap();
        let norm_q = 0.82f64.sqrt();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].chunk_id, "e1#0");
        assert_eq!(hits[1].chunk_id, "e2#0");
        assert!((hits[0].score - 0.9 / norm_q).abs() < 1e-12);
        assert!((hits[0].score - 0.993_883_7).abs() < 1e-6);
        assert!((hits[1].score - 0.1 / norm_q).abs() < 1e-12);
        assert!((hits[1].score - 0.110_431_5).abs() < 1e-6);
    }

    #[test]
    fn top_k_clamps_and_breaks_ties() {
        let mut idx = VectorIndex::new();
        idx.upsert("m", vec![entry("b#0", &[1.0, 0.0]), entry("a#0", &[1.0, 0.0])])
            .unwrap();
        let q = v(&[1.0, 0.0]);
        assert_eq!(idx.top_k(&q, 5).unwrap().len(), 2);
        assert_eq!(idx.top_k(&q, 1).unwrap()[0].chunk_id, "a#0");
    }

    #[test]
    fn top_k_errors() {
        let q = v(&[1.0, 0.0, 0.0]);
        assert!(matches!(VectorIndex::new().top_k(&q, 3), Err(IndexError::EmptyIndex)));
        let idx = basis_index();
        assert!(matches!(idx.top_k(&q, 0), Err(IndexError::InvalidK)));
        assert!(matches!(
            idx.top_k(&v(&[1.0, 0.0]), 1),
            Err(IndexError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.jsonl");
        let mut idx = basis_index();
        idx.upsert("m", vec![entry("e4#0", &[0.3, 0.1, 0.7])]).unwrap();
        idx.save(&path).unwrap();
        let loaded = VectorIndex::load(&path).unwrap();
        let q = l2_normalize(&[0.2, 0.5, 0.4]).unwrap();
        assert_eq!(idx.top_k(&q, 3).unwrap(), loaded.top_k(&q, 3).unwrap());
        assert_eq!(loaded.manifest(), idx.manifest());
        let path2 = dir.path().join("idx2.jsonl");
        loaded.save(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn load_rejects_short_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.jsonl");
        basis_index().save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let truncated: Vec<&str> = text.lines().take(3).collect();
        fs::write(&path, truncated.join("\n") + "\n").unwrap();
        assert!(matches!(VectorIndex::load(&path), Err(IndexError::CorruptIndex(_))));
    }

    #[test]
    fn load_rejects_bad_version_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.jsonl");
        fs::write(
            &path,
            r#"{"format_version":2,"model_name":"m","dim":3,"entry_count":0,"created_at":"x"}"#,
        )
        .unwrap();
        assert!(matches!(VectorIndex::load(&path), Err(IndexError::CorruptIndex(_))));
        fs::write(&path, "not json\n").unwrap();
        assert!(matches!(VectorIndex::load(&path), Err(IndexError::CorruptIndex(_))));
        fs::write(&path, "").unwrap();
        assert!(matches!(VectorIndex::load(&path), Err(IndexError::CorruptIndex(_))));
        assert!(matches!(
            VectorIndex::load(dir.path().join("missing")),
            Err(IndexError::Io(_))
        ));
    }

    #[test]
    fn loaded_index_guards_dimension() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.jsonl");
        basis_index().save(&path).unwrap();
        let idx = VectorIndex::load(&path).unwrap();
        assert!(matches!(
            idx.top_k(&v(&[1.0, 0.0]), 1),
            Err(IndexError::DimensionMismatch { expected: 3, got: 2 })
        ));
    }
}
