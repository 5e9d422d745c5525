//! Sentence embeddings from word vectors, plus cosine nearest-neighbour lookup.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::RwLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::Action;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot read vector file: {0}")]
    Io(#[from] std::io::Error),
    #[error("line 1: malformed header {0:?}, expected \"<count> <dim>\"")]
    Header(String),
    #[error("line {line}: expected {expected} components, found {found}")]
    Arity {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: non-numeric component {value:?}")]
    NotNumeric { line: usize, value: String },
    #[error("vector file declares {declared} rows but ends after {found}")]
    Truncated { declared: usize, found: usize },
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("no candidates to choose from")]
    NoCandidates,
}

/// A dense sentence representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceVector(pub Vec<f64>);

impl SentenceVector {
    pub fn zeros(dim: usize) -> Self {
        SentenceVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Lowercases, maps every non-alphanumeric character to a space, and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Vector of a single token, `None` when out of vocabulary.
    fn token_vector(&self, token: &str) -> Option<Vec<f64>>;

    /// Mean of the in-vocabulary token vectors; all-OOV text maps to the zero vector.
    fn embed(&self, text: &str) -> Result<SentenceVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut sum = vec![0.0; self.dim()];
        let mut n = 0usize;
        for tok in tokenize(text) {
            if let Some(v) = self.token_vector(&tok) {
                for (s, x) in sum.iter_mut().zip(&v) {
                    *s += x;
                }
                n += 1;
            }
        }
        if n > 1 {
            let inv = n as f64;
            sum.iter_mut().for_each(|s| *s /= inv);
        }
        Ok(SentenceVector(sum))
    }

    /// Like [`Embedder::embed`] but maps empty text to the zero vector.
    fn embed_lossy(&self, text: &str) -> SentenceVector {
        self.embed(text)
            .unwrap_or_else(|_| SentenceVector::zeros(self.dim()))
    }
}

/// Pre-trained word vectors in the plain-text `.vec` layout.
#[derive(Debug, Clone)]
pub struct WordVectorTable {
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

impl WordVectorTable {
    pub fn vocab_size(&self) -> usize {
        self.vectors.len()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vectors.contains_key(token)
    }
}

impl Embedder for WordVectorTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn token_vector(&self, token: &str) -> Option<Vec<f64>> {
        self.vectors
            .get(token)
            .map(|v| v.iter().map(|&x| f64::from(x)).collect())
    }
}

/// Reads a word-vector file. Only the first `max_vocab` rows are kept when given.
pub fn load_vectors(path: impl AsRef<Path>, max_vocab: Option<usize>) -> Result<WordVectorTable, EmbedError> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    let mut parts = header.split_whitespace();
    let (count, dim) = match (
        parts.next().and_then(|c| c.parse::<usize>().ok()),
        parts.next().and_then(|d| d.parse::<usize>().ok()),
        parts.next(),
    ) {
        (Some(c), Some(d), None) if d > 0 => (c, d),
        _ => return Err(EmbedError::Header(header)),
    };
    let keep = max_vocab.map_or(count, |m| m.min(count));
    let mut vectors = HashMap::with_capacity(keep);
    for i in 0..keep {
        let line_no = i + 2;
        let line = lines.next().transpose()?.ok_or(EmbedError::Truncated {
            declared: count,
            found: i,
        })?;
        let mut fields = line.split_whitespace();
        let token = fields.next().ok_or(EmbedError::Arity {
            line: line_no,
            expected: dim,
            found: 0,
        })?;
        let values = fields
            .map(|f| {
                f.parse::<f32>().map_err(|_| EmbedError::NotNumeric {
                    line: line_no,
                    value: f.to_string(),
                })
            })
            .collect::<Result<Vec<f32>, _>>()?;
        if values.len() != dim {
            return Err(EmbedError::Arity {
                line: line_no,
                expected: dim,
                found: values.len(),
            });
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(EmbedError::NotNumeric {
                line: line_no,
                value: bad.to_string(),
            });
        }
        // first occurrence wins on duplicate tokens
        vectors.entry(token.to_string()).or_insert(values);
    }
    Ok(WordVectorTable { dim, vectors })
}

/// Deterministic stand-in for pre-trained vectors: every token maps to a pseudo-random
/// vector derived from a hash of `(seed, token)`, unit length unless rescaled with
/// [`HashEmbedder::with_norm`]. Every token is in vocabulary.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
    norm: f64,
}

impl HashEmbedder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashEmbedder { dim, seed, norm: 1.0 }
    }

    /// Sets the length of every token vector. `sqrt(dim)` gives unit RMS per component,
    /// the magnitude of typical pre-trained vectors.
    pub fn with_norm(mut self, norm: f64) -> Self {
        assert!(norm.is_finite() && norm > 0.0, "token norm must be positive");
        self.norm = norm;
        self
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(Self::DEFAULT_DIM, 0)
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn token_vector(&self, token: &str) -> Option<Vec<f64>> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            let scale = self.norm / norm;
            v.iter_mut().for_each(|x| *x *= scale);
        }
        Some(v)
    }
}

/// Memoizes sentence embeddings of an inner embedder.
pub struct CachedEmbedder<E> {
    inner: E,
    cache: RwLock<HashMap<String, SentenceVector>>,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn new(inner: E) -> Self {
        CachedEmbedder {
            inner,
            cache: RwLock::new(HashMap::new()),
        }
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn token_vector(&self, token: &str) -> Option<Vec<f64>> {
        self.inner.token_vector(token)
    }

    fn embed(&self, text: &str) -> Result<SentenceVector, EmbedError> {
        if let Some(v) = self.cache.read().expect("embedding cache poisoned").get(text) {
            return Ok(v.clone());
        }
        let v = self.inner.embed(text)?;
        self.cache
            .write()
            .expect("embedding cache poisoned")
            .insert(text.to_string(), v.clone());
        Ok(v)
    }
}

/// `1 - cos(a, b)`; a zero-norm operand is at distance 1 from everything.
pub fn cosine_distance(a: &SentenceVector, b: &SentenceVector) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    1.0 - dot / (na * nb)
}

/// The candidate closest to `query` by cosine distance; the earliest candidate wins ties.
pub fn nearest<'a>(
    query: &SentenceVector,
    candidates: &'a [(Action, SentenceVector)],
) -> Result<&'a Action, EmbedError> {
    let mut best: Option<(&Action, f64)> = None;
    for (action, vec) in candidates {
        let d = cosine_distance(query, vec);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((action, d));
        }
    }
    best.map(|(a, _)| a).ok_or(EmbedError::NoCandidates)
}

/// Embeds each action's canonical text and returns the nearest to `text`.
pub fn nearest_action<'a>(
    embedder: &dyn Embedder,
    text: &str,
    actions: &'a [Action],
) -> Result<&'a Action, EmbedError> {
    let query = embedder.embed_lossy(text);
    let candidates: Vec<(Action, SentenceVector)> = actions
        .iter()
        .map(|a| (a.clone(), embedder.embed_lossy(&a.text())))
        .collect();
    let picked = nearest(&query, &candidates)?;
    let idx = candidates
        .iter()
        .position(|(a, _)| std::ptr::eq(a, picked))
        .expect("picked from candidates");
    Ok(&actions[idx])
}
