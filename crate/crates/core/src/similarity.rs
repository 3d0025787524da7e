//! Advisory/commit-message similarity as the cosine of text embeddings.

use std::hash::Hasher;

use fnv::FnvHasher;

use crate::advisory::Advisory;
use crate::encoder::HashTokenizer;
use crate::provider::ProviderError;

pub const DEFAULT_EMBED_DIM: usize = 256;
pub const DEFAULT_EMBED_SEED: u64 = 0x0005_eed0_f5ec;
/// Advisory text longer than this many characters is cut before embedding.
pub const ADVISORY_TEXT_LIMIT: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum CosineError {
    #[error("zero vector")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// `dot(u, v) / (|u| |v|)`, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, CosineError> {
    if u.len() != v.len() {
        return Err(CosineError::DimensionMismatch(u.len(), v.len()));
    }
    let (mut dot, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(CosineError::ZeroVector);
    }
    Ok((dot / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0))
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError>;
}

/// Signed feature hashing of lowercased tokens, L2-normalized. Text with no
/// tokens embeds to the zero vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0);
        HashEmbedder { dim, seed }
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for word in HashTokenizer::words(text) {
            let mut h = FnvHasher::with_key(self.seed);
            h.write(word.as_bytes());
            let h = h.finish();
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(DEFAULT_EMBED_DIM, DEFAULT_EMBED_SEED)
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        Ok(self.embed_text(text))
    }
}

/// Summary and details joined by a newline, cut at
/// [`ADVISORY_TEXT_LIMIT`] characters.
pub fn advisory_text(advisory: &Advisory) -> String {
    let full = if advisory.details.is_empty() {
        advisory.summary.clone()
    } else {
        format!("{}\n{}", advisory.summary, advisory.details)
    };
    full.chars().take(ADVISORY_TEXT_LIMIT).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityScore {
    pub value: f64,
    /// Set when either embedding was the zero vector; `value` is then 0.
    pub zero_vector: bool,
}

pub fn text_similarity(
    a: &str,
    b: &str,
    p: &dyn EmbeddingProvider,
) -> Result<SimilarityScore, ProviderError> {
    let u = p.embed(a)?;
    let v = p.embed(b)?;
    match cosine(&u, &v) {
        Ok(value) => Ok(SimilarityScore {
            value,
            zero_vector: false,
        }),
        Err(CosineError::ZeroVector) => Ok(SimilarityScore {
            value: 0.0,
            zero_vector: true,
        }),
        Err(e) => Err(ProviderError::Protocol(e.to_string())),
    }
}

pub fn advisory_commit_similarity(
    advisory: &Advisory,
    message: &str,
    p: &dyn EmbeddingProvider,
) -> Result<SimilarityScore, ProviderError> {
    text_similarity(&advisory_text(advisory), message, p)
}
