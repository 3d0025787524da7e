//! Per-file token encodings laid out as
//! `[CLS] message [SEP] diff [EOS]`.

use std::collections::HashSet;
use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::window::{CommitRecord, FileDiff};

/// Sequence cap of the reference transformer family.
pub const DEFAULT_MAX_LEN: usize = 512;
pub const DEFAULT_VOCAB_SIZE: usize = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: u32,
    pub cls: u32,
    pub sep: u32,
    pub eos: u32,
}

pub trait TokenizerProvider: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn specials(&self) -> SpecialIds;
    /// Deterministic; the empty string encodes to an empty sequence.
    fn encode(&self, text: &str) -> Vec<u32>;
}

/// Lowercased word/punctuation tokens hashed into a fixed vocabulary.
/// Ids 0..4 are reserved for the specials.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashTokenizer {
    vocab_size: usize,
}

const RESERVED: u32 = 4;

impl HashTokenizer {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > RESERVED as usize, "vocabulary too small");
        HashTokenizer { vocab_size }
    }

    /// Split text into lowercased tokens: runs of alphanumerics/underscore,
    /// and each other non-whitespace character on its own.
    pub fn words(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = String::new();
        for ch in text.chars() {
            if ch.is_alphanumeric() || ch == '_' {
                cur.extend(ch.to_lowercase());
                continue;
            }
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }

    pub fn token_id(&self, word: &str) -> u32 {
        let mut h = FnvHasher::default();
        h.write(word.to_lowercase().as_bytes());
        RESERVED + (h.finish() % (self.vocab_size as u64 - RESERVED as u64)) as u32
    }
}

impl Default for HashTokenizer {
    fn default() -> Self {
        HashTokenizer::new(DEFAULT_VOCAB_SIZE)
    }
}

impl TokenizerProvider for HashTokenizer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn specials(&self) -> SpecialIds {
        SpecialIds {
            pad: 0,
            cls: 1,
            sep: 2,
            eos: 3,
        }
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        Self::words(text).iter().map(|w| self.token_id(w)).collect()
    }
}

/// Encoded (commit message, file diff) pair. Stored unpadded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkEncoding {
    pub input_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    /// 0 over `[CLS] message [SEP]`, 1 over `diff [EOS]`.
    pub token_type_ids: Vec<u8>,
    /// Index of the source file within the commit.
    pub file_index: usize,
}

impl ChunkEncoding {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    /// Message tokens, specials excluded (unpadded encodings only).
    pub fn message_tokens(&self) -> &[u32] {
        let sep = self.token_type_ids.iter().position(|&t| t == 1).unwrap_or(self.len());
        &self.input_ids[1..sep.saturating_sub(1)]
    }

    /// Diff tokens, specials excluded (unpadded encodings only).
    pub fn diff_tokens(&self) -> &[u32] {
        let start = self.token_type_ids.iter().position(|&t| t == 1).unwrap_or(self.len());
        let end = self.attention_mask.iter().rposition(|&m| m == 1).unwrap_or(0);
        &self.input_ids[start..end.max(start)]
    }

    /// For each id: 0, 1 or 2 depending on how many of the two segments
    /// contain it.
    pub fn segment_presence(&self, ids: &[u32]) -> Vec<f64> {
        let msg: HashSet<u32> = self.message_tokens().iter().copied().collect();
        let diff: HashSet<u32> = self.diff_tokens().iter().copied().collect();
        ids.iter()
            .map(|id| f64::from(u8::from(msg.contains(id)) + u8::from(diff.contains(id))))
            .collect()
    }

    /// Right-pad to `len` for fixed-size batches.
    pub fn padded(&self, len: usize, pad_id: u32) -> ChunkEncoding {
        let mut out = self.clone();
        if len > out.len() {
            let extra = len - out.len();
            out.input_ids.extend(std::iter::repeat(pad_id).take(extra));
            out.attention_mask.extend(std::iter::repeat(0).take(extra));
            out.token_type_ids.extend(std::iter::repeat(0).take(extra));
        }
        out
    }
}

/// Encode one file of a commit. When message and diff exceed the
/// `max_len - 3` token budget the diff is cut first, then the message.
///
/// Panics if `max_len < 8`.
pub fn encode_file_chunk(
    message: &str,
    diff: &FileDiff,
    file_index: usize,
    tok: &dyn TokenizerProvider,
    max_len: usize,
) -> ChunkEncoding {
    assert!(max_len >= 8, "max_len must be at least 8");
    let specials = tok.specials();
    let mut msg = tok.encode(message);
    let mut patch = tok.encode(&diff.patch_text);
    let budget = max_len - 3;
    msg.truncate(budget);
    patch.truncate(budget - msg.len());

    let len = msg.len() + patch.len() + 3;
    let mut input_ids = Vec::with_capacity(len);
    input_ids.push(specials.cls);
    input_ids.extend_from_slice(&msg);
    input_ids.push(specials.sep);
    input_ids.extend_from_slice(&patch);
    input_ids.push(specials.eos);

    let mut token_type_ids = vec![0u8; msg.len() + 2];
    token_type_ids.resize(len, 1);

    ChunkEncoding {
        attention_mask: vec![1; len],
        input_ids,
        token_type_ids,
        file_index,
    }
}

/// One encoding per file of the commit, in file order.
pub fn encode_commit(
    commit: &CommitRecord,
    tok: &dyn TokenizerProvider,
    max_len: usize,
) -> Vec<ChunkEncoding> {
    commit
        .files
        .iter()
        .enumerate()
        .map(|(i, f)| encode_file_chunk(&commit.message, f, i, tok, max_len))
        .collect()
}
