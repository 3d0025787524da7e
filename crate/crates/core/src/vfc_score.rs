//! Fix-likelihood scoring per file, commit-level aggregation and the
//! binary training loss.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::{ChunkEncoding, HashTokenizer};
use crate::provider::ProviderError;

const BUILTIN_LEXICON: &str = include_str!("../data/vfc_lexicon.tsv");

/// Probability clamp used inside the log terms.
pub const PROB_EPSILON: f64 = 1e-7;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ScoreError {
    #[error("commit has no scoreable files")]
    NoScoreableFiles,
}

#[derive(Debug, thiserror::Error)]
pub enum LexiconError {
    #[error("line {line}: expected `token<TAB>weight`, got {content:?}")]
    BadLine { line: usize, content: String },
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilePrediction {
    pub file_index: usize,
    pub probability: f64,
}

/// A prediction/label pair; the prediction is clamped into
/// `[PROB_EPSILON, 1 - PROB_EPSILON]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSample {
    x: f64,
    y: bool,
}

impl LossSample {
    pub fn new(x: f64, y: bool) -> Self {
        LossSample {
            x: x.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON),
            y,
        }
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> bool {
        self.y
    }
}

/// Unweighted binary cross entropy `-[y ln x + (1-y) ln(1-x)]`.
pub fn bce_loss(s: LossSample) -> f64 {
    if s.y {
        -s.x.ln()
    } else {
        -(1.0 - s.x).ln()
    }
}

/// dL/dx of [`bce_loss`].
pub fn bce_grad(s: LossSample) -> f64 {
    if s.y {
        -1.0 / s.x
    } else {
        1.0 / (1.0 - s.x)
    }
}

/// Arithmetic mean of the file probabilities.
pub fn aggregate_commit(preds: &[FilePrediction]) -> Result<f64, ScoreError> {
    if preds.is_empty() {
        return Err(ScoreError::NoScoreableFiles);
    }
    let sum: f64 = preds.iter().map(|p| p.probability).sum();
    Ok((sum / preds.len() as f64).clamp(0.0, 1.0))
}

/// 1 when `p >= threshold`.
pub fn classify_vfc(p: f64, threshold: f64) -> u8 {
    u8::from(p >= threshold)
}

pub trait VfcScoreProvider: Send + Sync {
    /// Probability in `[0, 1]` that the chunk belongs to a fixing commit.
    fn score(&self, chunk: &ChunkEncoding) -> Result<f64, ProviderError>;
}

/// Keyword weights plus an intercept, stored as `token<TAB>weight` lines
/// with a `__bias__` entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub weights: BTreeMap<String, f64>,
    pub bias: f64,
}

impl Lexicon {
    pub fn parse(text: &str) -> Result<Lexicon, LexiconError> {
        let mut weights = BTreeMap::new();
        let mut bias = 0.0;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || LexiconError::BadLine {
                line: n + 1,
                content: raw.to_string(),
            };
            let (token, weight) = line.split_once('\t').ok_or_else(bad)?;
            let weight: f64 = weight.trim().parse().map_err(|_| bad())?;
            if !weight.is_finite() {
                return Err(bad());
            }
            match token.trim() {
                "__bias__" => bias = weight,
                t => {
                    weights.insert(t.to_lowercase(), weight);
                }
            }
        }
        Ok(Lexicon { weights, bias })
    }

    pub fn builtin() -> Lexicon {
        Lexicon::parse(BUILTIN_LEXICON).expect("builtin lexicon parses")
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("__bias__\t{}\n", self.bias);
        for (t, w) in &self.weights {
            let _ = writeln!(out, "{t}\t{w}");
        }
        out
    }

    /// Number of distinct positive-weight keywords present in `text`.
    pub fn hits(&self, text: &str) -> usize {
        let words: HashSet<String> = HashTokenizer::words(text).into_iter().collect();
        self.weights
            .iter()
            .filter(|(t, w)| **w > 0.0 && words.contains(*t))
            .count()
    }
}

/// Logistic keyword model over token ids:
/// `sigmoid(bias + sum_t w_t * ([t in message] + [t in diff]))`.
#[derive(Debug, Clone)]
pub struct ReferenceVfcProvider {
    tokenizer: HashTokenizer,
    /// Lexicon token text and its id, in lexicon order.
    tokens: Vec<(String, u32)>,
    weights: Vec<f64>,
    bias: f64,
}

impl ReferenceVfcProvider {
    pub fn new(lexicon: &Lexicon, tokenizer: HashTokenizer) -> Self {
        let tokens: Vec<(String, u32)> = lexicon
            .weights
            .keys()
            .map(|t| (t.clone(), tokenizer.token_id(t)))
            .collect();
        ReferenceVfcProvider {
            tokenizer,
            weights: lexicon.weights.values().copied().collect(),
            tokens,
            bias: lexicon.bias,
        }
    }

    pub fn to_lexicon(&self) -> Lexicon {
        Lexicon {
            weights: self
                .tokens
                .iter()
                .map(|(t, _)| t.clone())
                .zip(self.weights.iter().copied())
                .collect(),
            bias: self.bias,
        }
    }

    pub fn tokenizer(&self) -> HashTokenizer {
        self.tokenizer
    }

    fn features(&self, chunk: &ChunkEncoding) -> Vec<f64> {
        let ids: Vec<u32> = self.tokens.iter().map(|(_, id)| *id).collect();
        chunk.segment_presence(&ids)
    }

    fn logit(&self, features: &[f64]) -> f64 {
        self.bias
            + features
                .iter()
                .zip(&self.weights)
                .map(|(x, w)| x * w)
                .sum::<f64>()
    }

    /// Full-batch gradient descent on mean BCE. Returns the mean loss
    /// before each epoch.
    pub fn fit(
        &mut self,
        chunks: &[ChunkEncoding],
        labels: &[bool],
        learning_rate: f64,
        epochs: usize,
    ) -> Vec<f64> {
        assert_eq!(chunks.len(), labels.len());
        if chunks.is_empty() {
            return Vec::new();
        }
        let xs: Vec<Vec<f64>> = chunks.iter().map(|c| self.features(c)).collect();
        let n = xs.len() as f64;
        let mut history = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let mut grad_w = vec![0.0; self.weights.len()];
            let mut grad_b = 0.0;
            let mut loss = 0.0;
            for (x, &y) in xs.iter().zip(labels) {
                let p = logistic(self.logit(x));
                let s = LossSample::new(p, y);
                loss += bce_loss(s);
                // dL/dz = dL/dp * p(1-p) = p - y
                let dz = p - f64::from(u8::from(y));
                grad_b += dz;
                for (g, xi) in grad_w.iter_mut().zip(x) {
                    *g += dz * xi;
                }
            }
            history.push(loss / n);
            self.bias -= learning_rate * grad_b / n;
            for (w, g) in self.weights.iter_mut().zip(&grad_w) {
                *w -= learning_rate * g / n;
            }
        }
        history
    }
}

impl Default for ReferenceVfcProvider {
    fn default() -> Self {
        ReferenceVfcProvider::new(&Lexicon::builtin(), HashTokenizer::default())
    }
}

impl VfcScoreProvider for ReferenceVfcProvider {
    fn score(&self, chunk: &ChunkEncoding) -> Result<f64, ProviderError> {
        Ok(logistic(self.logit(&self.features(chunk))))
    }
}

/// Lookup of token id to lexicon text; used for debugging output.
pub fn lexicon_ids(lexicon: &Lexicon, tok: &HashTokenizer) -> HashMap<u32, String> {
    lexicon
        .weights
        .keys()
        .map(|t| (tok.token_id(t), t.clone()))
        .collect()
}
