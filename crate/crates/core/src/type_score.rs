//! Vulnerability-type scoring: per-file class distributions, argmax
//! aggregation across files, type-match features and the weighted
//! multi-class loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::advisory::OwaspClass;
use crate::encoder::{ChunkEncoding, HashTokenizer};
use crate::provider::ProviderError;
use crate::vfc_score::ScoreError;

const BUILTIN_TYPE_LEXICON: &str = include_str!("../data/type_lexicon.tsv");

/// Per-class advisory counts of the reference training corpus; A06 has none.
pub const CLASS_COUNTS: [(OwaspClass, u32); 11] = [
    (OwaspClass::A01, 1333),
    (OwaspClass::A02, 126),
    (OwaspClass::A03, 2249),
    (OwaspClass::A04, 232),
    (OwaspClass::A05, 125),
    (OwaspClass::A06, 0),
    (OwaspClass::A07, 322),
    (OwaspClass::A08, 209),
    (OwaspClass::A09, 30),
    (OwaspClass::A10, 88),
    (OwaspClass::Other, 3133),
];

const N_TRAINED: usize = OwaspClass::TRAINED.len();

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Probabilities over all 11 classes, indexed by [`OwaspClass::index`];
/// A06 is always 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeDistribution {
    probs: [f64; 11],
}

impl TypeDistribution {
    /// From ten probabilities in [`OwaspClass::TRAINED`] order.
    pub fn from_trained(p: &[f64]) -> Result<Self, String> {
        if p.len() != N_TRAINED {
            return Err(format!("expected {N_TRAINED} probabilities, got {}", p.len()));
        }
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err("probabilities must be finite and nonnegative".into());
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(format!("probabilities sum to {sum}"));
        }
        let mut probs = [0.0; 11];
        for (c, x) in OwaspClass::TRAINED.iter().zip(p) {
            probs[c.index()] = *x;
        }
        Ok(TypeDistribution { probs })
    }

    /// Softmax of ten logits in trained-class order.
    pub fn from_logits(logits: &[f64]) -> Self {
        assert_eq!(logits.len(), N_TRAINED);
        let mut probs = [0.0; 11];
        for (c, x) in OwaspClass::TRAINED.iter().zip(softmax(logits)) {
            probs[c.index()] = x;
        }
        TypeDistribution { probs }
    }

    pub fn get(&self, class: OwaspClass) -> f64 {
        self.probs[class.index()]
    }

    pub fn as_array(&self) -> &[f64; 11] {
        &self.probs
    }

    /// Most probable class; ties go to the lowest class code.
    pub fn argmax(&self) -> (OwaspClass, f64) {
        let mut best = (OwaspClass::A01, f64::NEG_INFINITY);
        for c in OwaspClass::TRAINED {
            if self.get(c) > best.1 {
                best = (c, self.get(c));
            }
        }
        best
    }
}

/// Positive per-class loss weights, indexed by [`OwaspClass::index`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    w: [f64; 11],
}

impl ClassWeights {
    pub fn uniform() -> Self {
        ClassWeights { w: [1.0; 11] }
    }

    /// Inverse class frequency over `counts`, normalized so the trained
    /// classes average 1. Classes with zero count get weight 1.
    pub fn from_counts(counts: &[(OwaspClass, u32)]) -> Self {
        let mut w = [1.0; 11];
        let inv: Vec<(OwaspClass, f64)> = counts
            .iter()
            .filter(|(_, n)| *n > 0)
            .map(|&(c, n)| (c, 1.0 / f64::from(n)))
            .collect();
        if inv.is_empty() {
            return ClassWeights::uniform();
        }
        let mean = inv.iter().map(|(_, x)| x).sum::<f64>() / inv.len() as f64;
        for (c, x) in inv {
            w[c.index()] = x / mean;
        }
        ClassWeights { w }
    }

    pub fn default_from_counts() -> Self {
        ClassWeights::from_counts(&CLASS_COUNTS)
    }

    pub fn get(&self, class: OwaspClass) -> f64 {
        self.w[class.index()]
    }
}

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights::default_from_counts()
    }
}

fn trained_index(y: OwaspClass) -> usize {
    y.trained_index()
        .unwrap_or_else(|| panic!("{y} is not a trained class"))
}

/// `-w_y * ln softmax(logits)_y` over ten trained-order logits.
///
/// Panics if `y` is A06.
pub fn weighted_ce_loss(logits: &[f64], y: OwaspClass, w: &ClassWeights) -> f64 {
    assert_eq!(logits.len(), N_TRAINED);
    let k = trained_index(y);
    w.get(y) * (log_sum_exp(logits) - logits[k])
}

/// Gradient of [`weighted_ce_loss`] with respect to each logit.
pub fn weighted_ce_grad(logits: &[f64], y: OwaspClass, w: &ClassWeights) -> Vec<f64> {
    assert_eq!(logits.len(), N_TRAINED);
    let k = trained_index(y);
    let wy = w.get(y);
    softmax(logits)
        .into_iter()
        .enumerate()
        .map(|(c, p)| wy * (p - if c == k { 1.0 } else { 0.0 }))
        .collect()
}

/// Class with the single highest per-file probability across all files.
/// Equal maxima go to the lowest class code.
pub fn aggregate_type(
    dists: &[(usize, TypeDistribution)],
) -> Result<(OwaspClass, f64), ScoreError> {
    let mut best: Option<(OwaspClass, f64)> = None;
    for (_, d) in dists {
        let (c, p) = d.argmax();
        best = match best {
            Some((bc, bp)) if bp > p || (bp == p && bc <= c) => Some((bc, bp)),
            _ => Some((c, p)),
        };
    }
    best.ok_or(ScoreError::NoScoreableFiles)
}

/// Per-class maximum over files.
pub fn pooled(dists: &[TypeDistribution]) -> [f64; 11] {
    let mut out = [0.0f64; 11];
    for d in dists {
        for (o, p) in out.iter_mut().zip(d.as_array()) {
            *o = o.max(*p);
        }
    }
    out
}

/// The `k` trained classes with the highest pooled score, ties by class
/// code.
pub fn top_classes(pooled: &[f64; 11], k: usize) -> Vec<OwaspClass> {
    let mut classes = OwaspClass::TRAINED.to_vec();
    classes.sort_by(|a, b| {
        pooled[b.index()]
            .total_cmp(&pooled[a.index()])
            .then(a.cmp(b))
    });
    classes.truncate(k);
    classes
}

/// `(top1_match, top5_match)` of the advisory class against a commit's
/// per-file distributions.
pub fn type_match_features(
    advisory_class: OwaspClass,
    dists: &[TypeDistribution],
) -> Result<(u8, u8), ScoreError> {
    let indexed: Vec<(usize, TypeDistribution)> = dists.iter().copied().enumerate().collect();
    let (top1, _) = aggregate_type(&indexed)?;
    let top5 = top_classes(&pooled(dists), 5);
    Ok((
        u8::from(top1 == advisory_class),
        u8::from(top5.contains(&advisory_class)),
    ))
}

pub trait TypeScoreProvider: Send + Sync {
    fn distribution(&self, chunk: &ChunkEncoding) -> Result<TypeDistribution, ProviderError>;
}

#[derive(Debug, thiserror::Error)]
pub enum TypeLexiconError {
    #[error("line {line}: expected `CLASS<TAB>token<TAB>weight`, got {content:?}")]
    BadLine { line: usize, content: String },
    #[error("line {line}: {class:?} is not a trained class")]
    UntrainedClass { line: usize, class: String },
}

/// Per-class keyword weights. A `__bias__` token sets the class intercept.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TypeLexicon {
    pub entries: BTreeMap<OwaspClass, BTreeMap<String, f64>>,
    pub bias: BTreeMap<OwaspClass, f64>,
}

impl TypeLexicon {
    pub fn parse(text: &str) -> Result<Self, TypeLexiconError> {
        let mut lex = TypeLexicon::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || TypeLexiconError::BadLine {
                line: n + 1,
                content: raw.to_string(),
            };
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            let [class, token, weight] = cols[..] else {
                return Err(bad());
            };
            let class: OwaspClass = class.parse().map_err(|_| bad())?;
            if class.trained_index().is_none() {
                return Err(TypeLexiconError::UntrainedClass {
                    line: n + 1,
                    class: class.code().to_string(),
                });
            }
            let weight: f64 = weight.parse().ok().filter(|w: &f64| w.is_finite()).ok_or_else(bad)?;
            if token == "__bias__" {
                lex.bias.insert(class, weight);
            } else {
                lex.entries
                    .entry(class)
                    .or_default()
                    .insert(token.to_lowercase(), weight);
            }
        }
        Ok(lex)
    }

    pub fn builtin() -> Self {
        TypeLexicon::parse(BUILTIN_TYPE_LEXICON).expect("builtin type lexicon parses")
    }
}

/// Linear softmax model over keyword segment presence:
/// `logit_c = b_c + sum_t W[c][t] * ([t in message] + [t in diff])`.
#[derive(Debug, Clone)]
pub struct ReferenceTypeProvider {
    tokens: Vec<String>,
    ids: Vec<u32>,
    /// `weights[c][t]`, trained-class order.
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl ReferenceTypeProvider {
    pub fn new(lexicon: &TypeLexicon, tokenizer: HashTokenizer) -> Self {
        let mut tokens: Vec<String> = lexicon
            .entries
            .values()
            .flat_map(|m| m.keys().cloned())
            .collect();
        tokens.sort();
        tokens.dedup();
        let ids = tokens.iter().map(|t| tokenizer.token_id(t)).collect();
        let weights = OwaspClass::TRAINED
            .iter()
            .map(|c| {
                let row = lexicon.entries.get(c);
                tokens
                    .iter()
                    .map(|t| row.and_then(|r| r.get(t)).copied().unwrap_or(0.0))
                    .collect()
            })
            .collect();
        let bias = OwaspClass::TRAINED
            .iter()
            .map(|c| lexicon.bias.get(c).copied().unwrap_or(0.0))
            .collect();
        ReferenceTypeProvider {
            tokens,
            ids,
            weights,
            bias,
        }
    }

    pub fn to_lexicon(&self) -> TypeLexicon {
        let mut lex = TypeLexicon::default();
        for (ci, c) in OwaspClass::TRAINED.iter().enumerate() {
            if self.bias[ci] != 0.0 {
                lex.bias.insert(*c, self.bias[ci]);
            }
            for (t, w) in self.tokens.iter().zip(&self.weights[ci]) {
                if *w != 0.0 {
                    lex.entries.entry(*c).or_default().insert(t.clone(), *w);
                }
            }
        }
        lex
    }

    pub fn logits(&self, chunk: &ChunkEncoding) -> Vec<f64> {
        self.logits_of(&chunk.segment_presence(&self.ids))
    }

    fn logits_of(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
            .collect()
    }

    /// Full-batch gradient descent on the mean weighted cross entropy.
    /// Returns the mean loss before each epoch. Labels must be trained
    /// classes.
    pub fn fit(
        &mut self,
        chunks: &[ChunkEncoding],
        labels: &[OwaspClass],
        class_weights: &ClassWeights,
        learning_rate: f64,
        epochs: usize,
    ) -> Vec<f64> {
        assert_eq!(chunks.len(), labels.len());
        if chunks.is_empty() {
            return Vec::new();
        }
        let xs: Vec<Vec<f64>> = chunks.iter().map(|c| c.segment_presence(&self.ids)).collect();
        let n = xs.len() as f64;
        let mut history = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let mut gw = vec![vec![0.0; self.tokens.len()]; N_TRAINED];
            let mut gb = [0.0; N_TRAINED];
            let mut loss = 0.0;
            for (x, &y) in xs.iter().zip(labels) {
                let z = self.logits_of(x);
                loss += weighted_ce_loss(&z, y, class_weights);
                for (c, g) in weighted_ce_grad(&z, y, class_weights).into_iter().enumerate() {
                    gb[c] += g;
                    for (gwt, xi) in gw[c].iter_mut().zip(x) {
                        *gwt += g * xi;
                    }
                }
            }
            history.push(loss / n);
            for c in 0..N_TRAINED {
                self.bias[c] -= learning_rate * gb[c] / n;
                for (w, g) in self.weights[c].iter_mut().zip(&gw[c]) {
                    *w -= learning_rate * g / n;
                }
            }
        }
        history
    }
}

impl Default for ReferenceTypeProvider {
    fn default() -> Self {
        ReferenceTypeProvider::new(&TypeLexicon::builtin(), HashTokenizer::default())
    }
}

impl TypeScoreProvider for ReferenceTypeProvider {
    fn distribution(&self, chunk: &ChunkEncoding) -> Result<TypeDistribution, ProviderError> {
        Ok(TypeDistribution::from_logits(&self.logits(chunk)))
    }
}
