//! Gradient-boosted tree ensemble with a binary logistic objective, used to
//! turn feature vectors into fix probabilities and rank candidates.

mod importance;
mod model_io;
mod tree;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::features::{FeatureVector, FEATURE_NAMES, N_FEATURES};
use crate::vfc_score::{logistic, PROB_EPSILON};

pub use importance::{log_loss, permutation_importance, IMPORTANCE_REPEATS};
pub use model_io::{load_model, model_from_str, model_to_string, save_model, ModelIoError, FORMAT_VERSION};
pub use tree::{find_best_split, split_gain, Node, Split, Tree};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankParams {
    pub learning_rate: f64,
    pub max_depth: usize,
    pub rounds: usize,
    pub l2_lambda: f64,
    pub min_child_weight: f64,
    pub seed: u64,
}

impl Default for RankParams {
    fn default() -> Self {
        RankParams {
            learning_rate: 0.001,
            max_depth: 4,
            rounds: 1500,
            l2_lambda: 1.0,
            min_child_weight: 1.0,
            seed: 0,
        }
    }
}

impl RankParams {
    fn validate(&self) -> Result<(), RankError> {
        let bad = |what: &str| Err(RankError::InvalidParams(what.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return bad("l2_lambda must be nonnegative");
        }
        if !(self.min_child_weight >= 0.0 && self.min_child_weight.is_finite()) {
            return bad("min_child_weight must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RankError {
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("features and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("row {0} has a non-finite feature")]
    NonFinite(usize),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankModel {
    pub params: RankParams,
    /// Initial margin (log-odds) shared by every prediction.
    pub base_score: f64,
    pub feature_names: Vec<String>,
    pub trees: Vec<Tree>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub model: RankModel,
    /// Only one label was present; the model is the constant at its
    /// clamped log-odds.
    pub degenerate: bool,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
    (p / (1.0 - p)).ln()
}

/// Fit `params.rounds` trees to the log-loss gradient `p - y` and hessian
/// `p (1 - p)`. Training is deterministic; `params.seed` is recorded but
/// the exact split search draws no random numbers.
pub fn train(x: &[[f64; N_FEATURES]], y: &[bool], params: &RankParams) -> Result<Trained, RankError> {
    params.validate()?;
    if x.len() != y.len() {
        return Err(RankError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(RankError::TooFewRows(x.len()));
    }
    if let Some(i) = x.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(RankError::NonFinite(i));
    }
    let positives = y.iter().filter(|&&b| b).count();
    let base_score = logit(positives as f64 / y.len() as f64);
    let mut model = RankModel {
        params: *params,
        base_score,
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        trees: Vec::with_capacity(params.rounds),
    };
    if positives == 0 || positives == y.len() {
        return Ok(Trained {
            model,
            degenerate: true,
        });
    }

    let sorted = tree::presort(x);
    let mut margin = vec![base_score; x.len()];
    let mut grad = vec![0.0; x.len()];
    let mut hess = vec![0.0; x.len()];
    for _ in 0..params.rounds {
        for i in 0..x.len() {
            let p = logistic(margin[i]);
            grad[i] = p - if y[i] { 1.0 } else { 0.0 };
            hess[i] = p * (1.0 - p);
        }
        let t = tree::build_tree(x, &grad, &hess, &sorted, params);
        for (m, row) in margin.iter_mut().zip(x) {
            *m += t.predict(row);
        }
        model.trees.push(t);
    }
    Ok(Trained {
        model,
        degenerate: false,
    })
}

impl RankModel {
    /// A model with no trees that always predicts `logistic(base_score)`.
    pub fn constant(base_score: f64) -> RankModel {
        RankModel {
            params: RankParams::default(),
            base_score,
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            trees: Vec::new(),
        }
    }

    /// Margin using only the first `n_trees` trees.
    pub fn margin_with(&self, x: &[f64; N_FEATURES], n_trees: usize) -> f64 {
        self.base_score + self.trees.iter().take(n_trees).map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn predict_array(&self, x: &[f64; N_FEATURES]) -> f64 {
        logistic(self.margin_with(x, self.trees.len()))
    }

    pub fn predict(&self, fv: &FeatureVector) -> f64 {
        self.predict_array(&fv.to_array())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub sha: String,
    pub probability: f64,
    pub features: FeatureVector,
    /// 1-based.
    pub rank_position: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub advisory_id: String,
    pub entries: Vec<RankedEntry>,
}

impl RankedResult {
    /// 1-based position of `sha`, if ranked.
    pub fn position_of(&self, sha: &str) -> Option<usize> {
        self.entries.iter().find(|e| e.sha == sha).map(|e| e.rank_position)
    }

    pub fn top(&self, k: usize) -> &[RankedEntry] {
        &self.entries[..k.min(self.entries.len())]
    }
}

/// Candidate order: probability descending, then later commits first, then
/// sha ascending.
pub fn candidate_order(a: (&str, f64, &FeatureVector), b: (&str, f64, &FeatureVector)) -> Ordering {
    b.1.total_cmp(&a.1)
        .then(b.2.commit_rank_norm.total_cmp(&a.2.commit_rank_norm))
        .then(a.0.cmp(b.0))
}

/// Rank already-scored candidates.
pub fn rank_scored(advisory_id: &str, scored: Vec<(String, f64, FeatureVector)>) -> RankedResult {
    let mut scored = scored;
    scored.sort_by(|a, b| candidate_order((&a.0, a.1, &a.2), (&b.0, b.1, &b.2)));
    RankedResult {
        advisory_id: advisory_id.to_string(),
        entries: scored
            .into_iter()
            .enumerate()
            .map(|(i, (sha, probability, features))| RankedEntry {
                sha,
                probability,
                features,
                rank_position: i + 1,
            })
            .collect(),
    }
}

pub fn rank(model: &RankModel, advisory_id: &str, vectors: Vec<(String, FeatureVector)>) -> RankedResult {
    let scored = vectors
        .into_iter()
        .map(|(sha, fv)| {
            let p = model.predict(&fv);
            (sha, p, fv)
        })
        .collect();
    rank_scored(advisory_id, scored)
}
