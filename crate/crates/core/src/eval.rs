//! Ranking and classification metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ranker::RankedResult;

pub const TOP_N: [usize; 4] = [1, 2, 3, 5];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("no results to evaluate")]
    EmptyResults,
    #[error("empty input")]
    EmptyInput,
    #[error("predictions and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("only one class present")]
    SingleClass,
    #[error("advisory {0} has no true fixing commit")]
    NoTruth(String),
}

/// A ranking together with the commits known to fix the advisory.
#[derive(Debug, Clone, PartialEq)]
pub struct Judged<'a> {
    pub result: &'a RankedResult,
    pub truth: &'a BTreeSet<String>,
}

impl Judged<'_> {
    /// Best (lowest) position of any true commit in the ranking.
    pub fn best_position(&self) -> Option<usize> {
        self.result
            .entries
            .iter()
            .filter(|e| self.truth.contains(&e.sha))
            .map(|e| e.rank_position)
            .min()
    }
}

/// Share of advisories with some true commit within the first `n`
/// positions, over all advisories.
pub fn topn_recall(results: &[Judged<'_>], n: usize) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    for j in results {
        if j.truth.is_empty() {
            return Err(EvalError::NoTruth(j.result.advisory_id.clone()));
        }
    }
    let hits = results
        .iter()
        .filter(|j| j.best_position().is_some_and(|p| p <= n))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// As [`topn_recall`], but only over advisories whose true commit was
/// ranked at all (it lay inside the mined window).
pub fn topn_recall_found(results: &[Judged<'_>], n: usize) -> Result<f64, EvalError> {
    let found: Vec<Judged<'_>> = results
        .iter()
        .filter(|j| j.best_position().is_some())
        .cloned()
        .collect();
    topn_recall(&found, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Classes without support, left out of the macro means.
    pub skipped_classes: Vec<usize>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics from a confusion matrix (`counts[true][pred]`).
pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<ClassificationMetrics, EvalError> {
    let k = cm.counts.len();
    let total: u64 = cm.counts.iter().flatten().sum();
    if total == 0 {
        return Err(EvalError::EmptyInput);
    }
    let correct: u64 = (0..k).map(|c| cm.counts[c][c]).sum();
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.counts[c][c];
        let support: u64 = cm.counts[c].iter().sum();
        let predicted: u64 = (0..k).map(|r| cm.counts[r][c]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support,
        });
    }
    let supported: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
    let n = supported.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| supported.iter().map(|m| f(m)).sum::<f64>() / n;
    let wmean = |f: fn(&ClassMetrics) -> f64| {
        per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64
    };
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / total as f64,
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        weighted_precision: wmean(|m| m.precision),
        weighted_recall: wmean(|m| m.recall),
        weighted_f1: wmean(|m| m.f1),
        skipped_classes: (0..k).filter(|&c| per_class[c].support == 0).collect(),
        per_class,
    })
}

/// Standard precision/recall/F1 over class indices `0..n_classes`.
pub fn classification_metrics(
    preds: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<ClassificationMetrics, EvalError> {
    metrics_from_confusion(&confusion_matrix(preds, labels, n_classes)?)
}

/// Area under the ROC curve as the Mann-Whitney statistic
/// `P(s+ > s-) + P(s+ = s-)/2`, computed with mid-ranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, using mid-ranks for ties
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        let pos = idx[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum2 += pos * mid2;
        i = j + 1;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    // U = R - p(p+1)/2; AUC = U / (p q); all kept in integers until the end
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * q) as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[true_class][predicted_class]`
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    /// Each row divided by its sum; all-zero rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter().map(|&c| ratio(c, s)).collect()
            })
            .collect()
    }

    pub fn row_support(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<ConfusionMatrix, EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut counts = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &t) in preds.iter().zip(labels) {
        assert!(p < n_classes && t < n_classes, "class index out of range");
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// Binary metrics block (positive class = fixing commit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub rows: usize,
    pub metrics: ClassificationMetrics,
    pub auc: Option<f64>,
}

impl MetricBlock {
    pub fn binary(scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricBlock, EvalError> {
        let preds: Vec<usize> = scores.iter().map(|&s| usize::from(s >= threshold)).collect();
        let truth: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
        Ok(MetricBlock {
            rows: scores.len(),
            metrics: classification_metrics(&preds, &truth, 2)?,
            auc: roc_auc(scores, labels).ok(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub advisories: usize,
    /// Advisories whose true commit appeared in the ranking at all.
    pub found: usize,
    pub topn_recall: BTreeMap<usize, f64>,
    pub topn_recall_found: BTreeMap<usize, f64>,
    pub classification: MetricBlock,
    pub confusion: ConfusionMatrix,
    pub class_labels: Vec<String>,
    pub per_language: BTreeMap<String, MetricBlock>,
}

/// A scored row for the classification half of the report.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRow {
    pub score: f64,
    pub label: bool,
    pub languages: Vec<String>,
}

pub fn build_report(
    judged: &[Judged<'_>],
    rows: &[ScoredRow],
    threshold: f64,
) -> Result<EvalReport, EvalError> {
    let mut topn = BTreeMap::new();
    let mut topn_found = BTreeMap::new();
    for n in TOP_N {
        topn.insert(n, topn_recall(judged, n)?);
        if let Ok(v) = topn_recall_found(judged, n) {
            topn_found.insert(n, v);
        }
    }
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = rows.iter().map(|r| r.label).collect();
    let classification = MetricBlock::binary(&scores, &labels, threshold)?;
    let preds: Vec<usize> = scores.iter().map(|&s| usize::from(s >= threshold)).collect();
    let truth: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let confusion = confusion_matrix(&preds, &truth, 2)?;

    let mut by_lang: BTreeMap<String, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for r in rows {
        for l in &r.languages {
            let e = by_lang.entry(l.clone()).or_default();
            e.0.push(r.score);
            e.1.push(r.label);
        }
    }
    let per_language = by_lang
        .into_iter()
        .filter_map(|(l, (s, y))| MetricBlock::binary(&s, &y, threshold).ok().map(|b| (l, b)))
        .collect();

    Ok(EvalReport {
        advisories: judged.len(),
        found: judged.iter().filter(|j| j.best_position().is_some()).count(),
        topn_recall: topn,
        topn_recall_found: topn_found,
        classification,
        confusion,
        class_labels: vec!["non_vfc".into(), "vfc".into()],
        per_language,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `name value` lines, stable order, for diffing in CI.
    pub fn to_flat_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: f64| {
            let _ = writeln!(out, "{k} {v:.6}");
        };
        line("advisories", self.advisories as f64);
        line("found_in_window", self.found as f64);
        for (n, v) in &self.topn_recall {
            line(&format!("top{n}_recall"), *v);
        }
        for (n, v) in &self.topn_recall_found {
            line(&format!("top{n}_recall_found"), *v);
        }
        let block = |out: &mut dyn FnMut(&str, f64), prefix: &str, b: &MetricBlock| {
            let m = &b.metrics;
            out(&format!("{prefix}accuracy"), m.accuracy);
            out(&format!("{prefix}macro_precision"), m.macro_precision);
            out(&format!("{prefix}macro_recall"), m.macro_recall);
            out(&format!("{prefix}macro_f1"), m.macro_f1);
            out(&format!("{prefix}weighted_precision"), m.weighted_precision);
            out(&format!("{prefix}weighted_recall"), m.weighted_recall);
            out(&format!("{prefix}weighted_f1"), m.weighted_f1);
            if let Some(auc) = b.auc {
                out(&format!("{prefix}auc"), auc);
            }
        };
        block(&mut line, "", &self.classification);
        for (t, row) in self.confusion.counts.iter().enumerate() {
            for (p, c) in row.iter().enumerate() {
                line(&format!("confusion_{}_{}", self.class_labels[t], self.class_labels[p]), *c as f64);
            }
        }
        for (lang, b) in &self.per_language {
            let key = lang.to_lowercase().replace(['/', '+'], "").replace('#', "sharp");
            block(&mut line, &format!("lang_{key}_"), b);
        }
        out
    }
}
