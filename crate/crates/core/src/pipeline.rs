//! Mining, candidate ranking, fold training and holdout evaluation glued
//! together.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::advisory::{Advisory, CweOwaspMap};
use crate::dataset::{AdvisoryWindows, LabeledRow, SplitPlan};
use crate::eval::{build_report, EvalError, EvalReport, Judged, ScoredRow};
use crate::features::{assemble_window, AdvisoryContext, FeatureError, FeatureVector, Providers, N_FEATURES};
use crate::ranker::{rank_scored, train, RankError, RankModel, RankParams, RankedResult, Trained};
use crate::window::{windows_for_fixed_versions, CommitWindow, GitRepo, WindowError};

/// Windows of an advisory, one per fixed version that could be mined.
#[derive(Debug)]
pub struct Mined {
    pub windows: Vec<CommitWindow>,
    /// Fixed versions without a usable window, with the reason.
    pub failures: Vec<(String, WindowError)>,
}

pub fn mine(advisory: &Advisory, repo: &GitRepo) -> Result<Mined, WindowError> {
    let mut mined = Mined {
        windows: Vec::new(),
        failures: Vec::new(),
    };
    for (fixed, w) in windows_for_fixed_versions(repo, &advisory.fixed_versions)? {
        match w {
            Ok(w) => mined.windows.push(w),
            Err(e) => mined.failures.push((fixed, e)),
        }
    }
    Ok(mined)
}

/// Feature vectors for every candidate across all windows. A commit that
/// appears in several windows keeps the features of its first window.
pub fn candidate_features(
    ctx: &AdvisoryContext,
    windows: &[CommitWindow],
    providers: &Providers,
) -> Result<Vec<(String, FeatureVector)>, FeatureError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for w in windows {
        for (sha, a) in assemble_window(ctx, w, providers)? {
            if seen.insert(sha.clone()) {
                out.push((sha, a.vector));
            }
        }
    }
    Ok(out)
}

/// Full hashes of window commits named by `refs`, which may be
/// abbreviated. References outside every window are dropped.
pub fn match_fixes(windows: &[CommitWindow], refs: &[String]) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for r in refs {
        let r = r.to_ascii_lowercase();
        for c in windows.iter().flat_map(|w| &w.commits) {
            if c.sha.starts_with(&r) {
                out.insert(c.sha.clone());
            }
        }
    }
    out
}

/// Where a clone of a `https://github.com/<owner>/<repo>` link lives under
/// `root`.
pub fn repo_cache_path(root: &Path, repo_url: &str) -> Option<PathBuf> {
    let slug = repo_url.strip_prefix("https://github.com/")?;
    let (owner, repo) = slug.split_once('/')?;
    let safe = |s: &str| !s.is_empty() && s != "." && s != ".." && !s.contains(['/', '\\']);
    (safe(owner) && safe(repo)).then(|| root.join(owner).join(repo))
}

/// Fold models whose probabilities are averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub models: Vec<RankModel>,
}

impl Ensemble {
    pub fn single(model: RankModel) -> Self {
        Ensemble { models: vec![model] }
    }

    pub fn predict_array(&self, x: &[f64; N_FEATURES]) -> f64 {
        assert!(!self.models.is_empty(), "empty ensemble");
        self.models.iter().map(|m| m.predict_array(x)).sum::<f64>() / self.models.len() as f64
    }

    pub fn predict(&self, fv: &FeatureVector) -> f64 {
        self.predict_array(&fv.to_array())
    }

    pub fn rank(&self, advisory_id: &str, vectors: Vec<(String, FeatureVector)>) -> RankedResult {
        let scored = vectors
            .into_iter()
            .map(|(sha, fv)| (sha, self.predict(&fv), fv))
            .collect();
        rank_scored(advisory_id, scored)
    }
}

pub fn rank_advisory(
    ensemble: &Ensemble,
    ctx: &AdvisoryContext,
    windows: &[CommitWindow],
    providers: &Providers,
) -> Result<RankedResult, FeatureError> {
    Ok(ensemble.rank(&ctx.advisory.id, candidate_features(ctx, windows, providers)?))
}

fn matrix<'a>(rows: impl Iterator<Item = &'a LabeledRow>) -> (Vec<[f64; N_FEATURES]>, Vec<bool>) {
    rows.map(|r| (r.features.to_array(), r.label)).unzip()
}

/// Train one model on the rows of `advisories`.
pub fn train_on(rows: &[LabeledRow], advisories: &BTreeSet<String>, params: &RankParams) -> Result<Trained, RankError> {
    let (x, y) = matrix(rows.iter().filter(|r| advisories.contains(&r.advisory_id)));
    train(&x, &y, params)
}

/// One model per fold, each trained on the other folds.
pub fn train_cross_validated(
    rows: &[LabeledRow],
    plan: &SplitPlan,
    params: &RankParams,
) -> Result<Vec<Trained>, RankError> {
    (0..plan.folds.len())
        .map(|i| train_on(rows, &plan.corpus_split(i).train, params))
        .collect()
}

/// Rankings of the given advisories from their labeled rows, rows kept
/// once per (advisory, sha).
pub fn rank_rows(
    ensemble: &Ensemble,
    rows: &[LabeledRow],
    advisories: &BTreeSet<String>,
) -> Vec<RankedResult> {
    let mut grouped: BTreeMap<&str, Vec<(String, FeatureVector)>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for r in rows.iter().filter(|r| advisories.contains(&r.advisory_id)) {
        if seen.insert((r.advisory_id.as_str(), r.sha.as_str())) {
            grouped
                .entry(r.advisory_id.as_str())
                .or_default()
                .push((r.sha.clone(), r.features));
        }
    }
    grouped.into_iter().map(|(id, v)| ensemble.rank(id, v)).collect()
}

/// Ranking and classification report over `advisories`. `truth` maps an
/// advisory id to its fixing commits.
pub fn evaluate(
    ensemble: &Ensemble,
    rows: &[LabeledRow],
    advisories: &BTreeSet<String>,
    truth: &BTreeMap<String, BTreeSet<String>>,
    threshold: f64,
) -> Result<EvalReport, EvalError> {
    let results = rank_rows(ensemble, rows, advisories);
    let empty = BTreeSet::new();
    let judged: Vec<Judged<'_>> = results
        .iter()
        .map(|r| Judged {
            result: r,
            truth: truth.get(&r.advisory_id).unwrap_or(&empty),
        })
        .collect();
    let scored: Vec<ScoredRow> = rows
        .iter()
        .filter(|r| advisories.contains(&r.advisory_id))
        .map(|r| ScoredRow {
            score: ensemble.predict(&r.features),
            label: r.label,
            languages: r.languages.iter().map(|l| l.name().to_string()).collect(),
        })
        .collect();
    build_report(&judged, &scored, threshold)
}

pub fn truth_map(items: &[AdvisoryWindows]) -> BTreeMap<String, BTreeSet<String>> {
    items
        .iter()
        .map(|i| (i.advisory.id.clone(), i.vfcs.clone()))
        .collect()
}

/// Advisory context with the class looked up in `map`.
pub fn context(advisory: &Advisory, map: &CweOwaspMap, providers: &Providers) -> Result<AdvisoryContext, FeatureError> {
    AdvisoryContext::new(advisory.clone(), map, providers)
}
