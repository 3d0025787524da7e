//! Mining plus scoring of one advisory against one repository.

use std::collections::BTreeMap;
use std::path::Path;

use vfcfinder_core::pipeline::{context, mine, rank_advisory, repo_cache_path, Ensemble};
use vfcfinder_core::window::{TagError, WindowError};
use vfcfinder_core::{Advisory, CweOwaspMap, GitRepo, Providers};

use crate::store::{Candidate, CandidateFile, FailureReason};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{reason:?}: {detail}")]
pub struct RankFailure {
    pub reason: FailureReason,
    pub detail: String,
}

impl RankFailure {
    fn new(reason: FailureReason, detail: impl ToString) -> Self {
        RankFailure {
            reason,
            detail: detail.to_string(),
        }
    }
}

pub fn failure_reason(e: &WindowError) -> FailureReason {
    match e {
        WindowError::Tag(TagError::NoPriorTag(_)) => FailureReason::NoPriorTag,
        WindowError::Tag(TagError::FixedTagMissing(_)) => FailureReason::FixedTagMissing,
        WindowError::EmptyWindow { .. } => FailureReason::EmptyWindow,
        WindowError::RepoAccess(_) => FailureReason::RepoUnreachable,
        WindowError::BadRecord { .. } => FailureReason::Internal,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankOutcome {
    /// Every candidate in rank order.
    pub candidates: Vec<Candidate>,
    pub skipped: Vec<(String, FailureReason)>,
}

/// Where the commits come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source<'a> {
    /// An existing local clone.
    Local(&'a Path),
    /// The advisory's repository link, cloned under the cache root.
    Cached(&'a Path),
}

pub fn open_repo(advisory: &Advisory, source: &Source<'_>) -> Result<GitRepo, RankFailure> {
    match source {
        Source::Local(path) => GitRepo::open(*path).map_err(|e| RankFailure::new(FailureReason::RepoUnreachable, e)),
        Source::Cached(root) => {
            let url = advisory
                .repo_url
                .as_deref()
                .ok_or_else(|| RankFailure::new(FailureReason::MissingSource, "advisory has no source repository link"))?;
            let dest = repo_cache_path(root, url)
                .ok_or_else(|| RankFailure::new(FailureReason::MissingSource, format!("unsupported repository link {url}")))?;
            GitRepo::clone_or_open(url, &dest).map_err(|e| RankFailure::new(FailureReason::RepoUnreachable, e))
        }
    }
}

/// Rank every window commit of every fixed version.
pub fn rank_in_repo(
    advisory: &Advisory,
    repo: &GitRepo,
    ensemble: &Ensemble,
    providers: &Providers,
    map: &CweOwaspMap,
) -> Result<RankOutcome, RankFailure> {
    let mined = mine(advisory, repo).map_err(|e| RankFailure::new(failure_reason(&e), e))?;
    if mined.windows.is_empty() {
        return Err(match mined.failures.into_iter().next() {
            Some((fixed, e)) => RankFailure::new(failure_reason(&e), format!("{fixed}: {e}")),
            None => RankFailure::new(FailureReason::FixedTagMissing, "advisory lists no fixed version"),
        });
    }
    let skipped = mined
        .failures
        .iter()
        .map(|(fixed, e)| (fixed.clone(), failure_reason(e)))
        .collect();
    let ctx = context(advisory, map, providers).map_err(|e| RankFailure::new(FailureReason::Internal, e))?;
    let ranked = rank_advisory(ensemble, &ctx, &mined.windows, providers)
        .map_err(|e| RankFailure::new(FailureReason::Internal, e))?;

    // first window wins, as in candidate feature assembly
    let mut origin = BTreeMap::new();
    for w in &mined.windows {
        for c in &w.commits {
            origin.entry(c.sha.as_str()).or_insert((w.fixed_tag.raw.as_str(), c));
        }
    }
    let candidates = ranked
        .entries
        .iter()
        .map(|e| {
            let (fixed, commit) = origin[e.sha.as_str()];
            let files = commit
                .files
                .iter()
                .map(|f| CandidateFile::new(&f.path, f.language.name(), f.additions, f.deletions, &f.patch_text))
                .collect();
            Candidate::from_entry(e, fixed, &commit.message, files)
        })
        .collect();
    Ok(RankOutcome { candidates, skipped })
}
