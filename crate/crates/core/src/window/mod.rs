//! Commit windows between a fixed release tag and the tag before it.

mod diff;
mod git;
mod version;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

pub use diff::{parse_patch, DiffKind, FileDiff, Language};
pub use git::GitRepo;
pub use version::{
    find_fixed, select_prior, sort_tags, PreKind, SortedTags, TagError, VersionKey, VersionTag,
};

/// Windows above this size are mined but flagged.
pub const LARGE_WINDOW: usize = 5_000;

#[derive(Debug, thiserror::Error)]
pub enum WindowError {
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error("no commits between {prior} and {fixed}")]
    EmptyWindow { prior: String, fixed: String },
    #[error("repository access failed: {0}")]
    RepoAccess(String),
    #[error("bad interchange record on line {line}: {reason}")]
    BadRecord { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub sha: String,
    pub message: String,
    pub files: Vec<FileDiff>,
    /// 1-based position in the window, oldest first.
    pub rank: usize,
}

impl CommitRecord {
    pub fn scoreable_files(&self) -> impl Iterator<Item = (usize, &FileDiff)> {
        self.files.iter().enumerate().filter(|(_, f)| f.is_scoreable())
    }

    pub fn touches_study_language(&self) -> bool {
        self.files.iter().any(|f| f.language != Language::Other)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitWindow {
    pub fixed_tag: VersionTag,
    pub prior_tag: VersionTag,
    pub commits: Vec<CommitRecord>,
}

impl CommitWindow {
    pub fn total(&self) -> usize {
        self.commits.len()
    }

    pub fn is_large(&self) -> bool {
        self.total() > LARGE_WINDOW
    }

    pub fn commit(&self, sha: &str) -> Option<&CommitRecord> {
        self.commits.iter().find(|c| c.sha == sha)
    }
}

/// Commits reachable from `fixed` but not from `prior`, oldest first.
pub fn enumerate_window(
    repo: &GitRepo,
    prior: &VersionTag,
    fixed: &VersionTag,
) -> Result<CommitWindow, WindowError> {
    let range = format!("refs/tags/{}..refs/tags/{}", prior.raw, fixed.raw);
    let commits = repo.commits(&[&range])?;
    if commits.is_empty() {
        return Err(WindowError::EmptyWindow {
            prior: prior.raw.clone(),
            fixed: fixed.raw.clone(),
        });
    }
    Ok(CommitWindow {
        fixed_tag: fixed.clone(),
        prior_tag: prior.clone(),
        commits,
    })
}

/// A fixed version with its window or the reason it has none.
pub type FixedWindow = (String, Result<CommitWindow, WindowError>);

/// Window for each fixed version of an advisory, in the advisory's order.
pub fn windows_for_fixed_versions(repo: &GitRepo, fixed_versions: &[String]) -> Result<Vec<FixedWindow>, WindowError> {
    let tags = sort_tags(&repo.tags()?);
    Ok(fixed_versions
        .iter()
        .map(|fixed| {
            let window = find_fixed(fixed, &tags.tags)
                .and_then(|f| Ok((f, select_prior(fixed, &tags.tags)?)))
                .map_err(WindowError::from)
                .and_then(|(f, prior)| enumerate_window(repo, prior, f));
            (fixed.clone(), window)
        })
        .collect())
}

/// One line of the window interchange format: a single file diff of a
/// commit. Commits without file changes get one record with `path: null`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub advisory_id: String,
    pub fixed_tag: String,
    pub prior_tag: String,
    pub total: usize,
    pub sha: String,
    pub rank: usize,
    pub path: Option<String>,
    pub language: Language,
    pub message: String,
    pub patch_text: String,
    pub additions: u32,
    pub deletions: u32,
    pub kind: DiffKind,
}

pub fn write_window_records<W: Write>(
    out: &mut W,
    advisory_id: &str,
    window: &CommitWindow,
) -> std::io::Result<()> {
    for commit in &window.commits {
        let base = |path: Option<String>, f: Option<&FileDiff>| WindowRecord {
            advisory_id: advisory_id.to_string(),
            fixed_tag: window.fixed_tag.raw.clone(),
            prior_tag: window.prior_tag.raw.clone(),
            total: window.total(),
            sha: commit.sha.clone(),
            rank: commit.rank,
            path,
            language: f.map_or(Language::Other, |f| f.language),
            message: commit.message.clone(),
            patch_text: f.map(|f| f.patch_text.clone()).unwrap_or_default(),
            additions: f.map_or(0, |f| f.additions),
            deletions: f.map_or(0, |f| f.deletions),
            kind: f.map_or(DiffKind::MetadataOnly, |f| f.kind),
        };
        let records: Vec<WindowRecord> = if commit.files.is_empty() {
            vec![base(None, None)]
        } else {
            commit
                .files
                .iter()
                .map(|f| base(Some(f.path.clone()), Some(f)))
                .collect()
        };
        for r in records {
            serde_json::to_writer(&mut *out, &r)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reassemble windows from interchange records, keyed by advisory id in
/// first-seen order.
pub fn read_window_records<R: BufRead>(
    input: R,
) -> Result<Vec<(String, CommitWindow)>, WindowError> {
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut windows: BTreeMap<(String, String, String), CommitWindow> = BTreeMap::new();
    for (n, line) in input.lines().enumerate() {
        let bad = |reason: String| WindowError::BadRecord { line: n + 1, reason };
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: WindowRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let key = (r.advisory_id.clone(), r.fixed_tag.clone(), r.prior_tag.clone());
        if !windows.contains_key(&key) {
            let fixed_tag = VersionTag::parse(&r.fixed_tag)
                .ok_or_else(|| bad(format!("unparseable tag {}", r.fixed_tag)))?;
            let prior_tag = VersionTag::parse(&r.prior_tag)
                .ok_or_else(|| bad(format!("unparseable tag {}", r.prior_tag)))?;
            order.push(key.clone());
            windows.insert(
                key.clone(),
                CommitWindow {
                    fixed_tag,
                    prior_tag,
                    commits: Vec::new(),
                },
            );
        }
        let window = windows.get_mut(&key).expect("inserted above");
        if window.commits.last().map(|c| &c.sha) != Some(&r.sha) {
            if r.rank != window.commits.len() + 1 {
                return Err(bad(format!(
                    "rank {} out of sequence (expected {})",
                    r.rank,
                    window.commits.len() + 1
                )));
            }
            window.commits.push(CommitRecord {
                sha: r.sha.clone(),
                message: r.message.clone(),
                files: Vec::new(),
                rank: r.rank,
            });
        }
        if let Some(path) = r.path {
            window.commits.last_mut().expect("pushed above").files.push(FileDiff {
                path,
                language: r.language,
                patch_text: r.patch_text,
                additions: r.additions,
                deletions: r.deletions,
                kind: r.kind,
            });
        }
    }
    Ok(order
        .into_iter()
        .map(|key| {
            let w = windows.remove(&key).expect("present");
            (key.0, w)
        })
        .collect())
}
