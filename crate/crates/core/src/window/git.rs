//! Thin wrapper over the `git` command line.

use std::path::{Path, PathBuf};
use std::process::Command;

use super::diff::parse_patch;
use super::{CommitRecord, WindowError};

const COMMIT_MARK: &str = "\x1eVFC-COMMIT\x1f";

/// A local clone. Reads only; one worker should own a handle at a time.
#[derive(Debug, Clone)]
pub struct GitRepo {
    path: PathBuf,
}

impl GitRepo {
    pub fn open(path: impl Into<PathBuf>) -> Result<GitRepo, WindowError> {
        let repo = GitRepo { path: path.into() };
        repo.run(&["rev-parse", "--git-dir"])?;
        Ok(repo)
    }

    /// Clone `url` into `dest` unless a repository is already there.
    pub fn clone_or_open(url: &str, dest: &Path) -> Result<GitRepo, WindowError> {
        if dest.join(".git").exists() || dest.join("HEAD").exists() {
            return GitRepo::open(dest);
        }
        if let Some(parent) = dest.parent() {
            std::fs::create_dir_all(parent).map_err(|e| WindowError::RepoAccess(e.to_string()))?;
        }
        let out = Command::new("git")
            .args(["clone", "--quiet", "--no-checkout", url])
            .arg(dest)
            .output()
            .map_err(|e| WindowError::RepoAccess(format!("git clone: {e}")))?;
        if !out.status.success() {
            return Err(WindowError::RepoAccess(format!(
                "git clone {url}: {}",
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        GitRepo::open(dest)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn run(&self, args: &[&str]) -> Result<Vec<u8>, WindowError> {
        let out = Command::new("git")
            .arg("-C")
            .arg(&self.path)
            .args(["-c", "core.quotepath=off", "-c", "log.showSignature=false"])
            .args(args)
            .output()
            .map_err(|e| WindowError::RepoAccess(format!("git {}: {e}", args.join(" "))))?;
        if !out.status.success() {
            return Err(WindowError::RepoAccess(format!(
                "git {}: {}",
                args.join(" "),
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(out.stdout)
    }

    pub fn tags(&self) -> Result<Vec<String>, WindowError> {
        let out = self.run(&["tag", "--list"])?;
        Ok(String::from_utf8_lossy(&out)
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect())
    }

    /// Commit hash a tag points at (annotated tags are peeled).
    pub fn tag_commit(&self, tag: &str) -> Result<String, WindowError> {
        let spec = format!("refs/tags/{tag}^{{commit}}");
        let out = self.run(&["rev-parse", "--verify", "--quiet", &spec])?;
        Ok(String::from_utf8_lossy(&out).trim().to_string())
    }

    /// Commits of a revision range, oldest first in topological order, with
    /// per-file diffs (merges diffed against their first parent). Ranks are
    /// assigned 1..n in that order.
    pub fn commits(&self, range: &[&str]) -> Result<Vec<CommitRecord>, WindowError> {
        let format = format!("--format={COMMIT_MARK}%H%x1f%B%x1f");
        let mut args = vec![
            "log",
            "--topo-order",
            "--reverse",
            "--no-color",
            "--no-ext-diff",
            "--no-renames",
            "--diff-merges=first-parent",
            "-p",
            format.as_str(),
        ];
        args.extend_from_slice(range);
        args.push("--");
        let out = self.run(&args)?;
        let text = String::from_utf8_lossy(&out);
        let mut commits = Vec::new();
        for chunk in text.split(COMMIT_MARK).skip(1) {
            let mut parts = chunk.splitn(3, '\x1f');
            let sha = parts.next().unwrap_or_default().trim().to_string();
            let message = parts.next().unwrap_or_default().trim_end().to_string();
            let patch = parts.next().unwrap_or_default();
            commits.push(CommitRecord {
                rank: commits.len() + 1,
                sha,
                message,
                files: parse_patch(patch),
            });
        }
        Ok(commits)
    }

    /// Commits reachable from `rev`, oldest first.
    pub fn history(&self, rev: &str) -> Result<Vec<CommitRecord>, WindowError> {
        self.commits(&[rev])
    }
}
