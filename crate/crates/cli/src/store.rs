//! Embedded triage store: an append-only NDJSON event log, fsynced per
//! event and replayed on open. Compaction rewrites the log as the current
//! state and swaps it in with a rename.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vfcfinder_core::ranker::RankedEntry;
use vfcfinder_core::{Advisory, FeatureVector};

/// Compact on open or after an append once the log holds this many more
/// lines than live events.
const COMPACT_SLACK: usize = 1_000;
/// Patch preview lines kept per file.
pub const PREVIEW_LINES: usize = 400;
/// Reviewer name on records written by the store itself.
pub const AUTO_REVIEWER: &str = "auto";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("store line {line} is unreadable: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("advisory {0} already stored")]
    DuplicateAdvisory(String),
    #[error("unknown advisory {0}")]
    UnknownAdvisory(String),
    #[error("{sha} is not a ranked candidate of {advisory_id}")]
    UnknownCandidate { advisory_id: String, sha: String },
    #[error("{confirmed} is already confirmed for {advisory_id} {fixed_version}")]
    ConflictingConfirm {
        advisory_id: String,
        fixed_version: String,
        confirmed: String,
    },
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Pending,
    Confirmed,
    Rejected,
    NotInWindow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageRecord {
    pub advisory_id: String,
    /// `None` for a decision about the advisory as a whole.
    pub sha: Option<String>,
    pub fixed_version: Option<String>,
    pub decision: Decision,
    pub reviewer: String,
    pub decided_at: String,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateFile {
    pub path: String,
    pub language: String,
    pub additions: u32,
    pub deletions: u32,
    pub patch_preview: String,
    pub truncated: bool,
}

impl CandidateFile {
    pub fn new(path: &str, language: &str, additions: u32, deletions: u32, patch: &str) -> Self {
        let total = patch.lines().count();
        let preview: Vec<&str> = patch.lines().take(PREVIEW_LINES).collect();
        CandidateFile {
            path: path.to_string(),
            language: language.to_string(),
            additions,
            deletions,
            patch_preview: preview.join("\n"),
            truncated: total > PREVIEW_LINES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub sha: String,
    pub fixed_version: String,
    pub rank_position: usize,
    pub probability: f64,
    pub features: FeatureVector,
    pub message: String,
    pub files: Vec<CandidateFile>,
}

impl Candidate {
    pub fn from_entry(e: &RankedEntry, fixed_version: &str, message: &str, files: Vec<CandidateFile>) -> Self {
        Candidate {
            sha: e.sha.clone(),
            fixed_version: fixed_version.to_string(),
            rank_position: e.rank_position,
            probability: e.probability,
            features: e.features,
            message: message.to_string(),
            files,
        }
    }
}

/// Machine-readable reasons a ranking could not be produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    MissingSource,
    NoPriorTag,
    FixedTagMissing,
    EmptyWindow,
    RepoUnreachable,
    Interrupted,
    Internal,
}

impl FailureReason {
    pub fn code(self) -> &'static str {
        match self {
            FailureReason::MissingSource => "missing_source",
            FailureReason::NoPriorTag => "no_prior_tag",
            FailureReason::FixedTagMissing => "fixed_tag_missing",
            FailureReason::EmptyWindow => "empty_window",
            FailureReason::RepoUnreachable => "repo_unreachable",
            FailureReason::Interrupted => "interrupted",
            FailureReason::Internal => "internal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Ranking {
    Pending {
        job_id: String,
        /// Local repository path given with the request, if any.
        repo: Option<PathBuf>,
    },
    Done {
        job_id: String,
        ranked_at: String,
        candidates: Vec<Candidate>,
        /// Fixed versions that produced no window, with the reason.
        skipped: Vec<(String, FailureReason)>,
    },
    Failed {
        job_id: String,
        reason: FailureReason,
        detail: String,
    },
}

impl Ranking {
    pub fn job_id(&self) -> &str {
        match self {
            Ranking::Pending { job_id, .. } | Ranking::Done { job_id, .. } | Ranking::Failed { job_id, .. } => job_id,
        }
    }
}

fn job_number(job_id: &str) -> usize {
    job_id.rsplit_once('#').and_then(|(_, n)| n.parse().ok()).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Advisory { advisory: Advisory, received_at: String },
    Ranking { advisory_id: String, ranking: Ranking },
    Decision { record: TriageRecord },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueState {
    Pending,
    Reviewed,
    NotInWindow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvisoryEntry {
    pub advisory: Advisory,
    pub received_at: String,
    pub ranking: Option<Ranking>,
    /// Highest job number seen; job ids are `<advisory>#<n>`.
    pub jobs: usize,
    /// Latest record per sha; the advisory-level record under `None`.
    pub decisions: BTreeMap<Option<String>, TriageRecord>,
}

impl AdvisoryEntry {
    pub fn state(&self) -> QueueState {
        if self.decisions.get(&None).is_some_and(|r| r.decision == Decision::NotInWindow) {
            QueueState::NotInWindow
        } else if self.decisions.values().any(|r| r.decision == Decision::Confirmed) {
            QueueState::Reviewed
        } else {
            QueueState::Pending
        }
    }

    pub fn candidates(&self) -> &[Candidate] {
        match &self.ranking {
            Some(Ranking::Done { candidates, .. }) => candidates,
            _ => &[],
        }
    }

    pub fn decision_of(&self, sha: &str) -> Decision {
        self.decisions
            .get(&Some(sha.to_string()))
            .map_or(Decision::Pending, |r| r.decision)
    }

    pub fn confirmed(&self) -> Vec<&TriageRecord> {
        self.decisions
            .values()
            .filter(|r| r.sha.is_some() && r.decision == Decision::Confirmed)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackfillEntry {
    pub advisory_id: String,
    pub confirmed: Vec<String>,
    pub repo_url: Option<String>,
    pub export_ts: String,
}

#[derive(Debug, Clone)]
pub struct DecisionRequest {
    pub advisory_id: String,
    pub sha: Option<String>,
    pub decision: Decision,
    pub reviewer: String,
    pub note: String,
    /// Replace an existing confirmation for the same fixed version.
    pub override_confirm: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionOutcome {
    pub record: TriageRecord,
    /// False when the same decision was already the latest one.
    pub created: bool,
    /// Records written as a side effect.
    pub side_effects: Vec<TriageRecord>,
}

#[derive(Debug)]
pub struct TriageStore {
    path: PathBuf,
    log: File,
    lines: usize,
    advisories: BTreeMap<String, AdvisoryEntry>,
}

impl TriageStore {
    /// Open or create the store at `path`. A torn final line left by a crash
    /// mid-append is cut off; damage anywhere else is an error.
    pub fn open(path: impl Into<PathBuf>) -> Result<TriageStore, StoreError> {
        let path = path.into();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut log = OpenOptions::new().create(true).read(true).append(true).open(&path)?;
        let mut store = TriageStore {
            path,
            log: log.try_clone()?,
            lines: 0,
            advisories: BTreeMap::new(),
        };

        let mut reader = BufReader::new(&mut log);
        let mut good_len = 0u64;
        let mut buf = String::new();
        loop {
            buf.clear();
            let n = reader.read_line(&mut buf)?;
            if n == 0 {
                break;
            }
            // a crash mid-append leaves a final line without its newline
            if !buf.ends_with('\n') {
                break;
            }
            match serde_json::from_str::<Event>(buf.trim_end()) {
                Ok(ev) => {
                    store.apply(ev);
                    store.lines += 1;
                    good_len += n as u64;
                }
                Err(_) if reader.fill_buf()?.is_empty() => break,
                Err(e) => {
                    return Err(StoreError::Corrupt {
                        line: store.lines + 1,
                        reason: e.to_string(),
                    })
                }
            }
        }
        drop(reader);
        if log.seek(SeekFrom::End(0))? != good_len {
            log.set_len(good_len)?;
            log.sync_all()?;
        }
        if store.lines > store.live_events() + COMPACT_SLACK {
            store.compact()?;
        }
        Ok(store)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn live_events(&self) -> usize {
        self.advisories
            .values()
            .map(|e| 1 + usize::from(e.ranking.is_some()) + e.decisions.len())
            .sum()
    }

    fn apply(&mut self, ev: Event) {
        match ev {
            Event::Advisory { advisory, received_at } => {
                self.advisories.insert(
                    advisory.id.clone(),
                    AdvisoryEntry {
                        advisory,
                        received_at,
                        ranking: None,
                        jobs: 0,
                        decisions: BTreeMap::new(),
                    },
                );
            }
            Event::Ranking { advisory_id, ranking } => {
                if let Some(e) = self.advisories.get_mut(&advisory_id) {
                    e.jobs = e.jobs.max(job_number(ranking.job_id()));
                    e.ranking = Some(ranking);
                }
            }
            Event::Decision { record } => {
                if let Some(e) = self.advisories.get_mut(&record.advisory_id) {
                    e.decisions.insert(record.sha.clone(), record);
                }
            }
        }
    }

    fn append(&mut self, ev: Event) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(&ev).map_err(std::io::Error::from)?;
        line.push('\n');
        self.log.write_all(line.as_bytes())?;
        self.log.sync_data()?;
        self.lines += 1;
        self.apply(ev);
        if self.lines > self.live_events() + COMPACT_SLACK {
            self.compact()?;
        }
        Ok(())
    }

    /// Rewrite the log as one event per live value.
    pub fn compact(&mut self) -> Result<(), StoreError> {
        let tmp = self.path.with_extension("compact");
        let mut out = std::io::BufWriter::new(File::create(&tmp)?);
        let mut lines = 0;
        let mut emit = |ev: &Event| -> std::io::Result<()> {
            serde_json::to_writer(&mut out, ev)?;
            out.write_all(b"\n")?;
            lines += 1;
            Ok(())
        };
        for e in self.advisories.values() {
            emit(&Event::Advisory {
                advisory: e.advisory.clone(),
                received_at: e.received_at.clone(),
            })?;
            if let Some(r) = &e.ranking {
                emit(&Event::Ranking {
                    advisory_id: e.advisory.id.clone(),
                    ranking: r.clone(),
                })?;
            }
            for r in e.decisions.values() {
                emit(&Event::Decision { record: r.clone() })?;
            }
        }
        let file = out.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        drop(file);
        std::fs::rename(&tmp, &self.path)?;
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            File::open(dir)?.sync_all()?;
        }
        self.log = OpenOptions::new().read(true).append(true).open(&self.path)?;
        self.lines = lines;
        Ok(())
    }

    pub fn log_lines(&self) -> usize {
        self.lines
    }

    pub fn add_advisory(&mut self, advisory: Advisory, received_at: String) -> Result<(), StoreError> {
        if self.advisories.contains_key(&advisory.id) {
            return Err(StoreError::DuplicateAdvisory(advisory.id));
        }
        self.append(Event::Advisory { advisory, received_at })
    }

    pub fn advisory(&self, id: &str) -> Option<&AdvisoryEntry> {
        self.advisories.get(id)
    }

    pub fn advisories(&self) -> impl Iterator<Item = &AdvisoryEntry> {
        self.advisories.values()
    }

    /// Record a new pending job and return its id.
    pub fn start_ranking(&mut self, advisory_id: &str, repo: Option<PathBuf>) -> Result<String, StoreError> {
        let e = self
            .advisories
            .get(advisory_id)
            .ok_or_else(|| StoreError::UnknownAdvisory(advisory_id.to_string()))?;
        let job_id = format!("{advisory_id}#{}", e.jobs + 1);
        self.append(Event::Ranking {
            advisory_id: advisory_id.to_string(),
            ranking: Ranking::Pending {
                job_id: job_id.clone(),
                repo,
            },
        })?;
        Ok(job_id)
    }

    /// Store the outcome of a job. Outcomes of superseded jobs are dropped.
    pub fn finish_ranking(&mut self, advisory_id: &str, ranking: Ranking) -> Result<bool, StoreError> {
        let e = self
            .advisories
            .get(advisory_id)
            .ok_or_else(|| StoreError::UnknownAdvisory(advisory_id.to_string()))?;
        let current = e.ranking.as_ref().map(Ranking::job_id);
        if current != Some(ranking.job_id()) {
            return Ok(false);
        }
        self.append(Event::Ranking {
            advisory_id: advisory_id.to_string(),
            ranking,
        })?;
        Ok(true)
    }

    /// Apply a reviewer decision.
    ///
    /// A `not_in_window` decision always concerns the whole advisory.
    /// Confirming a candidate rejects the still-pending candidates of the
    /// same fixed version.
    pub fn decide(&mut self, req: DecisionRequest, now: &str) -> Result<DecisionOutcome, StoreError> {
        if req.reviewer.trim().is_empty() {
            return Err(StoreError::InvalidDecision("reviewer is required".into()));
        }
        let entry = self
            .advisories
            .get(&req.advisory_id)
            .ok_or_else(|| StoreError::UnknownAdvisory(req.advisory_id.clone()))?;

        let (sha, fixed_version) = if req.decision == Decision::NotInWindow {
            (None, None)
        } else {
            let sha = req
                .sha
                .clone()
                .ok_or_else(|| StoreError::InvalidDecision("only not_in_window applies to a whole advisory".into()))?;
            let cand = entry
                .candidates()
                .iter()
                .find(|c| c.sha == sha)
                .ok_or_else(|| StoreError::UnknownCandidate {
                    advisory_id: req.advisory_id.clone(),
                    sha: sha.clone(),
                })?;
            (Some(sha), Some(cand.fixed_version.clone()))
        };

        if let Some(prev) = entry.decisions.get(&sha) {
            if prev.decision == req.decision && prev.reviewer == req.reviewer && prev.note == req.note {
                return Ok(DecisionOutcome {
                    record: prev.clone(),
                    created: false,
                    side_effects: Vec::new(),
                });
            }
        }

        let record = TriageRecord {
            advisory_id: req.advisory_id.clone(),
            sha: sha.clone(),
            fixed_version: fixed_version.clone(),
            decision: req.decision,
            reviewer: req.reviewer.clone(),
            decided_at: now.to_string(),
            note: req.note.clone(),
        };
        let mut side = Vec::new();
        if req.decision == Decision::Confirmed {
            let sha = sha.as_deref().expect("confirm has a sha");
            let fixed = fixed_version.as_deref().expect("confirm has a version");
            let same_version = || entry.candidates().iter().filter(|c| c.fixed_version == fixed && c.sha != sha);
            if let Some(other) = same_version().find(|c| entry.decision_of(&c.sha) == Decision::Confirmed) {
                if !req.override_confirm {
                    return Err(StoreError::ConflictingConfirm {
                        advisory_id: req.advisory_id.clone(),
                        fixed_version: fixed.to_string(),
                        confirmed: other.sha.clone(),
                    });
                }
            }
            for c in same_version() {
                let (reviewer, note) = match entry.decision_of(&c.sha) {
                    Decision::Pending => (AUTO_REVIEWER.to_string(), format!("{sha} confirmed")),
                    Decision::Confirmed => (req.reviewer.clone(), format!("superseded by {sha}")),
                    _ => continue,
                };
                side.push(TriageRecord {
                    advisory_id: req.advisory_id.clone(),
                    sha: Some(c.sha.clone()),
                    fixed_version: Some(fixed.to_string()),
                    decision: Decision::Rejected,
                    reviewer,
                    decided_at: now.to_string(),
                    note,
                });
            }
        }
        // the confirmation goes first so a crash never leaves only the
        // rejections behind
        self.append(Event::Decision { record: record.clone() })?;
        for r in &side {
            self.append(Event::Decision { record: r.clone() })?;
        }
        Ok(DecisionOutcome {
            record,
            created: true,
            side_effects: side,
        })
    }

    /// Every advisory with at least one confirmed commit.
    pub fn export(&self, export_ts: &str) -> Vec<BackfillEntry> {
        self.advisories
            .values()
            .filter_map(|e| {
                let confirmed: Vec<String> = e.confirmed().iter().filter_map(|r| r.sha.clone()).collect();
                (!confirmed.is_empty()).then(|| BackfillEntry {
                    advisory_id: e.advisory.id.clone(),
                    confirmed,
                    repo_url: e.advisory.repo_url.clone(),
                    export_ts: export_ts.to_string(),
                })
            })
            .collect()
    }
}
