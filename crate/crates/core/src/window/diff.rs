//! Per-file splitting of `git log -p` output.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Languages the scorers are trained on; everything else is `Other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Language {
    #[serde(rename = "C/C++")]
    CCpp,
    Python,
    TypeScript,
    JavaScript,
    Php,
    Java,
    Ruby,
    #[serde(rename = "C#")]
    CSharp,
    Go,
    Other,
}

impl Language {
    pub const ALL: [Language; 10] = [
        Language::CCpp,
        Language::Python,
        Language::TypeScript,
        Language::JavaScript,
        Language::Php,
        Language::Java,
        Language::Ruby,
        Language::CSharp,
        Language::Go,
        Language::Other,
    ];

    pub fn from_path(path: &str) -> Language {
        let ext = Path::new(path)
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        match ext.as_str() {
            "c" | "h" | "cc" | "cpp" | "hpp" => Language::CCpp,
            "py" => Language::Python,
            "ts" | "tsx" => Language::TypeScript,
            "js" | "jsx" => Language::JavaScript,
            "php" => Language::Php,
            "java" => Language::Java,
            "rb" => Language::Ruby,
            "cs" => Language::CSharp,
            "go" => Language::Go,
            _ => Language::Other,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Language::CCpp => "C/C++",
            Language::Python => "Python",
            Language::TypeScript => "TypeScript",
            Language::JavaScript => "JavaScript",
            Language::Php => "PHP",
            Language::Java => "Java",
            Language::Ruby => "Ruby",
            Language::CSharp => "C#",
            Language::Go => "Go",
            Language::Other => "Other",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Language {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Language::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffKind {
    Text,
    Binary,
    /// Mode change, pure rename, or empty file: no hunks.
    MetadataOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDiff {
    pub path: String,
    pub language: Language,
    /// Hunk text starting at the first `@@` line; empty unless `kind` is `Text`.
    pub patch_text: String,
    pub additions: u32,
    pub deletions: u32,
    pub kind: DiffKind,
}

impl FileDiff {
    pub fn text(path: impl Into<String>, patch_text: impl Into<String>) -> FileDiff {
        let path = path.into();
        let patch_text = patch_text.into();
        let (additions, deletions) = count_changes(&patch_text);
        FileDiff {
            language: Language::from_path(&path),
            path,
            kind: if patch_text.is_empty() {
                DiffKind::MetadataOnly
            } else {
                DiffKind::Text
            },
            patch_text,
            additions,
            deletions,
        }
    }

    /// Scored files: a study language with textual changes.
    pub fn is_scoreable(&self) -> bool {
        self.language != Language::Other && self.kind == DiffKind::Text
    }
}

fn count_changes(hunks: &str) -> (u32, u32) {
    let mut adds = 0;
    let mut dels = 0;
    for line in hunks.lines() {
        if line.starts_with('+') {
            adds += 1;
        } else if line.starts_with('-') {
            dels += 1;
        }
    }
    (adds, dels)
}

/// Split the patch portion of one commit into per-file diffs.
pub fn parse_patch(patch: &str) -> Vec<FileDiff> {
    let mut files = Vec::new();
    let mut section: Vec<&str> = Vec::new();
    for line in patch.lines() {
        if line.starts_with("diff --git ") && !section.is_empty() {
            files.extend(parse_section(&section));
            section.clear();
        }
        if line.starts_with("diff --git ") || !section.is_empty() {
            section.push(line);
        }
    }
    if !section.is_empty() {
        files.extend(parse_section(&section));
    }
    files
}

fn strip_prefix_path(raw: &str, prefix: &str) -> Option<String> {
    let raw = raw.split('\t').next().unwrap_or(raw);
    let unquoted = raw.trim_matches('"');
    unquoted.strip_prefix(prefix).map(str::to_string)
}

fn header_path(header: &str) -> Option<String> {
    let rest = header.strip_prefix("diff --git ")?;
    // "a/<p> b/<p>": without renames both halves are the same path.
    let half = rest.len().checked_sub(1)? / 2;
    if rest.len() % 2 == 1 && rest.as_bytes().get(half) == Some(&b' ') {
        let (a, b) = (&rest[..half], &rest[half + 1..]);
        if let (Some(a), Some(b)) = (a.strip_prefix("a/"), b.strip_prefix("b/")) {
            if a == b {
                return Some(b.to_string());
            }
        }
    }
    rest.rsplit_once(" b/").map(|(_, p)| p.to_string())
}

fn parse_section(lines: &[&str]) -> Option<FileDiff> {
    let mut old_path = None;
    let mut new_path = None;
    let mut binary = false;
    let mut hunk_start = None;
    for (i, line) in lines.iter().enumerate().skip(1) {
        if line.starts_with("@@") {
            hunk_start = Some(i);
            break;
        }
        if let Some(p) = line.strip_prefix("--- ") {
            old_path = strip_prefix_path(p, "a/");
        } else if let Some(p) = line.strip_prefix("+++ ") {
            new_path = strip_prefix_path(p, "b/");
        } else if line.starts_with("Binary files ") || line.starts_with("GIT binary patch") {
            binary = true;
        }
    }
    let path = new_path.or(old_path).or_else(|| header_path(lines[0]))?;
    let patch_text = match hunk_start {
        Some(start) if !binary => {
            let mut text = lines[start..].join("\n");
            text.push('\n');
            text
        }
        _ => String::new(),
    };
    let (additions, deletions) = count_changes(&patch_text);
    let kind = if binary {
        DiffKind::Binary
    } else if patch_text.is_empty() {
        DiffKind::MetadataOnly
    } else {
        DiffKind::Text
    };
    Some(FileDiff {
        language: Language::from_path(&path),
        path,
        patch_text,
        additions,
        deletions,
        kind,
    })
}
