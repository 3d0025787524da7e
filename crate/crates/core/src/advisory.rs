//! OSV advisory ingestion and CWE to OWASP Top 10 classification.
//!
//! Only the subset of the OSV schema needed to locate a fix is read:
//! identifiers, free text, CWE ids, the affected package, the `fixed`
//! events of ecosystem ranges, and references.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::resolver::github_repo_root;

const BUILTIN_CWE_MAP: &str = include_str!("../data/cwe_owasp.tsv");

#[derive(Debug, thiserror::Error)]
pub enum AdvisoryError {
    #[error("malformed advisory document: {0}")]
    MalformedDocument(String),
    #[error("advisory document has no id")]
    MissingId,
}

#[derive(Debug, thiserror::Error)]
pub enum MapError {
    #[error("line {line}: expected `CWE-<n><TAB><class>`, got {content:?}")]
    BadLine { line: usize, content: String },
    #[error("line {line}: unknown OWASP class {class:?}")]
    UnknownClass { line: usize, class: String },
}

/// OWASP Top 10 (2021) category, plus `Other` for weaknesses outside it.
///
/// Declaration order is the tie-breaking order used throughout scoring.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum OwaspClass {
    A01,
    A02,
    A03,
    A04,
    A05,
    A06,
    A07,
    A08,
    A09,
    A10,
    #[serde(rename = "OTHER")]
    Other,
}

impl OwaspClass {
    pub const ALL: [OwaspClass; 11] = [
        OwaspClass::A01,
        OwaspClass::A02,
        OwaspClass::A03,
        OwaspClass::A04,
        OwaspClass::A05,
        OwaspClass::A06,
        OwaspClass::A07,
        OwaspClass::A08,
        OwaspClass::A09,
        OwaspClass::A10,
        OwaspClass::Other,
    ];

    /// The ten classes a type model is trained on. A06 (vulnerable and
    /// outdated components) has no fixing commits to learn from.
    pub const TRAINED: [OwaspClass; 10] = [
        OwaspClass::A01,
        OwaspClass::A02,
        OwaspClass::A03,
        OwaspClass::A04,
        OwaspClass::A05,
        OwaspClass::A07,
        OwaspClass::A08,
        OwaspClass::A09,
        OwaspClass::A10,
        OwaspClass::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Position within [`OwaspClass::TRAINED`], `None` for A06.
    pub fn trained_index(self) -> Option<usize> {
        match self {
            OwaspClass::A06 => None,
            c if c < OwaspClass::A06 => Some(c as usize),
            c => Some(c as usize - 1),
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            OwaspClass::A01 => "A01",
            OwaspClass::A02 => "A02",
            OwaspClass::A03 => "A03",
            OwaspClass::A04 => "A04",
            OwaspClass::A05 => "A05",
            OwaspClass::A06 => "A06",
            OwaspClass::A07 => "A07",
            OwaspClass::A08 => "A08",
            OwaspClass::A09 => "A09",
            OwaspClass::A10 => "A10",
            OwaspClass::Other => "OTHER",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            OwaspClass::A01 => "Broken Access Control",
            OwaspClass::A02 => "Cryptographic Failures",
            OwaspClass::A03 => "Injection",
            OwaspClass::A04 => "Insecure Design",
            OwaspClass::A05 => "Security Misconfiguration",
            OwaspClass::A06 => "Vulnerable and Outdated Components",
            OwaspClass::A07 => "Identification and Authentication Failures",
            OwaspClass::A08 => "Software and Data Integrity Failures",
            OwaspClass::A09 => "Security Logging and Monitoring Failures",
            OwaspClass::A10 => "Server-Side Request Forgery",
            OwaspClass::Other => "Other",
        }
    }
}

impl fmt::Display for OwaspClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for OwaspClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OwaspClass::ALL
            .into_iter()
            .find(|c| c.code().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| s.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Package {
    pub ecosystem: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Advisory {
    pub id: String,
    /// Other identifiers for the same vulnerability, never equal to `id`.
    pub aliases: Vec<String>,
    pub summary: String,
    pub details: String,
    pub cwe_ids: Vec<String>,
    /// Normalized `https://github.com/<owner>/<repo>` link, when known.
    pub repo_url: Option<String>,
    pub package: Package,
    /// Unique, in document order.
    pub fixed_versions: Vec<String>,
    /// UTC epoch seconds; 0 when the document carries no usable date.
    pub published: i64,
    pub published_missing: bool,
}

impl Advisory {
    /// Type features use the first CWE only; such advisories are kept out of
    /// type-model training.
    pub fn is_multi_cwe(&self) -> bool {
        self.cwe_ids.len() > 1
    }

    /// All CVE- and GHSA-prefixed identifiers, id first.
    pub fn identifiers(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.id.as_str()).chain(self.aliases.iter().map(String::as_str))
    }

    /// Serialize back to an OSV document covering the ingested subset.
    pub fn to_osv(&self) -> Value {
        let mut doc = json!({
            "id": self.id,
            "aliases": self.aliases,
            "summary": self.summary,
            "details": self.details,
            "database_specific": { "cwe_ids": self.cwe_ids },
        });
        if !self.published_missing {
            if let Some(ts) = DateTime::<Utc>::from_timestamp(self.published, 0) {
                doc["published"] = json!(ts.to_rfc3339_opts(SecondsFormat::Secs, true));
            }
        }
        let mut events = vec![json!({ "introduced": "0" })];
        events.extend(self.fixed_versions.iter().map(|v| json!({ "fixed": v })));
        doc["affected"] = json!([{
            "package": { "ecosystem": self.package.ecosystem, "name": self.package.name },
            "ranges": [{ "type": "ECOSYSTEM", "events": events }],
        }]);
        let refs: Vec<Value> = self
            .repo_url
            .iter()
            .map(|url| json!({ "type": "PACKAGE", "url": url }))
            .collect();
        doc["references"] = Value::Array(refs);
        doc
    }
}

#[derive(Deserialize)]
struct OsvDocument {
    id: Option<String>,
    #[serde(default)]
    aliases: Vec<String>,
    summary: Option<String>,
    details: Option<String>,
    published: Option<String>,
    database_specific: Option<Value>,
    #[serde(default)]
    affected: Vec<OsvAffected>,
    #[serde(default)]
    references: Vec<OsvReference>,
}

#[derive(Deserialize)]
struct OsvAffected {
    package: Option<OsvPackage>,
    #[serde(default)]
    ranges: Vec<OsvRange>,
}

#[derive(Deserialize)]
struct OsvPackage {
    #[serde(default)]
    ecosystem: String,
    #[serde(default)]
    name: String,
}

#[derive(Deserialize)]
struct OsvRange {
    #[serde(rename = "type", default)]
    kind: String,
    #[serde(default)]
    events: Vec<BTreeMap<String, Value>>,
}

#[derive(Deserialize)]
struct OsvReference {
    #[serde(rename = "type", default)]
    kind: String,
    #[serde(default)]
    url: String,
}

/// Parse an OSV advisory document.
pub fn parse_advisory(document: &str) -> Result<Advisory, AdvisoryError> {
    let doc: OsvDocument = serde_json::from_str(document)
        .map_err(|e| AdvisoryError::MalformedDocument(e.to_string()))?;
    let id = doc.id.map(|s| s.trim().to_string()).unwrap_or_default();
    if id.is_empty() {
        return Err(AdvisoryError::MissingId);
    }

    let mut aliases: Vec<String> = Vec::new();
    for alias in doc.aliases {
        let alias = alias.trim().to_string();
        if !alias.is_empty() && alias != id && !aliases.contains(&alias) {
            aliases.push(alias);
        }
    }

    let cwe_ids = doc
        .database_specific
        .as_ref()
        .and_then(|d| d.get("cwe_ids"))
        .and_then(Value::as_array)
        .map(|ids| {
            ids.iter()
                .filter_map(Value::as_str)
                .map(|s| s.trim().to_ascii_uppercase())
                .filter(|s| !s.is_empty())
                .collect()
        })
        .unwrap_or_default();

    let package = doc
        .affected
        .iter()
        .find_map(|a| a.package.as_ref())
        .map(|p| Package {
            ecosystem: p.ecosystem.clone(),
            name: p.name.clone(),
        })
        .unwrap_or_default();

    let mut fixed_versions: Vec<String> = Vec::new();
    // GIT ranges carry commit hashes, not release versions.
    for range in doc
        .affected
        .iter()
        .flat_map(|a| &a.ranges)
        .filter(|r| !r.kind.eq_ignore_ascii_case("GIT"))
    {
        for fixed in range.events.iter().filter_map(|e| e.get("fixed")) {
            if let Some(v) = fixed.as_str().map(str::trim) {
                if !v.is_empty() && !fixed_versions.iter().any(|f| f == v) {
                    fixed_versions.push(v.to_string());
                }
            }
        }
    }

    let (published, published_missing) = match doc
        .published
        .as_deref()
        .and_then(|p| DateTime::parse_from_rfc3339(p).ok())
    {
        Some(ts) => (ts.with_timezone(&Utc).timestamp(), false),
        None => (0, true),
    };

    Ok(Advisory {
        id,
        aliases,
        summary: doc.summary.unwrap_or_default(),
        details: doc.details.unwrap_or_default(),
        cwe_ids,
        repo_url: repo_url_from_references(&doc.references),
        package,
        fixed_versions,
        published,
        published_missing,
    })
}

fn repo_url_from_references(refs: &[OsvReference]) -> Option<String> {
    let package_first = refs
        .iter()
        .filter(|r| r.kind.eq_ignore_ascii_case("PACKAGE"))
        .chain(refs.iter().filter(|r| !r.kind.eq_ignore_ascii_case("PACKAGE")));
    package_first
        .filter_map(|r| github_repo_root(&r.url))
        .next()
}

/// Commit hashes named by `FIX` references of the form
/// `.../commit/<sha>`; the ground truth for training corpora.
pub fn fix_commits_from_osv(document: &str) -> Result<Vec<String>, AdvisoryError> {
    let doc: OsvDocument = serde_json::from_str(document)
        .map_err(|e| AdvisoryError::MalformedDocument(e.to_string()))?;
    let mut shas = Vec::new();
    for r in doc.references.iter().filter(|r| r.kind.eq_ignore_ascii_case("FIX")) {
        let Some((_, tail)) = r.url.split_once("/commit/") else {
            continue;
        };
        let sha: String = tail.chars().take_while(char::is_ascii_hexdigit).collect();
        if sha.len() >= 7 && !shas.contains(&sha.to_ascii_lowercase()) {
            shas.push(sha.to_ascii_lowercase());
        }
    }
    Ok(shas)
}

/// CWE id to OWASP class lookup table, loaded from an editable data file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CweOwaspMap {
    entries: BTreeMap<String, OwaspClass>,
    pub source_uri: String,
}

impl CweOwaspMap {
    pub fn parse(text: &str, source_uri: impl Into<String>) -> Result<Self, MapError> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || MapError::BadLine {
                line: n + 1,
                content: raw.to_string(),
            };
            let (cwe, class) = line.split_once('\t').ok_or_else(bad)?;
            let cwe = normalize_cwe(cwe).ok_or_else(bad)?;
            let class = class.trim().parse().map_err(|class| MapError::UnknownClass {
                line: n + 1,
                class,
            })?;
            entries.insert(cwe, class);
        }
        Ok(CweOwaspMap {
            entries,
            source_uri: source_uri.into(),
        })
    }

    pub fn load(path: &std::path::Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.display().to_string())
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// The mapping shipped with the crate (OWASP 2021 view).
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_CWE_MAP, "builtin:cwe_owasp.tsv").expect("builtin map parses")
    }

    pub fn get(&self, cwe: &str) -> Option<OwaspClass> {
        normalize_cwe(cwe).and_then(|k| self.entries.get(&k).copied())
    }

    /// Total lookup: unmapped or malformed ids fall back to `Other`.
    pub fn lookup(&self, cwe: &str) -> OwaspClass {
        self.get(cwe).unwrap_or(OwaspClass::Other)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn normalize_cwe(raw: &str) -> Option<String> {
    let raw = raw.trim();
    let digits = raw
        .get(..4)
        .filter(|p| p.eq_ignore_ascii_case("CWE-"))
        .map(|_| &raw[4..])?;
    let n: u32 = digits.parse().ok()?;
    Some(format!("CWE-{n}"))
}

/// OWASP class of the advisory's first CWE; `Other` when it has none.
pub fn owasp_class_of(advisory: &Advisory, map: &CweOwaspMap) -> OwaspClass {
    advisory
        .cwe_ids
        .first()
        .map_or(OwaspClass::Other, |cwe| map.lookup(cwe))
}
