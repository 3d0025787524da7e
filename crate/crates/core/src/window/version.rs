//! Release tag parsing and ordering.
//!
//! Ordering follows the usual Python `packaging` rules for the forms that
//! appear as git tags: numeric release components compared numerically with
//! trailing zeros ignored, then dev < pre-release < release < post-release.

use std::cmp::Ordering;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

static VERSION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?ix)^
        v?
        (?P<release>\d+(?:\.\d+)*)
        (?:[-_.]?(?P<pre>alpha|a|beta|b|preview|pre|rc|c)[-_.]?(?P<pren>\d+)?)?
        (?:[-_.]?(?P<post>post|rev|r)[-_.]?(?P<postn>\d+)?)?
        (?:[-_.]?(?P<dev>dev)[-_.]?(?P<devn>\d+)?)?
        (?:[-_.](?:final|ga|release))?
        $",
    )
    .unwrap()
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PreKind {
    Alpha,
    Beta,
    Rc,
}

/// Comparable key of a parsed version.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VersionKey {
    /// Release components with trailing zeros removed.
    pub release: Vec<u64>,
    pub pre: Option<(PreKind, u64)>,
    pub post: Option<u64>,
    pub dev: Option<u64>,
}

// Sentinel-wrapped components, mirroring packaging's comparison key.
#[derive(PartialEq, Eq, PartialOrd, Ord)]
enum Bound<T> {
    Low,
    Val(T),
    High,
}

impl VersionKey {
    pub fn parse(text: &str) -> Option<VersionKey> {
        let caps = VERSION.captures(text.trim())?;
        let mut release = caps["release"]
            .split('.')
            .map(|c| c.parse::<u64>().ok())
            .collect::<Option<Vec<_>>>()?;
        while release.len() > 1 && release.last() == Some(&0) {
            release.pop();
        }
        let num = |name: &str| -> Option<u64> {
            match caps.name(name) {
                Some(m) => m.as_str().parse().ok(),
                None => Some(0),
            }
        };
        let pre = match caps.name("pre") {
            Some(m) => {
                let kind = match m.as_str().to_ascii_lowercase().as_str() {
                    "a" | "alpha" => PreKind::Alpha,
                    "b" | "beta" => PreKind::Beta,
                    _ => PreKind::Rc,
                };
                Some((kind, num("pren")?))
            }
            None => None,
        };
        let post = match caps.name("post") {
            Some(_) => Some(num("postn")?),
            None => None,
        };
        let dev = match caps.name("dev") {
            Some(_) => Some(num("devn")?),
            None => None,
        };
        Some(VersionKey {
            release,
            pre,
            post,
            dev,
        })
    }

    pub fn is_prerelease(&self) -> bool {
        self.pre.is_some() || self.dev.is_some()
    }

    fn cmp_key(&self) -> (Bound<(PreKind, u64)>, Bound<u64>, Bound<u64>) {
        let pre = match (self.pre, self.post, self.dev) {
            (None, None, Some(_)) => Bound::Low,
            (None, _, _) => Bound::High,
            (Some(p), _, _) => Bound::Val(p),
        };
        let post = self.post.map_or(Bound::Low, Bound::Val);
        let dev = self.dev.map_or(Bound::High, Bound::Val);
        (pre, post, dev)
    }
}

impl Ord for VersionKey {
    fn cmp(&self, other: &Self) -> Ordering {
        let len = self.release.len().max(other.release.len());
        let component = |v: &Vec<u64>, i: usize| v.get(i).copied().unwrap_or(0);
        (0..len)
            .map(|i| component(&self.release, i).cmp(&component(&other.release, i)))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
            .then_with(|| self.cmp_key().cmp(&other.cmp_key()))
    }
}

impl PartialOrd for VersionKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A git tag together with its parsed version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionTag {
    pub raw: String,
    pub key: VersionKey,
}

impl VersionTag {
    pub fn parse(raw: &str) -> Option<VersionTag> {
        VersionKey::parse(raw).map(|key| VersionTag {
            raw: raw.to_string(),
            key,
        })
    }
}

impl fmt::Display for VersionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SortedTags {
    /// Ascending by version, equal versions ordered by raw tag text.
    pub tags: Vec<VersionTag>,
    /// Tags that do not parse as versions.
    pub rejected: Vec<String>,
}

pub fn sort_tags<S: AsRef<str>>(tags: &[S]) -> SortedTags {
    let mut out = SortedTags::default();
    for raw in tags {
        match VersionTag::parse(raw.as_ref()) {
            Some(tag) => out.tags.push(tag),
            None => out.rejected.push(raw.as_ref().to_string()),
        }
    }
    out.tags
        .sort_by(|a, b| a.key.cmp(&b.key).then_with(|| a.raw.cmp(&b.raw)));
    out
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TagError {
    #[error("fixed version {0:?} matches no tag")]
    FixedTagMissing(String),
    #[error("fixed version {0:?} is the oldest tag")]
    NoPriorTag(String),
}

/// Locate the tag for `fixed` in an ascending tag list. An exact tag name
/// wins over a `v`-prefixed one, which wins over any version-equal tag.
pub fn find_fixed<'a>(fixed: &str, tags: &'a [VersionTag]) -> Result<&'a VersionTag, TagError> {
    let missing = || TagError::FixedTagMissing(fixed.to_string());
    let bare = fixed.trim().trim_start_matches(['v', 'V']);
    if let Some(t) = tags.iter().find(|t| t.raw == fixed) {
        return Ok(t);
    }
    if let Some(t) = tags
        .iter()
        .find(|t| t.raw.trim_start_matches(['v', 'V']) == bare)
    {
        return Ok(t);
    }
    let key = VersionKey::parse(fixed).ok_or_else(missing)?;
    tags.iter().find(|t| t.key == key).ok_or_else(missing)
}

/// Greatest tag strictly below the fixed version.
pub fn select_prior<'a>(fixed: &str, tags: &'a [VersionTag]) -> Result<&'a VersionTag, TagError> {
    let fixed_tag = find_fixed(fixed, tags)?;
    tags.iter()
        .filter(|t| t.key < fixed_tag.key)
        .max_by(|a, b| a.key.cmp(&b.key).then_with(|| a.raw.cmp(&b.raw)))
        .ok_or_else(|| TagError::NoPriorTag(fixed.to_string()))
}
