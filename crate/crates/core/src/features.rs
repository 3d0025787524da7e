//! The seven ranking features of an (advisory, commit) pair.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::advisory::{owasp_class_of, Advisory, CweOwaspMap, OwaspClass};
use crate::encoder::{encode_file_chunk, HashTokenizer, TokenizerProvider, DEFAULT_MAX_LEN};
use crate::provider::ProviderError;
use crate::similarity::{advisory_text, cosine, CosineError, EmbeddingProvider, HashEmbedder};
use crate::type_score::{type_match_features, ReferenceTypeProvider, TypeScoreProvider};
use crate::vfc_score::{aggregate_commit, FilePrediction, ReferenceVfcProvider, VfcScoreProvider};
use crate::window::{CommitRecord, CommitWindow};

/// Column order of every feature matrix and model file.
pub const FEATURE_NAMES: [&str; 7] = [
    "vfc_probability",
    "type_top1_match",
    "type_top5_match",
    "similarity",
    "cve_in_message",
    "ghsa_in_message",
    "commit_rank_norm",
];
pub const N_FEATURES: usize = FEATURE_NAMES.len();

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("rank {rank} outside 1..={total}")]
    InvalidRank { rank: usize, total: usize },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureVector {
    pub vfc_probability: f64,
    pub type_top1_match: f64,
    pub type_top5_match: f64,
    pub similarity: f64,
    pub cve_in_message: f64,
    pub ghsa_in_message: f64,
    pub commit_rank_norm: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; N_FEATURES] {
        [
            self.vfc_probability,
            self.type_top1_match,
            self.type_top5_match,
            self.similarity,
            self.cve_in_message,
            self.ghsa_in_message,
            self.commit_rank_norm,
        ]
    }

    pub fn from_array(a: [f64; N_FEATURES]) -> Self {
        FeatureVector {
            vfc_probability: a[0],
            type_top1_match: a[1],
            type_top5_match: a[2],
            similarity: a[3],
            cve_in_message: a[4],
            ghsa_in_message: a[5],
            commit_rank_norm: a[6],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

/// True when `needle` occurs in `haystack` (both already lowercased) with
/// no alphanumeric character directly before or after.
fn contains_bounded(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let is_word = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric());
    haystack.match_indices(needle).any(|(i, m)| {
        !is_word(haystack[..i].chars().next_back()) && !is_word(haystack[i + m.len()..].chars().next())
    })
}

/// `(cve_in_message, ghsa_in_message)` for the advisory's own CVE- and
/// GHSA- identifiers, case-insensitive.
pub fn detect_ids(message: &str, advisory: &Advisory) -> (u8, u8) {
    let msg = message.to_lowercase();
    let mut cve = 0;
    let mut ghsa = 0;
    for id in advisory.identifiers() {
        let id = id.to_lowercase();
        let slot = if id.starts_with("cve-") {
            &mut cve
        } else if id.starts_with("ghsa-") {
            &mut ghsa
        } else {
            continue;
        };
        if *slot == 0 && contains_bounded(&msg, &id) {
            *slot = 1;
        }
    }
    (cve, ghsa)
}

pub fn commit_rank_norm(rank: usize, total: usize) -> Result<f64, FeatureError> {
    if rank == 0 || rank > total {
        return Err(FeatureError::InvalidRank { rank, total });
    }
    Ok(rank as f64 / total as f64)
}

/// The scoring components shared by every assembly.
#[derive(Clone)]
pub struct Providers {
    pub tokenizer: Arc<dyn TokenizerProvider>,
    pub vfc: Arc<dyn VfcScoreProvider>,
    pub types: Arc<dyn TypeScoreProvider>,
    pub embedder: Arc<dyn EmbeddingProvider>,
    pub max_len: usize,
}

impl Providers {
    /// The deterministic built-in lexicon scorers and hashed embeddings.
    pub fn reference() -> Self {
        Providers {
            tokenizer: Arc::new(HashTokenizer::default()),
            vfc: Arc::new(ReferenceVfcProvider::default()),
            types: Arc::new(ReferenceTypeProvider::default()),
            embedder: Arc::new(HashEmbedder::default()),
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

impl std::fmt::Debug for Providers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Providers").field("max_len", &self.max_len).finish_non_exhaustive()
    }
}

/// Per-advisory values computed once and reused for every commit.
#[derive(Debug, Clone)]
pub struct AdvisoryContext {
    pub advisory: Advisory,
    pub class: OwaspClass,
    embedding: Vec<f64>,
}

impl AdvisoryContext {
    pub fn new(
        advisory: Advisory,
        map: &CweOwaspMap,
        providers: &Providers,
    ) -> Result<Self, FeatureError> {
        let class = owasp_class_of(&advisory, map);
        let embedding = providers.embedder.embed(&advisory_text(&advisory))?;
        Ok(AdvisoryContext {
            advisory,
            class,
            embedding,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureFlags {
    /// No file of a study language with a textual diff; probability and
    /// type matches were set to 0.
    pub no_scoreable_files: bool,
    /// An embedding was the zero vector; similarity was set to 0.
    pub zero_vector: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assembled {
    pub vector: FeatureVector,
    pub flags: FeatureFlags,
}

pub fn assemble(
    ctx: &AdvisoryContext,
    commit: &CommitRecord,
    total: usize,
    providers: &Providers,
) -> Result<Assembled, FeatureError> {
    let mut flags = FeatureFlags::default();
    let mut preds = Vec::new();
    let mut dists = Vec::new();
    for (i, file) in commit.scoreable_files() {
        let chunk = encode_file_chunk(
            &commit.message,
            file,
            i,
            providers.tokenizer.as_ref(),
            providers.max_len,
        );
        preds.push(FilePrediction {
            file_index: i,
            probability: providers.vfc.score(&chunk)?,
        });
        dists.push(providers.types.distribution(&chunk)?);
    }
    let (vfc_probability, (top1, top5)) = match aggregate_commit(&preds) {
        Ok(p) => (p, type_match_features(ctx.class, &dists).unwrap_or((0, 0))),
        Err(_) => {
            flags.no_scoreable_files = true;
            (0.0, (0, 0))
        }
    };
    let message_embedding = providers.embedder.embed(&commit.message)?;
    let similarity = match cosine(&ctx.embedding, &message_embedding) {
        Ok(s) => s,
        Err(CosineError::ZeroVector) => {
            flags.zero_vector = true;
            0.0
        }
        Err(e) => return Err(ProviderError::Protocol(e.to_string()).into()),
    };
    let (cve, ghsa) = detect_ids(&commit.message, &ctx.advisory);
    Ok(Assembled {
        vector: FeatureVector {
            vfc_probability,
            type_top1_match: f64::from(top1),
            type_top5_match: f64::from(top5),
            similarity,
            cve_in_message: f64::from(cve),
            ghsa_in_message: f64::from(ghsa),
            commit_rank_norm: commit_rank_norm(commit.rank, total)?,
        },
        flags,
    })
}

/// Features of every commit in the window, in window order.
pub fn assemble_window(
    ctx: &AdvisoryContext,
    window: &CommitWindow,
    providers: &Providers,
) -> Result<Vec<(String, Assembled)>, FeatureError> {
    window
        .commits
        .iter()
        .map(|c| Ok((c.sha.clone(), assemble(ctx, c, window.total(), providers)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::advisory::parse_advisory;
    use crate::window::{FileDiff, VersionTag};

    fn advisory() -> Advisory {
        parse_advisory(
            r#"{"id":"GHSA-fj7c-vg2v-ccrm","aliases":["CVE-2019-9721"],
                "summary":"Cross-site scripting in the comment renderer",
                "database_specific":{"cwe_ids":["CWE-79"]}}"#,
        )
        .unwrap()
    }

    #[test]
    fn id_detection() {
        let a = advisory();
        assert_eq!(detect_ids("Fix GHSA-fj7c-vg2v-ccrm", &a), (0, 1));
        assert_eq!(detect_ids("fixes cve-2019-9721", &a), (1, 0));
        assert_eq!(detect_ids("fixes CVE-2019-9999", &a), (0, 0));
        assert_eq!(detect_ids("see https://nvd.nist.gov/vuln/detail/CVE-2019-9721.", &a), (1, 0));
        assert_eq!(detect_ids("CVE-2019-97210", &a), (0, 0));
    }

    #[test]
    fn rank_norm() {
        assert_eq!(commit_rank_norm(31, 32).unwrap(), 0.96875);
        assert_eq!(commit_rank_norm(7, 7).unwrap(), 1.0);
        assert!(matches!(commit_rank_norm(0, 3), Err(FeatureError::InvalidRank { .. })));
        assert!(matches!(commit_rank_norm(4, 3), Err(FeatureError::InvalidRank { .. })));
    }

    fn window(commits: Vec<CommitRecord>) -> CommitWindow {
        CommitWindow {
            fixed_tag: VersionTag::parse("1.1").unwrap(),
            prior_tag: VersionTag::parse("1.0").unwrap(),
            commits,
        }
    }

    #[test]
    fn assembles_composed_features() {
        let providers = Providers::reference();
        let ctx = AdvisoryContext::new(advisory(), &CweOwaspMap::builtin(), &providers).unwrap();
        assert_eq!(ctx.class, OwaspClass::A03);
        let w = window(vec![
            CommitRecord {
                sha: "1".repeat(40),
                message: "Update docs".into(),
                files: vec![FileDiff::text("README.md", "@@\n+x\n")],
                rank: 1,
            },
            CommitRecord {
                sha: "2".repeat(40),
                message: "Sanitize comment html to prevent xss (GHSA-fj7c-vg2v-ccrm)".into(),
                files: vec![FileDiff::text("src/render.js", "@@ -1 +1 @@\n-out(x)\n+out(escape(x))\n")],
                rank: 2,
            },
        ]);
        let rows = assemble_window(&ctx, &w, &providers).unwrap();
        let (_, docs) = rows[0];
        assert!(docs.flags.no_scoreable_files);
        assert_eq!(docs.vector.vfc_probability, 0.0);
        assert_eq!(docs.vector.commit_rank_norm, 0.5);

        let (_, fix) = rows[1];
        assert!(!fix.flags.no_scoreable_files);
        assert!(fix.vector.vfc_probability > 0.5);
        assert_eq!(fix.vector.ghsa_in_message, 1.0);
        assert_eq!(fix.vector.cve_in_message, 0.0);
        assert_eq!(fix.vector.type_top1_match, 1.0);
        assert_eq!(fix.vector.commit_rank_norm, 1.0);
        assert!(fix.vector.similarity > docs.vector.similarity);

        let again = assemble_window(&ctx, &w, &providers).unwrap();
        assert_eq!(rows, again);
    }

    #[test]
    fn planted_keywords_cross_threshold() {
        // direct provider call: two +2 keywords against a -2 bias
        let providers = Providers::reference();
        let ctx = AdvisoryContext::new(advisory(), &CweOwaspMap::builtin(), &providers).unwrap();
        let c = CommitRecord {
            sha: "3".repeat(40),
            message: "security: block injection".into(),
            files: vec![FileDiff::text("a.py", "@@\n+q = bind(q)\n")],
            rank: 1,
        };
        let got = assemble(&ctx, &c, 1, &providers).unwrap().vector.vfc_probability;
        let chunk = encode_file_chunk(&c.message, &c.files[0], 0, &HashTokenizer::default(), DEFAULT_MAX_LEN);
        let direct = ReferenceVfcProvider::default().score(&chunk).unwrap();
        assert_eq!(got, direct);
        assert!((direct - 1.0 / (1.0 + (-2f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn rank_norm_strictly_increasing_in_window() {
        let total = 17;
        let v: Vec<f64> = (1..=total).map(|r| commit_rank_norm(r, total).unwrap()).collect();
        assert!(v.windows(2).all(|w| w[0] < w[1]));
    }
}
