//! Match security advisories to the commits that fixed them.
//!
//! The pipeline reads an OSV advisory, finds the release tag that carries
//! the fix and the tag before it, mines every commit in between, scores each
//! commit on seven features and ranks them with a gradient-boosted tree
//! ensemble. Scoring components sit behind provider traits so that the
//! built-in lexicon scorers can be swapped for external models.

pub mod advisory;
pub mod dataset;
pub mod encoder;
pub mod eval;
pub mod features;
pub mod pipeline;
pub mod provider;
pub mod ranker;
pub mod resolver;
pub mod similarity;
pub mod synthetic;
pub mod type_score;
pub mod vfc_score;
pub mod window;

pub use advisory::{parse_advisory, Advisory, CweOwaspMap, OwaspClass};
pub use encoder::{ChunkEncoding, HashTokenizer};
pub use features::{FeatureVector, Providers, FEATURE_NAMES};
pub use window::{CommitRecord, CommitWindow, FileDiff, GitRepo, Language, VersionTag};
