//! Model file format: a pretty-printed JSON document followed by a line
//! `checksum <16 hex digits>` holding the FNV-1a 64-bit hash of the JSON
//! bytes. Floats are written in shortest round-trip form, so a save/load
//! cycle reproduces every parameter bit for bit.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use super::{RankModel, RankParams, Tree};
use crate::features::{FEATURE_NAMES, N_FEATURES};

pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_PREFIX: &str = "checksum ";

#[derive(Debug, thiserror::Error)]
pub enum ModelIoError {
    #[error("model I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt model: {0}")]
    CorruptModel(String),
    #[error("unsupported model format version {found} (expected {expected})")]
    VersionMismatch { found: u64, expected: u32 },
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format_version: u32,
    params: RankParams,
    base_score: f64,
    feature_names: Vec<String>,
    trees: Vec<Tree>,
}

fn checksum(body: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(body);
    h.finish()
}

pub fn model_to_string(model: &RankModel) -> String {
    let doc = ModelDoc {
        format_version: FORMAT_VERSION,
        params: model.params,
        base_score: model.base_score,
        feature_names: model.feature_names.clone(),
        trees: model.trees.clone(),
    };
    let body = serde_json::to_string_pretty(&doc).expect("model serializes");
    format!("{body}\n{CHECKSUM_PREFIX}{:016x}\n", checksum(body.as_bytes()))
}

pub fn model_from_str(text: &str) -> Result<RankModel, ModelIoError> {
    let corrupt = |m: String| ModelIoError::CorruptModel(m);
    let trimmed = text.strip_suffix('\n').unwrap_or(text);
    let (body, last) = trimmed
        .rsplit_once('\n')
        .ok_or_else(|| corrupt("missing checksum line".into()))?;
    let hex = last
        .strip_prefix(CHECKSUM_PREFIX)
        .ok_or_else(|| corrupt("missing checksum line".into()))?;
    let stored = u64::from_str_radix(hex.trim(), 16).map_err(|_| corrupt(format!("bad checksum {hex:?}")))?;
    let actual = checksum(body.as_bytes());
    if stored != actual {
        return Err(corrupt(format!("checksum mismatch: stored {stored:016x}, computed {actual:016x}")));
    }

    let value: serde_json::Value = serde_json::from_str(body).map_err(|e| corrupt(e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| corrupt("missing format_version".into()))?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(ModelIoError::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let doc: ModelDoc = serde_json::from_str(body).map_err(|e| corrupt(e.to_string()))?;
    let model = RankModel {
        params: doc.params,
        base_score: doc.base_score,
        feature_names: doc.feature_names,
        trees: doc.trees,
    };
    validate(&model).map_err(corrupt)?;
    Ok(model)
}

fn validate(model: &RankModel) -> Result<(), String> {
    if model.feature_names != FEATURE_NAMES {
        return Err(format!("unexpected feature names {:?}", model.feature_names));
    }
    if !model.base_score.is_finite() {
        return Err("non-finite base score".into());
    }
    if model.trees.len() > model.params.rounds {
        return Err(format!("{} trees exceed {} rounds", model.trees.len(), model.params.rounds));
    }
    for (t, tree) in model.trees.iter().enumerate() {
        if tree.nodes.is_empty() {
            return Err(format!("tree {t} is empty"));
        }
        for (i, n) in tree.nodes.iter().enumerate() {
            if n.is_leaf {
                if !n.leaf_value.is_finite() {
                    return Err(format!("tree {t} node {i}: non-finite leaf"));
                }
                continue;
            }
            let (l, r) = (n.left as usize, n.right as usize);
            // children after their parent rules out cycles
            if n.feature >= N_FEATURES || l <= i || r <= i || l >= tree.nodes.len() || r >= tree.nodes.len() {
                return Err(format!("tree {t} node {i}: bad split node"));
            }
            if !n.threshold.is_finite() {
                return Err(format!("tree {t} node {i}: non-finite threshold"));
            }
        }
        if tree.depth() > model.params.max_depth {
            return Err(format!("tree {t} deeper than max_depth"));
        }
    }
    Ok(())
}

pub fn save_model(model: &RankModel, path: &Path) -> Result<(), ModelIoError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, model_to_string(model))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<RankModel, ModelIoError> {
    model_from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranker::train;

    fn model() -> RankModel {
        let x: Vec<[f64; 7]> = (0..40)
            .map(|i| {
                let mut r = [0.0; 7];
                r[0] = (i as f64 * 0.37).sin().abs();
                r[6] = i as f64 / 40.0;
                r
            })
            .collect();
        let y: Vec<bool> = x.iter().map(|r| r[0] + 0.3 * r[6] > 0.6).collect();
        let params = RankParams { rounds: 25, learning_rate: 0.1, ..RankParams::default() };
        train(&x, &y, &params).unwrap().model
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let text = model_to_string(&m);
        let back = model_from_str(&text).unwrap();
        assert_eq!(back, m);
        for t in 0..40 {
            let x = [t as f64 / 40.0, 0.0, 1.0, 0.2, 0.0, 1.0, 0.5];
            assert_eq!(back.predict_array(&x).to_bits(), m.predict_array(&x).to_bits());
        }
        assert_eq!(model_to_string(&back), text);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.model");
        save_model(&m, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }

    #[test]
    fn detects_tampering() {
        let text = model_to_string(&model());
        let tampered = text.replacen("\"base_score\": ", "\"base_score\": 1", 1);
        assert!(matches!(model_from_str(&tampered), Err(ModelIoError::CorruptModel(m)) if m.contains("checksum")));
        let truncated = text.lines().next().unwrap();
        assert!(matches!(model_from_str(truncated), Err(ModelIoError::CorruptModel(_))));
    }

    #[test]
    fn rejects_other_versions() {
        let text = model_to_string(&model());
        let body = text.rsplit_once("\nchecksum").unwrap().0.replacen(
            "\"format_version\": 1",
            "\"format_version\": 2",
            1,
        );
        let forged = format!("{body}\nchecksum {:016x}\n", checksum(body.as_bytes()));
        assert!(matches!(
            model_from_str(&forged),
            Err(ModelIoError::VersionMismatch { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn rejects_structurally_invalid_trees() {
        let mut m = model();
        m.trees[0].nodes[0].left = 0;
        let text = model_to_string(&m);
        assert!(matches!(model_from_str(&text), Err(ModelIoError::CorruptModel(_))));
    }
}
