#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::Value;
use tower::ServiceExt;
use vfcfinder_cli::service::{router, AppState, ServiceConfig};
use vfcfinder_core::dataset::contiguous_sample;
use vfcfinder_core::pipeline::{train_on, Ensemble};
use vfcfinder_core::ranker::{RankModel, RankParams};
use vfcfinder_core::synthetic::{generate_corpus, CorpusConfig, SyntheticCorpus};
use vfcfinder_core::{CweOwaspMap, Providers};

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub corpus: SyntheticCorpus,
    pub model: RankModel,
}

impl Fixture {
    /// Synthetic advisories with their repositories under `<dir>/repos`
    /// and a quickly trained model.
    pub fn new(advisories: usize, seed: u64) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig { advisories, seed, ..CorpusConfig::default() };
        let corpus = generate_corpus(&cfg, &dir.path().join("repos")).unwrap();
        let items = corpus.mine().unwrap();
        let rows = contiguous_sample(&items, &CweOwaspMap::builtin(), &Providers::reference()).unwrap();
        let all: BTreeSet<String> = items.iter().map(|i| i.advisory.id.clone()).collect();
        let params = RankParams { rounds: 60, learning_rate: 0.1, ..RankParams::default() };
        let model = train_on(&rows, &all, &params).unwrap().model;
        Fixture { dir, corpus, model }
    }

    pub fn repos(&self) -> PathBuf {
        self.dir.path().join("repos")
    }

    pub fn store_path(&self) -> PathBuf {
        self.dir.path().join("store").join("triage.ndjson")
    }

    pub fn config(&self) -> ServiceConfig {
        let mut cfg = ServiceConfig::new(self.repos());
        cfg.model = Some(Ensemble::single(self.model.clone()));
        cfg
    }

    pub fn app(&self) -> Router {
        router(AppState::open(self.store_path(), self.config()).unwrap())
    }
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, Body::from))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into_owned()))
    };
    (status, value)
}

/// Poll the candidates endpoint until the ranking job settles.
pub async fn settled_candidates(app: &Router, id: &str, k: usize) -> (StatusCode, Value) {
    for _ in 0..600 {
        let (status, body) = call(app, "GET", &format!("/advisories/{id}/candidates?k={k}"), None).await;
        if status != StatusCode::ACCEPTED {
            return (status, body);
        }
        tokio::time::sleep(std::time::Duration::from_millis(20)).await;
    }
    panic!("ranking of {id} never finished");
}

pub fn decision(decision: &str, reviewer: &str) -> Option<String> {
    Some(serde_json::json!({ "decision": decision, "reviewer": reviewer }).to_string())
}

pub fn write_file(path: &Path, text: &str) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, text).unwrap();
}
