//! HTTP triage service over the embedded store.

use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{SecondsFormat, Utc};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use tower_http::services::ServeDir;
use vfcfinder_core::pipeline::Ensemble;
use vfcfinder_core::{parse_advisory, CweOwaspMap, Providers};

use crate::ranking::{open_repo, rank_in_repo, RankFailure, Source};
use crate::store::{
    Decision, DecisionRequest, FailureReason, QueueState, Ranking, StoreError, TriageStore,
};

pub const DEFAULT_WORKERS: usize = 2;
pub const DEFAULT_TOP_K: usize = 5;
/// Suggested ceiling on backfill submissions per day; not enforced.
pub const DAILY_EXPORT_HINT: usize = 10;
pub const STORE_ENV: &str = "VFCFINDER_STORE";

pub struct ServiceConfig {
    pub model: Option<Ensemble>,
    pub providers: Providers,
    pub map: CweOwaspMap,
    /// Clones of advisory repositories, as `<root>/<owner>/<repo>`.
    pub repo_cache: PathBuf,
    pub workers: usize,
    pub ui_dir: Option<PathBuf>,
    /// Rank advisories as soon as they are posted.
    pub auto_rank: bool,
}

impl ServiceConfig {
    pub fn new(repo_cache: PathBuf) -> Self {
        ServiceConfig {
            model: None,
            providers: Providers::reference(),
            map: CweOwaspMap::builtin(),
            repo_cache,
            workers: DEFAULT_WORKERS,
            ui_dir: None,
            auto_rank: true,
        }
    }
}

struct Inner {
    store: RwLock<TriageStore>,
    model: Option<Ensemble>,
    providers: Providers,
    map: CweOwaspMap,
    repo_cache: PathBuf,
    workers: Arc<Semaphore>,
    auto_rank: bool,
    ui_dir: Option<PathBuf>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn error(status: StatusCode, reason: &str, detail: impl ToString) -> Response {
    (status, Json(json!({ "reason": reason, "detail": detail.to_string() }))).into_response()
}

fn store_error(e: StoreError) -> Response {
    match e {
        StoreError::DuplicateAdvisory(_) => error(StatusCode::CONFLICT, "duplicate_advisory", e),
        StoreError::UnknownAdvisory(_) => error(StatusCode::NOT_FOUND, "unknown_advisory", e),
        StoreError::UnknownCandidate { .. } => error(StatusCode::NOT_FOUND, "unknown_candidate", e),
        StoreError::ConflictingConfirm { ref confirmed, .. } => (
            StatusCode::CONFLICT,
            Json(json!({ "reason": "conflicting_confirm", "confirmed_sha": confirmed, "detail": e.to_string() })),
        )
            .into_response(),
        StoreError::InvalidDecision(_) => error(StatusCode::BAD_REQUEST, "invalid_decision", e),
        StoreError::Io(_) | StoreError::Corrupt { .. } => {
            tracing::error!("store failure: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, "store_failure", e)
        }
    }
}

impl AppState {
    /// Open the store and requeue rankings a previous run left pending.
    /// Must be called inside a Tokio runtime.
    pub fn open(store_path: PathBuf, cfg: ServiceConfig) -> Result<AppState, StoreError> {
        let store = TriageStore::open(store_path)?;
        let pending: Vec<(String, Option<PathBuf>)> = store
            .advisories()
            .filter_map(|e| match &e.ranking {
                Some(Ranking::Pending { repo, .. }) => Some((e.advisory.id.clone(), repo.clone())),
                _ => None,
            })
            .collect();
        let state = AppState(Arc::new(Inner {
            store: RwLock::new(store),
            model: cfg.model,
            providers: cfg.providers,
            map: cfg.map,
            repo_cache: cfg.repo_cache,
            workers: Arc::new(Semaphore::new(cfg.workers.max(1))),
            auto_rank: cfg.auto_rank,
            ui_dir: cfg.ui_dir,
        }));
        for (id, repo) in pending {
            if state.0.model.is_some() {
                state.schedule(&id, repo)?;
            } else {
                let mut store = state.write();
                let job_id = store.advisory(&id).and_then(|e| e.ranking.as_ref()).map(|r| r.job_id().to_string());
                if let Some(job_id) = job_id {
                    store.finish_ranking(
                        &id,
                        Ranking::Failed {
                            job_id,
                            reason: FailureReason::Interrupted,
                            detail: "the service restarted without a model".into(),
                        },
                    )?;
                }
            }
        }
        Ok(state)
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, TriageStore> {
        self.0.store.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, TriageStore> {
        self.0.store.write().unwrap_or_else(|p| p.into_inner())
    }

    /// Queue a ranking job; returns its id.
    fn schedule(&self, id: &str, repo: Option<PathBuf>) -> Result<String, StoreError> {
        let job_id = self.write().start_ranking(id, repo.clone())?;
        let state = self.clone();
        let (id, job) = (id.to_string(), job_id.clone());
        tokio::spawn(async move {
            let Ok(_permit) = state.0.workers.clone().acquire_owned().await else {
                return;
            };
            let worker = state.clone();
            let id2 = id.clone();
            let outcome = tokio::task::spawn_blocking(move || worker.run_job(&id2, repo.as_deref()))
                .await
                .unwrap_or_else(|e| {
                    Err(RankFailure {
                        reason: FailureReason::Internal,
                        detail: e.to_string(),
                    })
                });
            let ranking = match outcome {
                Ok(out) => Ranking::Done {
                    job_id: job,
                    ranked_at: now(),
                    candidates: out.candidates,
                    skipped: out.skipped,
                },
                Err(f) => Ranking::Failed {
                    job_id: job,
                    reason: f.reason,
                    detail: f.detail,
                },
            };
            if let Err(e) = state.write().finish_ranking(&id, ranking) {
                tracing::error!("could not store ranking of {id}: {e}");
            }
        });
        Ok(job_id)
    }

    fn run_job(&self, id: &str, repo: Option<&std::path::Path>) -> Result<crate::ranking::RankOutcome, RankFailure> {
        let advisory = self
            .read()
            .advisory(id)
            .map(|e| e.advisory.clone())
            .ok_or_else(|| RankFailure {
                reason: FailureReason::Internal,
                detail: format!("advisory {id} vanished"),
            })?;
        let model = self.0.model.as_ref().ok_or_else(|| RankFailure {
            reason: FailureReason::Internal,
            detail: "no model loaded".into(),
        })?;
        let source = match repo {
            Some(p) => Source::Local(p),
            None => Source::Cached(&self.0.repo_cache),
        };
        let git = open_repo(&advisory, &source)?;
        rank_in_repo(&advisory, &git, model, &self.0.providers, &self.0.map)
    }
}

pub fn router(state: AppState) -> Router {
    let mut app = Router::new()
        .route("/health", get(health))
        .route("/advisories", post(post_advisory).get(list_advisories))
        .route("/advisories/{id}", get(get_advisory))
        .route("/advisories/{id}/rank", post(post_rank))
        .route("/advisories/{id}/candidates", get(get_candidates))
        .route("/advisories/{id}/candidates/{sha}/decision", post(post_candidate_decision))
        .route("/advisories/{id}/decision", post(post_advisory_decision))
        .route("/backfill/export", get(export));
    if let Some(dir) = state.0.ui_dir.clone() {
        app = app.nest_service("/ui", ServeDir::new(dir));
    }
    app.with_state(state)
}

async fn health(State(s): State<AppState>) -> Json<Value> {
    Json(json!({ "status": "ok", "model_loaded": s.0.model.is_some() }))
}

async fn post_advisory(State(s): State<AppState>, body: String) -> Response {
    let advisory = match parse_advisory(&body) {
        Ok(a) => a,
        Err(e) => return error(StatusCode::BAD_REQUEST, "malformed_advisory", e),
    };
    let id = advisory.id.clone();
    let has_source = advisory.repo_url.is_some();
    if let Err(e) = s.write().add_advisory(advisory, now()) {
        return store_error(e);
    }
    let mut body = json!({ "id": id });
    if s.0.auto_rank && s.0.model.is_some() {
        if has_source {
            match s.schedule(&id, None) {
                Ok(job) => body["job_id"] = json!(job),
                Err(e) => return store_error(e),
            }
        } else if let Err(e) = record_missing_source(&s, &id) {
            return store_error(e);
        }
    }
    (StatusCode::CREATED, Json(body)).into_response()
}

fn record_missing_source(s: &AppState, id: &str) -> Result<(), StoreError> {
    let mut store = s.write();
    let job_id = store.start_ranking(id, None)?;
    store.finish_ranking(
        id,
        Ranking::Failed {
            job_id,
            reason: FailureReason::MissingSource,
            detail: "advisory has no source repository link".into(),
        },
    )?;
    Ok(())
}

fn ranking_status(r: Option<&Ranking>) -> Value {
    match r {
        None => json!({ "status": "none" }),
        Some(Ranking::Pending { job_id, .. }) => json!({ "status": "pending", "job_id": job_id }),
        Some(Ranking::Done { job_id, ranked_at, candidates, skipped }) => json!({
            "status": "done", "job_id": job_id, "ranked_at": ranked_at,
            "candidates": candidates.len(), "skipped": skipped,
        }),
        Some(Ranking::Failed { job_id, reason, detail }) => json!({
            "status": "failed", "job_id": job_id, "reason": reason, "detail": detail,
        }),
    }
}

#[derive(Deserialize)]
struct ListQuery {
    state: Option<QueueState>,
}

async fn list_advisories(State(s): State<AppState>, Query(q): Query<ListQuery>) -> Json<Value> {
    let store = s.read();
    let mut rows: Vec<_> = store
        .advisories()
        .filter(|e| q.state.map_or(true, |st| e.state() == st))
        .collect();
    rows.sort_by(|a, b| {
        a.advisory
            .published
            .cmp(&b.advisory.published)
            .then_with(|| a.advisory.id.cmp(&b.advisory.id))
    });
    let items: Vec<Value> = rows
        .iter()
        .map(|e| {
            json!({
                "id": e.advisory.id,
                "summary": e.advisory.summary,
                "published": e.advisory.published,
                "state": e.state(),
                "repo_url": e.advisory.repo_url,
                "ranking": ranking_status(e.ranking.as_ref()),
            })
        })
        .collect();
    Json(json!({ "advisories": items }))
}

async fn get_advisory(State(s): State<AppState>, Path(id): Path<String>) -> Response {
    let store = s.read();
    let Some(e) = store.advisory(&id) else {
        return error(StatusCode::NOT_FOUND, "unknown_advisory", format!("unknown advisory {id}"));
    };
    let decisions: Vec<_> = e.decisions.values().collect();
    Json(json!({
        "advisory": e.advisory,
        "received_at": e.received_at,
        "state": e.state(),
        "ranking": ranking_status(e.ranking.as_ref()),
        "decisions": decisions,
    }))
    .into_response()
}

#[derive(Deserialize, Default)]
struct RankBody {
    /// Local clone to mine instead of the advisory's link.
    repo: Option<PathBuf>,
}

async fn post_rank(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> Response {
    let req: RankBody = if body.iter().all(u8::is_ascii_whitespace) {
        RankBody::default()
    } else {
        match serde_json::from_slice(&body) {
            Ok(r) => r,
            Err(e) => return error(StatusCode::BAD_REQUEST, "malformed_request", e),
        }
    };
    if s.0.model.is_none() {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no_model", "the service was started without a model");
    }
    let has_source = {
        let store = s.read();
        let Some(e) = store.advisory(&id) else {
            return error(StatusCode::NOT_FOUND, "unknown_advisory", format!("unknown advisory {id}"));
        };
        if let Some(Ranking::Pending { job_id, .. }) = &e.ranking {
            return (StatusCode::ACCEPTED, Json(json!({ "job_id": job_id, "status": "pending" }))).into_response();
        }
        e.advisory.repo_url.is_some()
    };
    if req.repo.is_none() && !has_source {
        if let Err(e) = record_missing_source(&s, &id) {
            return store_error(e);
        }
        return error(
            StatusCode::UNPROCESSABLE_ENTITY,
            "missing_source",
            "advisory has no source repository link; resolve it or pass a local repo",
        );
    }
    match s.schedule(&id, req.repo) {
        Ok(job_id) => (StatusCode::ACCEPTED, Json(json!({ "job_id": job_id, "status": "pending" }))).into_response(),
        Err(e) => store_error(e),
    }
}

#[derive(Deserialize)]
struct CandidatesQuery {
    k: Option<usize>,
}

async fn get_candidates(State(s): State<AppState>, Path(id): Path<String>, Query(q): Query<CandidatesQuery>) -> Response {
    let store = s.read();
    let Some(e) = store.advisory(&id) else {
        return error(StatusCode::NOT_FOUND, "unknown_advisory", format!("unknown advisory {id}"));
    };
    match &e.ranking {
        None => error(StatusCode::NOT_FOUND, "not_ranked", format!("{id} has not been ranked")),
        Some(Ranking::Pending { job_id, .. }) => {
            (StatusCode::ACCEPTED, Json(json!({ "status": "pending", "job_id": job_id }))).into_response()
        }
        Some(Ranking::Failed { reason, detail, job_id }) => (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(json!({ "reason": reason.code(), "detail": detail, "job_id": job_id })),
        )
            .into_response(),
        Some(Ranking::Done { candidates, ranked_at, skipped, job_id }) => {
            let k = q.k.unwrap_or(DEFAULT_TOP_K);
            let top: Vec<Value> = candidates
                .iter()
                .take(k)
                .map(|c| {
                    let mut v = serde_json::to_value(c).expect("candidate serializes");
                    v["decision"] = json!(e.decision_of(&c.sha));
                    v
                })
                .collect();
            Json(json!({
                "advisory_id": id,
                "job_id": job_id,
                "ranked_at": ranked_at,
                "total": candidates.len(),
                "k": k,
                "skipped": skipped,
                "state": e.state(),
                "candidates": top,
            }))
            .into_response()
        }
    }
}

#[derive(Deserialize)]
struct DecisionBody {
    decision: Decision,
    reviewer: String,
    #[serde(default)]
    note: String,
    #[serde(default, rename = "override")]
    override_confirm: bool,
}

fn decide(s: &AppState, id: String, sha: Option<String>, body: &[u8]) -> Response {
    let body: DecisionBody = match serde_json::from_slice(body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, "malformed_request", e),
    };
    let req = DecisionRequest {
        advisory_id: id,
        sha,
        decision: body.decision,
        reviewer: body.reviewer,
        note: body.note,
        override_confirm: body.override_confirm,
    };
    match s.write().decide(req, &now()) {
        Ok(out) => {
            let status = if out.created { StatusCode::CREATED } else { StatusCode::OK };
            (status, Json(json!({ "record": out.record, "side_effects": out.side_effects }))).into_response()
        }
        Err(e) => store_error(e),
    }
}

async fn post_candidate_decision(
    State(s): State<AppState>,
    Path((id, sha)): Path<(String, String)>,
    body: Bytes,
) -> Response {
    decide(&s, id, Some(sha), &body)
}

async fn post_advisory_decision(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> Response {
    decide(&s, id, None, &body)
}

async fn export(State(s): State<AppState>) -> Response {
    let ts = now();
    let entries = s.read().export(&ts);
    let body = json!({
        "export_ts": ts,
        "count": entries.len(),
        "daily_limit_hint": DAILY_EXPORT_HINT,
        "entries": entries,
    });
    (
        [(header::CONTENT_DISPOSITION, "attachment; filename=\"backfill.json\"")],
        Json(body),
    )
        .into_response()
}
