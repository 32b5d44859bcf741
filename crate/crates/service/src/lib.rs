//! HTTP service over the dispatch and charging solvers, optimizer runs,
//! charging-assistant sessions, document QA and image evaluations.
//!
//! Long jobs run on a bounded worker pool and are polled by id. Every
//! artifact lives under a data directory, so a restarted service resumes
//! unfinished optimizer runs from their last persisted step.

mod api;

pub use api::{ApiError, Valid};

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gridfm_core::assistant::AssistantSession;
use gridfm_core::doc::{self, DocumentIndex, HashingEmbedder, PromptTemplate};
use gridfm_core::llm::{ChatProvider, MockProvider};
use gridfm_core::opro::{self, OproConfig, OproRunRecord, OproRunner, Origin, RunStatus, SolutionCostBuffer};
use gridfm_core::problem::fixtures;
use gridfm_core::sa::{self, EvalOptions, EvalReport, SaApproach};
use gridfm_core::store::{self, DataDir, Kind, StoreError};
use gridfm_core::{summarize_schedule, DispatchProblem, EvProblem};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use tower_http::cors::CorsLayer;

pub const DEFAULT_WORKERS: usize = 4;
pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

const EVAL_JOB_FORMAT: &str = "sa-eval-job";
const EVAL_JOB_VERSION: u32 = 1;

/// Where model calls go.
#[derive(Clone)]
pub enum ProviderChoice {
    /// The built-in deterministic model.
    Mock,
    Shared(Arc<dyn ChatProvider>),
}

impl ProviderChoice {
    fn for_dispatch(&self, problem: &DispatchProblem) -> Arc<dyn ChatProvider> {
        match self {
            ProviderChoice::Mock => Arc::new(MockProvider::with_dispatch(problem.clone())),
            ProviderChoice::Shared(p) => p.clone(),
        }
    }

    fn general(&self) -> Arc<dyn ChatProvider> {
        match self {
            ProviderChoice::Mock => Arc::new(MockProvider::new()),
            ProviderChoice::Shared(p) => p.clone(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            ProviderChoice::Mock => "mock".into(),
            ProviderChoice::Shared(p) => p.name().to_string(),
        }
    }
}

pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub provider: ProviderChoice,
    pub workers: usize,
    pub embedder: HashingEmbedder,
    pub template: PromptTemplate,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>, provider: ProviderChoice) -> Self {
        Self {
            data_dir: data_dir.into(),
            provider,
            workers: DEFAULT_WORKERS,
            embedder: HashingEmbedder::default(),
            template: PromptTemplate::default(),
        }
    }
}

struct RunJob {
    cancel: AtomicBool,
    record: Mutex<OproRunRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum EvalStatus {
    Running,
    Completed { report: EvalReport },
    Failed { error: String },
}

type Cached = (StatusCode, Value);
type Shared<T> = Arc<Mutex<T>>;

pub struct AppState {
    data: DataDir,
    provider: ProviderChoice,
    embedder: HashingEmbedder,
    template: PromptTemplate,
    workers: Arc<Semaphore>,
    runs: Mutex<HashMap<String, Arc<RunJob>>>,
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<AssistantSession>>>>,
    docs: Mutex<HashMap<String, Arc<DocumentIndex>>>,
    evals: Mutex<HashMap<String, Shared<EvalStatus>>>,
    idempotency: tokio::sync::Mutex<HashMap<(String, String), Cached>>,
}

fn new_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

/// Ids are 32 lowercase hex digits; anything else cannot name an artifact.
fn valid_id(id: &str) -> bool {
    id.len() == 32 && id.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))
}

impl AppState {
    /// Opens the data directory and resumes every unfinished optimizer run.
    pub async fn open(config: ServiceConfig) -> Result<Arc<Self>, StoreError> {
        let data = DataDir::open(&config.data_dir)?;
        let state = Arc::new(Self {
            data,
            provider: config.provider,
            embedder: config.embedder,
            template: config.template,
            workers: Arc::new(Semaphore::new(config.workers.max(1))),
            runs: Mutex::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
            docs: Mutex::new(HashMap::new()),
            evals: Mutex::new(HashMap::new()),
            idempotency: tokio::sync::Mutex::new(HashMap::new()),
        });
        for id in state.data.list(Kind::Runs)? {
            let record = match OproRunRecord::load(&state.data.path(Kind::Runs, &id)) {
                Ok(r) => r,
                Err(e) => {
                    tracing::warn!(%id, error = %e, "skipping unreadable run record");
                    continue;
                }
            };
            let job = Arc::new(RunJob {
                cancel: AtomicBool::new(false),
                record: Mutex::new(record.clone()),
            });
            lock(&state.runs).insert(id.clone(), job.clone());
            if !record.status.is_terminal() {
                match OproRunner::resume(record) {
                    Ok(runner) => {
                        tracing::info!(%id, steps = runner.record().steps.len(), "resuming run");
                        state.spawn_run(id, runner, job);
                    }
                    Err(e) => tracing::warn!(%id, error = %e, "cannot resume run"),
                }
            }
        }
        for id in state.data.list(Kind::Evals)? {
            let path = state.data.path(Kind::Evals, &id);
            match store::load_value::<EvalStatus>(&path, EVAL_JOB_FORMAT, EVAL_JOB_VERSION) {
                Ok(EvalStatus::Running) => {
                    let failed = EvalStatus::Failed {
                        error: "interrupted by a service restart".into(),
                    };
                    store::save_value(&path, EVAL_JOB_FORMAT, EVAL_JOB_VERSION, &failed)?;
                    lock(&state.evals).insert(id, Arc::new(Mutex::new(failed)));
                }
                Ok(status) => {
                    lock(&state.evals).insert(id, Arc::new(Mutex::new(status)));
                }
                Err(e) => tracing::warn!(%id, error = %e, "skipping unreadable evaluation"),
            }
        }
        Ok(state)
    }

    pub fn data_dir(&self) -> &DataDir {
        &self.data
    }

    fn spawn_run(self: &Arc<Self>, id: String, mut runner: OproRunner, job: Arc<RunJob>) {
        let state = self.clone();
        tokio::spawn(async move {
            let Ok(permit) = state.workers.clone().acquire_owned().await else {
                return;
            };
            let model = state.provider.for_dispatch(&runner.record().problem);
            let path = state.data.path(Kind::Runs, &id);
            let outcome = tokio::task::spawn_blocking(move || {
                let _permit = permit;
                while !runner.is_done() {
                    if job.cancel.load(Ordering::SeqCst) {
                        runner.cancel();
                    } else {
                        runner.advance(&*model);
                    }
                    if let Err(e) = runner.record().save(&path) {
                        tracing::error!(error = %e, "cannot persist run record");
                    }
                    *lock(&job.record) = runner.record().clone();
                }
            })
            .await;
            if let Err(e) = outcome {
                tracing::error!(%id, error = %e, "run worker failed");
            }
        });
    }

    fn run_job(&self, id: &str) -> Result<Arc<RunJob>, ApiError> {
        lock(&self.runs)
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("run", id))
    }

    fn session(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<AssistantSession>>, ApiError> {
        if let Some(s) = lock(&self.sessions).get(id) {
            return Ok(s.clone());
        }
        let path = self.data.path(Kind::Sessions, id);
        if !valid_id(id) || !path.exists() {
            return Err(ApiError::not_found("session", id));
        }
        let session = Arc::new(tokio::sync::Mutex::new(AssistantSession::load(&path)?));
        Ok(lock(&self.sessions).entry(id.to_string()).or_insert(session).clone())
    }

    fn doc(&self, id: &str) -> Result<Arc<DocumentIndex>, ApiError> {
        if let Some(d) = lock(&self.docs).get(id) {
            return Ok(d.clone());
        }
        let path = self.data.path(Kind::Indexes, id);
        if !valid_id(id) || !path.exists() {
            return Err(ApiError::not_found("document", id));
        }
        let index = Arc::new(DocumentIndex::load(&path)?);
        Ok(lock(&self.docs).entry(id.to_string()).or_insert(index).clone())
    }

    /// Replays the stored response when a create request repeats its
    /// idempotency key.
    async fn idempotent<F, Fut>(&self, route: String, headers: &HeaderMap, create: F) -> Result<Response, ApiError>
    where
        F: FnOnce() -> Fut,
        Fut: Future<Output = Result<Cached, ApiError>>,
    {
        let key = headers
            .get(IDEMPOTENCY_HEADER)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        let Some(key) = key else {
            let (status, body) = create().await?;
            return Ok((status, Json(body)).into_response());
        };
        let mut cache = self.idempotency.lock().await;
        if let Some((status, body)) = cache.get(&(route.clone(), key.clone())) {
            return Ok((*status, Json(body.clone())).into_response());
        }
        let (status, body) = create().await?;
        cache.insert((route, key), (status, body.clone()));
        Ok((status, Json(body)).into_response())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/solve/dispatch", post(solve_dispatch))
        .route("/solve/ev", post(solve_ev))
        .route("/opro/runs", post(start_run))
        .route("/opro/runs/{id}", get(get_run))
        .route("/opro/runs/{id}/cancel", post(cancel_run))
        .route("/assistant/sessions", post(create_session))
        .route("/assistant/sessions/{id}", get(get_session))
        .route("/assistant/sessions/{id}/messages", post(post_message))
        .route("/docs", post(ingest_doc))
        .route("/docs/{id}", get(get_doc))
        .route("/docs/{id}/query", post(query_doc))
        .route("/sa/evaluations", post(start_eval))
        .route("/sa/evaluations/{id}", get(get_eval))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Binds `addr` and serves until the process stops.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}

type AppResult<T> = Result<T, ApiError>;
type St = State<Arc<AppState>>;

async fn health(State(state): St) -> Json<Value> {
    Json(json!({"status": "ok", "provider": state.provider.name()}))
}

async fn solve_dispatch(Valid(problem): Valid<DispatchProblem>) -> AppResult<Json<Value>> {
    let report = blocking(move || gridfm_core::solve_dispatch(&problem)).await??;
    Ok(Json(json!(report)))
}

async fn solve_ev(Valid(problem): Valid<EvProblem>) -> AppResult<Json<Value>> {
    let (schedule, summary) = blocking(move || {
        gridfm_core::solve_ev(&problem).map(|s| {
            let summary = summarize_schedule(&problem, &s);
            (s, summary)
        })
    })
    .await??;
    Ok(Json(json!({"schedule": schedule, "summary": summary})))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ProblemRef {
    Named(String),
    Inline(DispatchProblem),
}

#[derive(Deserialize)]
struct SeedPair {
    solution: Vec<f64>,
    #[serde(default)]
    cost: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StartRun {
    problem: ProblemRef,
    #[serde(default)]
    demand: Option<f64>,
    #[serde(default)]
    config: OproConfig,
    #[serde(default)]
    seed_pairs: Option<Vec<SeedPair>>,
    #[serde(default)]
    adapt_from: Option<String>,
}

fn run_view(id: &str, record: &OproRunRecord) -> Value {
    json!({
        "id": id,
        "status": record.status,
        "steps_done": record.steps.len(),
        "best_cost": record.best().map(|b| b.cost),
        "record": record,
    })
}

async fn start_run(State(state): St, headers: HeaderMap, Valid(body): Valid<StartRun>) -> AppResult<Response> {
    let st = state.clone();
    state
        .idempotent("/opro/runs".into(), &headers, || async move {
            let problem = match body.problem {
                ProblemRef::Named(name) => fixtures::dispatch_by_name(&name)
                    .ok_or_else(|| ApiError::bad_request(format!("unknown problem fixture `{name}`")))?,
                ProblemRef::Inline(p) => p,
            };
            let problem = match body.demand {
                Some(d) => problem.with_demand(d)?,
                None => problem,
            };
            problem.validate()?;
            let cfg = body.config;
            cfg.validate()?;
            let seed = if let Some(prev) = &body.adapt_from {
                let previous = lock(&st.run_job(prev)?.record).clone();
                opro::adapt_seed(&previous, &problem, &cfg)?
            } else if let Some(pairs) = body.seed_pairs {
                let mut buffer = SolutionCostBuffer::from_config(&cfg);
                for (i, pair) in pairs.into_iter().enumerate() {
                    let inserted = match pair.cost {
                        Some(cost) => buffer.try_insert_priced(&problem, pair.solution, cost, Origin::Seed),
                        None => buffer.try_insert(&problem, pair.solution, Origin::Seed),
                    };
                    inserted.map_err(|r| ApiError::bad_request(format!("seed pair {}: {r}", i + 1)))?;
                }
                buffer
            } else {
                opro::seed_buffer(&problem, cfg.seed_count, cfg.seed, &cfg)?
            };
            let runner = OproRunner::new(problem, cfg, seed)?;
            let id = new_id();
            runner.record().save(&st.data.path(Kind::Runs, &id))?;
            let job = Arc::new(RunJob {
                cancel: AtomicBool::new(false),
                record: Mutex::new(runner.record().clone()),
            });
            lock(&st.runs).insert(id.clone(), job.clone());
            let view = json!({"id": id, "status": runner.record().status});
            st.spawn_run(id, runner, job);
            Ok((StatusCode::ACCEPTED, view))
        })
        .await
}

async fn get_run(State(state): St, Path(id): Path<String>) -> AppResult<Json<Value>> {
    let job = state.run_job(&id)?;
    let record = lock(&job.record).clone();
    Ok(Json(run_view(&id, &record)))
}

async fn cancel_run(State(state): St, Path(id): Path<String>) -> AppResult<Response> {
    let job = state.run_job(&id)?;
    let status = lock(&job.record).status.clone();
    match status {
        RunStatus::Running => {
            job.cancel.store(true, Ordering::SeqCst);
            Ok((StatusCode::ACCEPTED, Json(json!({"id": id, "status": "cancelling"}))).into_response())
        }
        RunStatus::Cancelled => Ok(Json(json!({"id": id, "status": status})).into_response()),
        other => Err(ApiError::conflict(format!(
            "run {id} has already finished ({})",
            serde_json::to_value(&other).ok().and_then(|v| v["state"].as_str().map(str::to_string)).unwrap_or_default()
        ))),
    }
}

async fn create_session(State(state): St, headers: HeaderMap) -> AppResult<Response> {
    let st = state.clone();
    state
        .idempotent("/assistant/sessions".into(), &headers, || async move {
            let id = new_id();
            let session = AssistantSession::new(id.clone());
            session.save(&st.data.path(Kind::Sessions, &id))?;
            let view = json!(session);
            lock(&st.sessions).insert(id, Arc::new(tokio::sync::Mutex::new(session)));
            Ok((StatusCode::CREATED, view))
        })
        .await
}

async fn get_session(State(state): St, Path(id): Path<String>) -> AppResult<Json<Value>> {
    let session = state.session(&id)?;
    let guard = session.lock().await;
    Ok(Json(json!(*guard)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct UserMessage {
    text: String,
}

async fn post_message(
    State(state): St,
    Path(id): Path<String>,
    headers: HeaderMap,
    Valid(body): Valid<UserMessage>,
) -> AppResult<Response> {
    let session = state.session(&id)?;
    let st = state.clone();
    state
        .idempotent(format!("/assistant/sessions/{id}/messages"), &headers, || async move {
            let mut guard = session.lock().await;
            let mut working = guard.clone();
            let model = st.provider.general();
            let (working, outcome) = blocking(move || {
                let outcome = working.handle_user_turn(&body.text, &*model);
                (working, outcome)
            })
            .await?;
            let outcome = outcome?;
            working.save(&st.data.path(Kind::Sessions, &id))?;
            *guard = working;
            Ok((StatusCode::OK, json!({"id": id, "turn": guard.user_turns, "outcome": outcome})))
        })
        .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IngestDoc {
    text: String,
    #[serde(default)]
    title: Option<String>,
    #[serde(default)]
    chunk_size: Option<usize>,
    #[serde(default)]
    overlap: Option<usize>,
}

fn doc_view(id: &str, index: &DocumentIndex) -> Value {
    let chunks: Vec<Value> = index
        .chunks
        .iter()
        .map(|c| json!({"index": c.index, "start": c.start, "end": c.end}))
        .collect();
    json!({
        "id": id,
        "document_id": index.document_id,
        "embedder": index.embedder,
        "chunk_size": index.chunk_size,
        "overlap": index.overlap,
        "chunks": chunks,
        "source": index.source,
    })
}

async fn ingest_doc(State(state): St, headers: HeaderMap, Valid(body): Valid<IngestDoc>) -> AppResult<Response> {
    let st = state.clone();
    state
        .idempotent("/docs".into(), &headers, || async move {
            let id = new_id();
            let title = body.title.unwrap_or_else(|| id.clone());
            let embedder = st.embedder.clone();
            let index = blocking(move || {
                DocumentIndex::build(
                    title,
                    &body.text,
                    &embedder,
                    body.chunk_size.unwrap_or(doc::DEFAULT_CHUNK_SIZE),
                    body.overlap.unwrap_or(doc::DEFAULT_OVERLAP),
                )
            })
            .await??;
            index.save(&st.data.path(Kind::Indexes, &id))?;
            let mut view = doc_view(&id, &index);
            view.as_object_mut().expect("object").remove("source");
            lock(&st.docs).insert(id, Arc::new(index));
            Ok((StatusCode::CREATED, view))
        })
        .await
}

async fn get_doc(State(state): St, Path(id): Path<String>) -> AppResult<Json<Value>> {
    let index = state.doc(&id)?;
    Ok(Json(doc_view(&id, &index)))
}

fn default_k() -> usize {
    doc::DEFAULT_K
}

fn default_true() -> bool {
    true
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DocQuery {
    question: String,
    #[serde(default = "default_k")]
    k: usize,
    #[serde(default = "default_true")]
    rag: bool,
}

async fn query_doc(State(state): St, Path(id): Path<String>, Valid(body): Valid<DocQuery>) -> AppResult<Json<Value>> {
    let index = state.doc(&id)?;
    let model = state.provider.general();
    let embedder = state.embedder.clone();
    let template = state.template.clone();
    let answer = blocking(move || doc::answer(&index, &embedder, &body.question, body.k, body.rag, &*model, &template))
        .await??;
    Ok(Json(json!(answer)))
}

fn default_rounds() -> usize {
    1
}

fn default_concurrency() -> usize {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StartEval {
    approach: u8,
    manifest: PathBuf,
    #[serde(default = "default_rounds")]
    rounds: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_concurrency")]
    concurrency: usize,
}

async fn start_eval(State(state): St, headers: HeaderMap, Valid(body): Valid<StartEval>) -> AppResult<Response> {
    let st = state.clone();
    state
        .idempotent("/sa/evaluations".into(), &headers, || async move {
            let approach = SaApproach::from_number(body.approach)
                .ok_or_else(|| ApiError::bad_request(format!("approach must be 1 to 4, got {}", body.approach)))?;
            let manifest = sa::load_manifest(&body.manifest)?;
            let opts = EvalOptions {
                rounds: body.rounds,
                seed: body.seed,
                concurrency: body.concurrency,
                ..EvalOptions::default()
            };
            let plan = sa::plan_evaluation(approach, &manifest, &opts)?;
            let id = new_id();
            let path = st.data.path(Kind::Evals, &id);
            store::save_value(&path, EVAL_JOB_FORMAT, EVAL_JOB_VERSION, &EvalStatus::Running)?;
            let status = Arc::new(Mutex::new(EvalStatus::Running));
            lock(&st.evals).insert(id.clone(), status.clone());
            let model = st.provider.general();
            let workers = st.workers.clone();
            tokio::spawn(async move {
                let Ok(permit) = workers.acquire_owned().await else { return };
                let _ = tokio::task::spawn_blocking(move || {
                    let _permit = permit;
                    let done = match sa::run_plan(approach, &plan, &*model, &opts) {
                        Ok(report) => EvalStatus::Completed { report },
                        Err(e) => EvalStatus::Failed { error: e.to_string() },
                    };
                    if let Err(e) = store::save_value(&path, EVAL_JOB_FORMAT, EVAL_JOB_VERSION, &done) {
                        tracing::error!(error = %e, "cannot persist evaluation");
                    }
                    *lock(&status) = done;
                })
                .await;
            });
            Ok((StatusCode::ACCEPTED, json!({"id": id, "status": EvalStatus::Running})))
        })
        .await
}

async fn get_eval(State(state): St, Path(id): Path<String>) -> AppResult<Json<Value>> {
    let status = lock(&state.evals)
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::not_found("evaluation", &id))?;
    let status = lock(&status).clone();
    Ok(Json(json!({"id": id, "status": status})))
}
