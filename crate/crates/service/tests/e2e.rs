//! End-to-end requests against the router with a temporary data directory.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use gridfm_core::assistant::{dialogue, extract_invocation, SessionState};
use gridfm_core::llm::{ChatProvider, ChatRequest, ChatResponse, GatewayError, MockProvider};
use gridfm_core::opro::{self, OproConfig, OproRunRecord, OproRunner};
use gridfm_core::problem::fixtures;
use gridfm_service::{router, AppState, ProviderChoice, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Failing;

impl ChatProvider for Failing {
    fn chat(&self, _: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        Err(GatewayError::Transport("upstream unavailable".into()))
    }
}

/// Mock model that sleeps before answering so runs stay observable.
struct Slow(MockProvider);

impl ChatProvider for Slow {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        std::thread::sleep(Duration::from_millis(20));
        self.0.chat(request)
    }
}

async fn app(dir: &std::path::Path, provider: ProviderChoice) -> (Arc<AppState>, Router) {
    let state = AppState::open(ServiceConfig::new(dir, provider)).await.unwrap();
    (state.clone(), router(state))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>, key: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(k) = key {
        req = req.header("idempotency-key", k);
    }
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let res = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = res.status();
    let bytes = axum::body::to_bytes(res.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn poll_run(app: &Router, id: &str, done: impl Fn(&Value) -> bool) -> Value {
    for _ in 0..2000 {
        let (status, v) = call(app, "GET", &format!("/opro/runs/{id}"), None, None).await;
        assert_eq!(status, StatusCode::OK);
        if done(&v) {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("run {id} did not reach the expected state");
}

fn run_state(v: &Value) -> &str {
    v["status"]["state"].as_str().unwrap_or_default()
}

#[tokio::test]
async fn health_reports_provider() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(dir.path(), ProviderChoice::Mock).await;
    let (status, v) = call(&app, "GET", "/health", None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["provider"], "mock");
}

#[tokio::test]
async fn dispatch_solve_and_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(dir.path(), ProviderChoice::Mock).await;
    let problem = json!(fixtures::five_unit());
    let (status, v) = call(&app, "POST", "/solve/dispatch", Some(problem.clone()), None).await;
    assert_eq!(status, StatusCode::OK);
    assert!((v["solution"]["cost"].as_f64().unwrap() - 131455.0).abs() < 0.5);

    let mut infeasible = problem;
    infeasible["demand"] = json!(10_000.0);
    let (status, v) = call(&app, "POST", "/solve/dispatch", Some(infeasible), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("infeasible"), "{v}");
}

#[tokio::test]
async fn malformed_body_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(dir.path(), ProviderChoice::Mock).await;
    let mut problem = json!(fixtures::five_unit());
    problem["units"][2]["b"] = json!("cheap");
    let (status, v) = call(&app, "POST", "/solve/dispatch", Some(problem), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["path"], "units[2].b");
}

#[tokio::test]
async fn ev_solve_returns_schedule_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(dir.path(), ProviderChoice::Mock).await;
    let (status, v) = call(&app, "POST", "/solve/ev", Some(json!(fixtures::ev_five_vehicle())), None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(v["schedule"]["objective"].as_f64().unwrap() <= 1e-4);
    assert_eq!(v["summary"]["vehicles"].as_array().unwrap().len(), 5);
}

#[tokio::test]
async fn assistant_dialogue_reaches_explained() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(dir.path(), ProviderChoice::Mock).await;
    let (status, v) = call(&app, "POST", "/assistant/sessions", None, None).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = v["id"].as_str().unwrap().to_string();
    let uri = format!("/assistant/sessions/{id}/messages");

    let [opening, answers] = dialogue::user_turns();
    let (status, v) = call(&app, "POST", &uri, Some(json!({"text": opening})), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["outcome"]["state"], "gathering");
    assert_eq!(v["outcome"]["replies"][0], dialogue::ASSISTANT_QUESTIONS);

    let (status, v) = call(&app, "POST", &uri, Some(json!({"text": answers})), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["outcome"]["state"], "explained");
    let expected = gridfm_core::solve_ev(&fixtures::ev_five_vehicle()).unwrap();
    let power: Vec<Vec<f64>> = serde_json::from_value(v["outcome"]["schedule"]["power"].clone()).unwrap();
    for (got, want) in power.iter().flatten().zip(expected.power.iter().flatten()) {
        assert!((got - want).abs() < 1e-6);
    }

    let (status, session) = call(&app, "GET", &format!("/assistant/sessions/{id}"), None, None).await;
    assert_eq!(status, StatusCode::OK);
    let state: SessionState = serde_json::from_value(session["state"].clone()).unwrap();
    assert_eq!(state, SessionState::Explained);
    let scripted = extract_invocation(dialogue::ASSISTANT_INVOCATION).unwrap().unwrap();
    assert_eq!(session["invocation"]["arguments"], json!(scripted.arguments));
}

#[tokio::test]
async fn message_retry_with_same_key_is_not_applied_twice() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(dir.path(), ProviderChoice::Mock).await;
    let (_, v) = call(&app, "POST", "/assistant/sessions", None, Some("create-1")).await;
    let id = v["id"].as_str().unwrap().to_string();
    let (_, again) = call(&app, "POST", "/assistant/sessions", None, Some("create-1")).await;
    assert_eq!(again["id"], v["id"]);

    let uri = format!("/assistant/sessions/{id}/messages");
    let body = json!({"text": dialogue::USER_OPENING});
    let (_, first) = call(&app, "POST", &uri, Some(body.clone()), Some("m1")).await;
    let (_, second) = call(&app, "POST", &uri, Some(body), Some("m1")).await;
    assert_eq!(first, second);
    let (_, session) = call(&app, "GET", &format!("/assistant/sessions/{id}"), None, None).await;
    assert_eq!(session["user_turns"], 1);
}

#[tokio::test]
async fn sessions_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let id = {
        let (_, app) = app(dir.path(), ProviderChoice::Mock).await;
        let (_, v) = call(&app, "POST", "/assistant/sessions", None, None).await;
        let id = v["id"].as_str().unwrap().to_string();
        let uri = format!("/assistant/sessions/{id}/messages");
        call(&app, "POST", &uri, Some(json!({"text": dialogue::USER_OPENING})), None).await;
        id
    };
    let (_, app) = app(dir.path(), ProviderChoice::Mock).await;
    let uri = format!("/assistant/sessions/{id}/messages");
    let (status, v) = call(&app, "POST", &uri, Some(json!({"text": dialogue::USER_ANSWERS})), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["outcome"]["state"], "explained");
}

#[tokio::test]
async fn unknown_and_malformed_ids_are_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(dir.path(), ProviderChoice::Mock).await;
    for uri in [
        "/opro/runs/0123456789abcdef0123456789abcdef",
        "/assistant/sessions/0123456789abcdef0123456789abcdef",
        "/assistant/sessions/..%2F..%2Fetc",
        "/docs/0123456789abcdef0123456789abcdef",
        "/sa/evaluations/nope",
    ] {
        let (status, _) = call(&app, "GET", uri, None, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
    }
    let (status, _) = call(&app, "POST", "/opro/runs/0123456789abcdef0123456789abcdef/cancel", None, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn provider_failure_is_bad_gateway() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(dir.path(), ProviderChoice::Shared(Arc::new(Failing))).await;
    let (_, v) = call(&app, "POST", "/assistant/sessions", None, None).await;
    let id = v["id"].as_str().unwrap().to_string();
    let uri = format!("/assistant/sessions/{id}/messages");
    let (status, v) = call(&app, "POST", &uri, Some(json!({"text": "hello"})), None).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY, "{v}");

    let (_, doc) = call(&app, "POST", "/docs", Some(json!({"text": "Storage shifts load."})), None).await;
    let uri = format!("/docs/{}/query", doc["id"].as_str().unwrap());
    let (status, _) = call(&app, "POST", &uri, Some(json!({"question": "What shifts load?"})), None).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
}

#[tokio::test]
async fn opro_run_completes_and_improves() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(dir.path(), ProviderChoice::Mock).await;
    let body = json!({"problem": "five_unit", "config": {"steps": 20}});
    let (status, v) = call(&app, "POST", "/opro/runs", Some(body.clone()), Some("run-1")).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let id = v["id"].as_str().unwrap().to_string();
    let (_, again) = call(&app, "POST", "/opro/runs", Some(body), Some("run-1")).await;
    assert_eq!(again["id"], v["id"]);

    let done = poll_run(&app, &id, |v| run_state(v) == "completed").await;
    assert_eq!(done["steps_done"], 20);
    let best = done["best_cost"].as_f64().unwrap();
    assert!(best < 131455.0 * 1.0005, "{best}");

    let (status, _) = call(&app, "POST", &format!("/opro/runs/{id}/cancel"), None, None).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let adapt = json!({"problem": "five_unit", "demand": 405.0, "adapt_from": id, "config": {"steps": 5}});
    let (status, v) = call(&app, "POST", "/opro/runs", Some(adapt), None).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{v}");
    let adapted = poll_run(&app, v["id"].as_str().unwrap(), |v| run_state(v) == "completed").await;
    assert_eq!(adapted["record"]["problem"]["demand"], 405.0);
}

#[tokio::test]
async fn opro_rejects_bad_seed_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(dir.path(), ProviderChoice::Mock).await;
    let body = json!({"problem": "five_unit", "seed_pairs": [{"solution": [1.0, 2.0]}]});
    let (status, v) = call(&app, "POST", "/opro/runs", Some(body), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("seed pair 1"), "{v}");
    let (status, _) = call(&app, "POST", "/opro/runs", Some(json!({"problem": "nine_unit"})), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn opro_cancel_stops_a_running_job() {
    let dir = tempfile::tempdir().unwrap();
    let slow = Slow(MockProvider::with_dispatch(fixtures::five_unit()));
    let (_, app) = app(dir.path(), ProviderChoice::Shared(Arc::new(slow))).await;
    let (_, v) = call(&app, "POST", "/opro/runs", Some(json!({"problem": "five_unit"})), None).await;
    let id = v["id"].as_str().unwrap().to_string();
    poll_run(&app, &id, |v| v["steps_done"].as_u64().unwrap() >= 2).await;

    let (status, _) = call(&app, "POST", &format!("/opro/runs/{id}/cancel"), None, None).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let cancelled = poll_run(&app, &id, |v| run_state(v) == "cancelled").await;
    assert!(cancelled["steps_done"].as_u64().unwrap() < 300);
    let (status, v) = call(&app, "POST", &format!("/opro/runs/{id}/cancel"), None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["status"]["state"], "cancelled");
}

#[tokio::test]
async fn interrupted_run_resumes_after_restart() {
    let dir = tempfile::tempdir().unwrap();
    let problem = fixtures::five_unit();
    let cfg = OproConfig { steps: 12, ..OproConfig::default() };
    let seed = opro::seed_buffer(&problem, cfg.seed_count, cfg.seed, &cfg).unwrap();
    let mut runner = OproRunner::new(problem.clone(), cfg, seed).unwrap();
    let model = MockProvider::with_dispatch(problem);
    for _ in 0..5 {
        runner.advance(&model);
    }
    let partial = runner.record().clone();

    let (state, app) = app(dir.path(), ProviderChoice::Mock).await;
    let id = "00000000000000000000000000000abc";
    partial.save(&state.data_dir().path(gridfm_core::store::Kind::Runs, id)).unwrap();
    drop(app);

    let (state, app) = self::app(dir.path(), ProviderChoice::Mock).await;
    let done = poll_run(&app, id, |v| run_state(v) == "completed").await;
    assert_eq!(done["steps_done"], 12);
    let on_disk = OproRunRecord::load(&state.data_dir().path(gridfm_core::store::Kind::Runs, id)).unwrap();
    assert_eq!(on_disk.steps[..5], partial.steps[..]);
    assert_eq!(on_disk.steps.len(), 12);
}

#[tokio::test]
async fn documents_ingest_and_answer() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(dir.path(), ProviderChoice::Mock).await;
    let text = "Batteries shift load to off-peak hours. ".repeat(60);
    let body = json!({"text": text, "title": "storage", "chunk_size": 500, "overlap": 100});
    let (status, v) = call(&app, "POST", "/docs", Some(body), None).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = v["id"].as_str().unwrap().to_string();
    assert_eq!(v["document_id"], "storage");
    assert!(v["chunks"].as_array().unwrap().len() > 1);

    let (status, meta) = call(&app, "GET", &format!("/docs/{id}"), None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(meta["source"], text);

    let uri = format!("/docs/{id}/query");
    let (status, a) = call(&app, "POST", &uri, Some(json!({"question": "What do batteries shift?", "k": 2})), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(a["citations"].as_array().unwrap().len(), 2);
    assert!(a["text"].as_str().unwrap().contains("excerpt [1]"));

    let (status, v) = call(&app, "POST", &uri, Some(json!({"question": 7})), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["path"], "question");
}

fn write_manifest(dir: &std::path::Path, positives: usize, negatives: usize) -> std::path::PathBuf {
    let mut csv = String::from("path,label\n");
    for i in 0..positives + negatives {
        let name = format!("img{i}.png");
        std::fs::write(dir.join(&name), format!("pixels-{i}")).unwrap();
        csv.push_str(&format!("{name},{}\n", u8::from(i < positives)));
    }
    let path = dir.join("manifest.csv");
    std::fs::write(&path, csv).unwrap();
    path
}

#[tokio::test]
async fn image_evaluation_runs_to_completion() {
    let dir = tempfile::tempdir().unwrap();
    let images = tempfile::tempdir().unwrap();
    let manifest = write_manifest(images.path(), 8, 7);
    let (_, app) = app(dir.path(), ProviderChoice::Mock).await;
    let body = json!({"approach": 3, "manifest": manifest, "rounds": 2, "seed": 4});
    let (status, v) = call(&app, "POST", "/sa/evaluations", Some(body), None).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{v}");
    let id = v["id"].as_str().unwrap().to_string();
    let mut report = Value::Null;
    for _ in 0..500 {
        let (_, v) = call(&app, "GET", &format!("/sa/evaluations/{id}"), None, None).await;
        if v["status"]["state"] == "completed" {
            report = v["status"]["report"].clone();
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    assert_eq!(report["rounds"].as_array().unwrap().len(), 2);
    assert_eq!(report["rounds"][0]["items"].as_array().unwrap().len(), 10);

    let small = write_manifest(images.path(), 2, 2);
    let (status, v) = call(&app, "POST", "/sa/evaluations", Some(json!({"approach": 4, "manifest": small})), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{v}");
    let (status, _) = call(&app, "POST", "/sa/evaluations", Some(json!({"approach": 9, "manifest": small})), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}
