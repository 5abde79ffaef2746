//! The adapter contract suite and the HTTP client, exercised against an
//! in-process mock adapter served by axum.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use cotmr_core::backend::{BackendError, ChatBackend, EmbedBackend, EmbedBatch, HttpBackend};
use cotmr_core::contract::{run_contract, CheckOutcome, ContractOptions};
use cotmr_core::embedding::{read_embeddings, MockEmbedder};
use cotmr_core::pipeline::{self, RankingsFile, RunConfig};
use cotmr_core::prompting::{ChatMessage, ChatRequest, Decoding};
use cotmr_core::{build_prompt, MockChatBackend, PromptMode, Scale};
use serde_json::{json, Value};

#[derive(Clone, Copy, PartialEq)]
enum Behaviour {
    Conformant,
    /// Unnormalized vectors and 200 on empty input.
    Sloppy,
    /// Every endpoint answers 503.
    Loading,
}

struct Adapter {
    embedder: MockEmbedder,
    chat: MockChatBackend,
    behaviour: Behaviour,
    seen_auth: Mutex<Vec<String>>,
}

type Shared = Arc<Adapter>;
type Reply = (StatusCode, Json<Value>);

fn error(status: u16, message: impl Into<String>) -> Reply {
    (StatusCode::from_u16(status).unwrap(), Json(json!({ "error": message.into() })))
}

fn note_auth(state: &Adapter, headers: &HeaderMap) {
    if let Some(v) = headers.get("authorization").and_then(|v| v.to_str().ok()) {
        state.seen_auth.lock().unwrap().push(v.to_string());
    }
}

async fn health(State(s): State<Shared>, headers: HeaderMap) -> Reply {
    note_auth(&s, &headers);
    if s.behaviour == Behaviour::Loading {
        return error(503, "loading");
    }
    let body = json!({ "mode": "mock", "embed_model": s.embedder.model, "chat_model": "mock-canned", "dim": s.embedder.dim });
    (StatusCode::OK, Json(body))
}

fn embed(s: &Adapter, body: &Value, field: &str, run: impl Fn(&[String]) -> Result<EmbedBatch, BackendError>) -> Reply {
    if s.behaviour == Behaviour::Loading {
        return error(503, "loading");
    }
    let Some(items) = body.get(field).and_then(Value::as_array) else {
        return error(400, format!("missing {field}"));
    };
    let Some(items) = items.iter().map(|v| v.as_str().map(String::from)).collect::<Option<Vec<_>>>() else {
        return error(400, format!("{field} must be strings"));
    };
    if items.is_empty() && s.behaviour == Behaviour::Sloppy {
        return (StatusCode::OK, Json(json!({ "dim": s.embedder.dim, "vectors": [], "truncated": [] })));
    }
    match run(&items) {
        Ok(mut batch) => {
            if s.behaviour == Behaviour::Sloppy {
                batch.vectors.iter_mut().flatten().for_each(|x| *x *= 2.0);
            }
            (StatusCode::OK, Json(serde_json::to_value(batch).unwrap()))
        }
        Err(BackendError::Rejected { status, message }) => error(status, message),
        Err(e) => error(500, e.to_string()),
    }
}

async fn embed_text(State(s): State<Shared>, headers: HeaderMap, Json(body): Json<Value>) -> Reply {
    note_auth(&s, &headers);
    embed(&s, &body, "texts", |t| s.embedder.embed_texts(t))
}

async fn embed_image(State(s): State<Shared>, headers: HeaderMap, Json(body): Json<Value>) -> Reply {
    note_auth(&s, &headers);
    embed(&s, &body, "locators", |l| s.embedder.embed_images(l))
}

async fn chat(State(s): State<Shared>, headers: HeaderMap, Json(body): Json<Value>) -> Reply {
    note_auth(&s, &headers);
    if s.behaviour == Behaviour::Loading {
        return error(503, "loading");
    }
    let Some(messages) = body.get("messages") else {
        return error(400, "missing messages");
    };
    let messages: Vec<ChatMessage> = match serde_json::from_value(messages.clone()) {
        Ok(m) => m,
        Err(e) => return error(400, e.to_string()),
    };
    let request = ChatRequest { messages, decoding: Decoding::default() };
    match s.chat.chat(&request) {
        Ok(text) => (StatusCode::OK, Json(json!({ "text": text }))),
        Err(BackendError::Rejected { status, message }) => error(status, message),
        Err(e) => error(500, e.to_string()),
    }
}

/// Serves the adapter on an ephemeral port from a background runtime and
/// returns its base URL.
fn serve(adapter: Adapter) -> (String, Shared) {
    let state = Arc::new(adapter);
    let app = Router::new()
        .route("/health", get(health))
        .route("/v1/embed/text", post(embed_text))
        .route("/v1/embed/image", post(embed_image))
        .route("/v1/chat", post(chat))
        .with_state(state.clone());
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    (format!("http://{addr}"), state)
}

fn probe_adapter(behaviour: Behaviour) -> Adapter {
    let mut chat = MockChatBackend::default();
    chat.insert("file:///probe.png", Scale::Image, vec!["FINAL_CAPTION: a blue probe".into()]);
    chat.insert("contract-probe", Scale::Image, vec!["FINAL_CAPTION: a blue probe".into()]);
    Adapter {
        embedder: MockEmbedder::new("mock-hash", 16),
        chat,
        behaviour,
        seen_auth: Mutex::new(Vec::new()),
    }
}

/// A port nothing listens on.
fn dead_url() -> String {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    format!("http://{addr}")
}

#[test]
fn contract_suite_passes_against_mock_adapter() {
    let (url, _) = serve(probe_adapter(Behaviour::Conformant));
    let opts = ContractOptions { image_locators: vec!["file:///probe.png".into(), "file:///other.png".into()] };
    let checks = run_contract(&HttpBackend::new(url), &opts);
    for c in &checks {
        println!("{c}");
    }
    assert_eq!(checks.len(), 9);
    assert!(checks.iter().all(|c| c.passed()), "{checks:?}");
}

#[test]
fn image_checks_skip_without_locators() {
    let (url, _) = serve(probe_adapter(Behaviour::Conformant));
    let checks = run_contract(&HttpBackend::new(url), &ContractOptions::default());
    let skipped: Vec<_> = checks.iter().filter(|c| matches!(c.outcome, CheckOutcome::Skip(_))).collect();
    assert_eq!(skipped.len(), 1);
    assert_eq!(skipped[0].name, "embed_image_unit_norm");
    assert!(checks.iter().all(|c| !matches!(c.outcome, CheckOutcome::Fail(_))));
}

#[test]
fn contract_suite_flags_a_sloppy_adapter() {
    let (url, _) = serve(probe_adapter(Behaviour::Sloppy));
    let checks = run_contract(&HttpBackend::new(url), &ContractOptions::default());
    let failed: Vec<&str> =
        checks.iter().filter(|c| matches!(c.outcome, CheckOutcome::Fail(_))).map(|c| c.name).collect();
    assert_eq!(failed, ["embed_text_unit_norm", "embed_text_empty_is_400", "embed_image_empty_is_400"]);
}

#[test]
fn unreachable_adapter_fails_health_only() {
    let checks = run_contract(&HttpBackend::new(dead_url()), &ContractOptions::default());
    assert_eq!(checks.len(), 1);
    assert_eq!(checks[0].name, "health");
    assert!(!checks[0].passed());
}

#[test]
fn client_maps_statuses_to_typed_errors() {
    let (url, _) = serve(probe_adapter(Behaviour::Loading));
    let backend = HttpBackend::new(url);
    assert!(matches!(backend.health(), Err(BackendError::Unavailable(_))));
    assert!(matches!(backend.embed_texts(&["x".into()]), Err(BackendError::Unavailable(_))));

    let (url, _) = serve(probe_adapter(Behaviour::Conformant));
    let backend = HttpBackend::new(url);
    let err = backend.embed_texts(&[]).unwrap_err();
    assert!(matches!(err, BackendError::Rejected { status: 400, .. }), "{err:?}");
    let req = build_prompt(Scale::Object, PromptMode::NoCot, "unknown-image", "make it red");
    assert!(matches!(backend.chat(&req), Err(BackendError::Rejected { status: 404, .. })));

    let dead = HttpBackend::new(dead_url());
    assert!(matches!(dead.embed_texts(&["x".into()]), Err(BackendError::Unavailable(_))));
}

#[test]
fn client_sends_bearer_token_and_resolves_locators() {
    let (url, state) = serve(probe_adapter(Behaviour::Conformant));
    let locators = HashMap::from([("probe".to_string(), "file:///probe.png".to_string())]);
    let backend = HttpBackend::new(url).with_token(Some("s3cret".into())).with_locators(locators).connect().unwrap();
    let req = build_prompt(Scale::Image, PromptMode::CircotFewShot, "probe", "make it blue");
    assert_eq!(backend.chat(&req).unwrap(), "FINAL_CAPTION: a blue probe");
    assert_eq!(backend.model_id(), "mock-hash");
    assert!(backend.backend_id().contains("mock-canned"));
    let seen = state.seen_auth.lock().unwrap().clone();
    assert!(!seen.is_empty());
    assert!(seen.iter().all(|h| h == "Bearer s3cret"));
}

fn load_cfg(dir: &Path) -> RunConfig {
    RunConfig::load(&dir.join(pipeline::CONFIG_FILE)).unwrap()
}

/// An adapter answering from a synthetic split's fixture files.
fn fixture_adapter(dir: &Path) -> Adapter {
    let images = read_embeddings(&dir.join("mock_images.emb.jsonl")).unwrap();
    let texts = read_embeddings(&dir.join("mock_texts.emb.jsonl")).unwrap();
    Adapter {
        embedder: MockEmbedder::new("mock-planted", images.dim).with_images(images.records).with_texts(texts.records),
        chat: MockChatBackend::load(&dir.join("replies.jsonl")).unwrap(),
        behaviour: Behaviour::Conformant,
        seen_auth: Mutex::new(Vec::new()),
    }
}

#[test]
fn pipeline_over_http_matches_in_process_mocks() {
    let dir = tempfile::tempdir().unwrap();
    pipeline::run_synth(dir.path(), 3, 12, 40, 16).unwrap();
    let local = load_cfg(dir.path());
    let (_, _, local_report) = pipeline::run_all(&local).unwrap();

    let (url, _) = serve(fixture_adapter(dir.path()));
    let mut remote = load_cfg(dir.path());
    remote.backend = Some(url);
    remote.replies = None;
    remote.mock_images = None;
    remote.mock_texts = None;
    remote.out = dir.path().join("remote");
    let (reason, retrieve, remote_report) = pipeline::run_all(&remote).unwrap();
    assert!(reason.failed.is_empty() && retrieve.failed.is_empty());

    let a = RankingsFile::read(&local.rankings_path()).unwrap();
    let b = RankingsFile::read(&remote.rankings_path()).unwrap();
    assert_eq!(a.rankings, b.rankings);
    assert_eq!(local_report.metrics, remote_report.metrics);
    assert_ne!(local_report.fingerprint, remote_report.fingerprint, "backend identity is part of the fingerprint");
}

#[test]
fn loading_adapter_is_reported_as_unavailable() {
    let dir = tempfile::tempdir().unwrap();
    pipeline::run_synth(dir.path(), 3, 4, 12, 8).unwrap();
    let (url, _) = serve(probe_adapter(Behaviour::Loading));
    let mut cfg = load_cfg(dir.path());
    cfg.backend = Some(url);
    let err = pipeline::run_embed(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    let err = pipeline::run_reason(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}
