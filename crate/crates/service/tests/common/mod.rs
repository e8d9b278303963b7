#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use eager_core::evalkit::{generate, seed_knowledge, GeneratedTrace, GeneratorConfig};
use eager_core::knowledge::save_kb;
use eager_core::mitigation::AgentRuntime;
use eager_core::representation::{save_model, FeaturizerConfig, ModelConfig, RepresentationModel};
use eager_core::trace::{segment_by_agent, ReasoningTrace};
use eager_service::{AppState, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::Value;
use tempfile::TempDir;
use tower::ServiceExt;

pub const STRICT: f64 = 0.9999;

pub fn small_model(seed: u64) -> RepresentationModel {
    RepresentationModel::init(
        ModelConfig {
            embed_dim: 16,
            hidden_dim: 32,
            trace_hidden_dim: 32,
            seed,
        },
        FeaturizerConfig::default(),
    )
    .unwrap()
}

pub fn corpus(seed: u64, n: usize, failure_rate: f64) -> Vec<GeneratedTrace> {
    generate(&GeneratorConfig {
        n_base_questions: n,
        variants_per_question: 3,
        failure_rate,
        seed,
        ..Default::default()
    })
    .unwrap()
}

pub fn failed(g: &GeneratedTrace) -> bool {
    g.trace.label.as_ref().is_some_and(|l| l.failed)
}

/// A model, a knowledge base seeded from the failing half of a corpus, and
/// a config pointing at both. Thresholds are strict so only traces stored
/// in the knowledge base are flagged.
pub struct Fixture {
    pub dir: TempDir,
    pub config: ServiceConfig,
    pub model: RepresentationModel,
    pub corpus: Vec<GeneratedTrace>,
}

impl Fixture {
    pub fn new(seed: u64) -> Self {
        let dir = TempDir::new().unwrap();
        let model = small_model(seed);
        let corpus = corpus(seed, 6, 0.5);
        let kb = seed_knowledge(
            corpus.iter().filter(|g| failed(g)).map(|g| &g.trace),
            &model,
            true,
        )
        .unwrap();
        let model_path = dir.path().join("model.bin");
        let kb_path = dir.path().join("knowledge.kb");
        save_model(&model, &model_path).unwrap();
        save_kb(&kb, &kb_path).unwrap();
        let ui_dir = dir.path().join("ui");
        std::fs::create_dir(&ui_dir).unwrap();
        std::fs::write(
            ui_dir.join("index.html"),
            "<!doctype html><title>inspect</title>",
        )
        .unwrap();
        let mut config = ServiceConfig {
            listen: "127.0.0.1:18080".into(),
            model_path,
            kb_path,
            ui_dir,
            ..Default::default()
        };
        config.detection.theta_fine = STRICT;
        config.detection.theta_coarse = STRICT;
        config.mitigation.call_timeout_ms = 5_000;
        Self {
            dir,
            config,
            model,
            corpus,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn state(&self) -> Arc<AppState> {
        Arc::new(AppState::from_config(self.config.clone()).unwrap())
    }

    pub fn state_with(&self, runtime: Option<Arc<dyn AgentRuntime>>) -> Arc<AppState> {
        Arc::new(AppState::with_runtime(self.config.clone(), runtime).unwrap())
    }

    pub fn failing(&self) -> Vec<&GeneratedTrace> {
        self.corpus.iter().filter(|g| failed(g)).collect()
    }

    pub fn clean(&self) -> Vec<&GeneratedTrace> {
        self.corpus.iter().filter(|g| !failed(g)).collect()
    }
}

pub async fn call(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Vec<u8>>,
) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map_or_else(Body::empty, Body::from)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, bytes)
}

pub async fn call_json(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let (status, bytes) = call(
        app,
        method,
        uri,
        body.map(|b| serde_json::to_vec(&b).unwrap()),
    )
    .await;
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes)
            .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, v)
}

/// Streams every segment of `trace` and finalizes it; returns the segment
/// responses and the finalize response.
pub async fn stream_trace(app: &Router, trace: &ReasoningTrace) -> (Vec<Value>, Value) {
    let mut verdicts = Vec::new();
    for seg in segment_by_agent(trace).unwrap() {
        let (s, v) = call_json(
            app,
            Method::POST,
            &format!("/v1/traces/{}/segments", trace.trace_id),
            Some(serde_json::to_value(&seg).unwrap()),
        )
        .await;
        assert_eq!(s, StatusCode::OK, "{v}");
        verdicts.push(v);
    }
    let (s, fin) = call_json(
        app,
        Method::POST,
        &format!("/v1/traces/{}/finalize", trace.trace_id),
        None,
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{fin}");
    (verdicts, fin)
}
