mod common;

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use axum::http::{Method, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use common::{call, call_json, stream_trace, Fixture};
use eager_core::detection::{detect_trace, DetectionVerdict};
use eager_core::knowledge::{load_kb, KnowledgeBase};
use eager_core::rca::IngestReceipt;
use eager_core::representation::save_model;
use eager_core::trace::{segment_by_agent, AgentSegment, ReasoningTrace};
use eager_service::api::{FinalizeResponse, Health, Page};
use eager_service::runtime::{ReinvokeRequest, ReplanRequest};
use eager_service::{router, KbFlush};
use serde_json::{json, Value};

fn verdict_body(trace_id: &str, reviewer: &str, at: i64, confirmed: bool) -> Value {
    json!({
        "trace_id": trace_id,
        "confirmed": confirmed,
        "failure_type": "IncorrectCode",
        "note": "checked",
        "reviewer": reviewer,
        "reviewed_at_ms": at,
    })
}

#[tokio::test]
async fn healthz_reports_model_and_sizes() {
    let fx = Fixture::new(1);
    let app = router(fx.state());
    let (s, v) = call_json(&app, Method::GET, "/v1/healthz", None).await;
    assert_eq!(s, StatusCode::OK);
    let h: Health = serde_json::from_value(v).unwrap();
    let kb = load_kb(&fx.config.kb_path).unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.model_version, fx.model.version);
    assert_eq!(
        (h.kb_sizes.fine, h.kb_sizes.coarse),
        (kb.fine().len(), kb.coarse().len())
    );
}

#[tokio::test]
async fn segment_errors_map_to_status_codes() {
    let fx = Fixture::new(2);
    let app = router(fx.state());
    let trace = &fx.clean()[0].trace;
    let segs = segment_by_agent(trace).unwrap();
    let uri = format!("/v1/traces/{}/segments", trace.trace_id);

    let (s, _) = call(&app, Method::POST, &uri, Some(b"{not json".to_vec())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let mut bad = segs[0].clone();
    bad.agent_role = "Bad Role".into();
    let (s, _) = call_json(
        &app,
        Method::POST,
        &uri,
        Some(serde_json::to_value(&bad).unwrap()),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let mut mixed = segs[0].clone();
    mixed.steps[0].agent_role = "someone_else".into();
    let (s, _) = call_json(
        &app,
        Method::POST,
        &uri,
        Some(serde_json::to_value(&mixed).unwrap()),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let empty = AgentSegment {
        steps: vec![],
        ..segs[0].clone()
    };
    let (s, _) = call_json(
        &app,
        Method::POST,
        &uri,
        Some(serde_json::to_value(&empty).unwrap()),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, _) = call_json(
        &app,
        Method::POST,
        &uri,
        Some(serde_json::to_value(&segs[1]).unwrap()),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT, "gap before the first segment");

    let (s, v) = call_json(
        &app,
        Method::POST,
        &uri,
        Some(serde_json::to_value(&segs[0]).unwrap()),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let v: DetectionVerdict = serde_json::from_value(v).unwrap();
    assert_eq!(v.segment_ordinal, Some(0));
    assert_eq!(v.agent_role.as_deref(), Some(segs[0].agent_role.as_str()));

    let (s, _) = call_json(
        &app,
        Method::POST,
        &uri,
        Some(serde_json::to_value(&segs[0]).unwrap()),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT, "duplicate ordinal");
}

#[tokio::test]
async fn finalize_lifecycle() {
    let fx = Fixture::new(3);
    let app = router(fx.state());
    let (s, _) = call_json(&app, Method::POST, "/v1/traces/nobody/finalize", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let trace = &fx.clean()[0].trace;
    let (_, fin) = stream_trace(&app, trace).await;
    let fin: FinalizeResponse = serde_json::from_value(fin).unwrap();
    assert!(!fin.verdict.anomalous);
    assert!(!fin.pending_review);
    assert!(fin.mitigation.is_none());

    let uri = format!("/v1/traces/{}/finalize", trace.trace_id);
    let (s, _) = call_json(&app, Method::POST, &uri, None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let seg = &segment_by_agent(trace).unwrap()[0];
    let (s, _) = call_json(
        &app,
        Method::POST,
        &format!("/v1/traces/{}/segments", trace.trace_id),
        Some(serde_json::to_value(seg).unwrap()),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT, "segments after finalize");

    let (s, view) = call_json(
        &app,
        Method::GET,
        &format!("/v1/traces/{}", trace.trace_id),
        None,
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(view["state"], "finalized");
    assert_eq!(
        view["segments"].as_array().unwrap().len(),
        segment_by_agent(trace).unwrap().len()
    );
    assert!(view["review"].is_null());
}

#[tokio::test]
async fn online_verdicts_match_offline_detection() {
    let fx = Fixture::new(4);
    let state = fx.state();
    let app = router(state.clone());
    let snap = state.snapshot();
    for g in &fx.corpus {
        let (segs, fin) = stream_trace(&app, &g.trace).await;
        let offline = detect_trace(&g.trace, &snap.model, &snap.kb, &state.detection).unwrap();
        let online: Vec<DetectionVerdict> = segs
            .into_iter()
            .chain([fin])
            .map(|v| serde_json::from_value(v).unwrap())
            .collect();
        assert_eq!(online, offline.verdicts);
        assert_eq!(
            offline.anomalous(),
            common::failed(g),
            "strict thresholds flag exactly the stored failures"
        );
    }
}

#[tokio::test]
async fn unresolved_failure_enters_review_with_a_finding() {
    let fx = Fixture::new(5);
    let app = router(fx.state());
    let g = fx.failing()[0];
    let (_, fin) = stream_trace(&app, &g.trace).await;
    let fin: FinalizeResponse = serde_json::from_value(fin).unwrap();
    assert!(fin.pending_review);
    let report = fin.mitigation.unwrap();
    assert_eq!(report.attempts, 0, "no runtime configured");
    assert!(report.enqueued);

    let (s, page) = call_json(&app, Method::GET, "/v1/reviews", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(page["total"], 1);
    let item = &page["items"][0];
    assert_eq!(item["trace_id"], g.trace.trace_id.as_str());
    assert_eq!(item["trigger"], "mitigation_unresolved");
    let label = g.trace.label.as_ref().unwrap();
    assert_eq!(
        item["finding"]["culprit_segment_ordinal"],
        json!(label.culprit_segment_ordinal)
    );

    let (_, view) = call_json(
        &app,
        Method::GET,
        &format!("/v1/traces/{}", g.trace.trace_id),
        None,
    )
    .await;
    assert_eq!(view["review"]["trace_id"], g.trace.trace_id.as_str());
}

#[tokio::test]
async fn disabled_mitigation_still_queues_failures() {
    let mut fx = Fixture::new(6);
    fx.config.mitigation.enabled = false;
    let app = router(fx.state());
    let (_, fin) = stream_trace(&app, &fx.failing()[0].trace).await;
    let fin: FinalizeResponse = serde_json::from_value(fin).unwrap();
    assert!(fin.pending_review && fin.mitigation.is_none());
}

#[tokio::test]
async fn expert_verdicts_are_ingested_once_and_persisted() {
    let fx = Fixture::new(7);
    let state = fx.state();
    let app = router(state.clone());
    let g = fx.failing()[0];
    let id = &g.trace.trace_id;
    stream_trace(&app, &g.trace).await;
    let before = state.kb_sizes();
    let uri = format!("/v1/reviews/{id}/verdict");

    let (s, _) = call_json(
        &app,
        Method::POST,
        &uri,
        Some(verdict_body("other", "alice", 1, true)),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "path and body disagree");
    let (s, _) = call(&app, Method::POST, &uri, Some(b"[]".to_vec())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let body = verdict_body(id, "alice", 1, true);
    let (s, v) = call_json(&app, Method::POST, &uri, Some(body.clone())).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let receipt: IngestReceipt = serde_json::from_value(v).unwrap();
    assert!(!receipt.replayed);
    assert_eq!((receipt.fine_ids.len(), receipt.coarse_ids.len()), (1, 1));
    let after = state.kb_sizes();
    assert_eq!(
        (after.fine, after.coarse),
        (before.fine + 1, before.coarse + 1)
    );
    assert_eq!(
        &load_kb(&fx.config.kb_path).unwrap(),
        state.snapshot().kb.as_ref(),
        "written through"
    );

    let (s, v) = call_json(&app, Method::POST, &uri, Some(body)).await;
    assert_eq!(s, StatusCode::OK);
    let again: IngestReceipt = serde_json::from_value(v).unwrap();
    assert!(again.replayed);
    assert_eq!(again.fine_ids, receipt.fine_ids);
    assert_eq!(state.kb_sizes(), after);

    let mut conflicting = verdict_body(id, "alice", 1, false);
    conflicting["failure_type"] = json!("RoundLimitation");
    let (s, v) = call_json(&app, Method::POST, &uri, Some(conflicting)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["receipt"]["fine_ids"], json!(receipt.fine_ids));
    assert_eq!(state.kb_sizes(), after);

    let (s, _) = call_json(
        &app,
        Method::POST,
        &uri,
        Some(verdict_body(id, "bob", 2, true)),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND, "no longer queued");
    let (_, page) = call_json(&app, Method::GET, "/v1/reviews", None).await;
    assert_eq!(page["total"], 0);
}

#[tokio::test]
async fn manual_flush_defers_writes_until_shutdown() {
    let mut fx = Fixture::new(8);
    fx.config.persistence.kb_flush = KbFlush::Manual;
    let on_disk = std::fs::read(&fx.config.kb_path).unwrap();
    let state = fx.state();
    let app = router(state.clone());
    let g = fx.failing()[0];
    stream_trace(&app, &g.trace).await;
    let uri = format!("/v1/reviews/{}/verdict", g.trace.trace_id);
    let (s, _) = call_json(
        &app,
        Method::POST,
        &uri,
        Some(verdict_body(&g.trace.trace_id, "a", 1, true)),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(std::fs::read(&fx.config.kb_path).unwrap(), on_disk);

    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    eager_service::serve(state.clone(), listener, async {})
        .await
        .unwrap();
    assert_eq!(
        &load_kb(&fx.config.kb_path).unwrap(),
        state.snapshot().kb.as_ref()
    );
}

#[tokio::test]
async fn user_reports_and_dismissal() {
    let fx = Fixture::new(9);
    let state = fx.state();
    let app = router(state.clone());
    let (s, _) = call_json(&app, Method::POST, "/v1/traces/ghost/report", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let trace = &fx.clean()[0].trace;
    stream_trace(&app, trace).await;
    let (s, item) = call_json(
        &app,
        Method::POST,
        &format!("/v1/traces/{}/report", trace.trace_id),
        None,
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(item["trigger"], "user_reported");
    assert!(item["finding"].is_object());

    let before = state.kb_sizes();
    let uri = format!("/v1/reviews/{}/dismiss", trace.trace_id);
    let (s, item) = call_json(&app, Method::POST, &uri, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(item["trace_id"], trace.trace_id.as_str());
    assert_eq!(state.kb_sizes(), before);
    let (s, _) = call_json(&app, Method::POST, &uri, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn review_listing_paginates_in_fifo_order() {
    let fx = Fixture::new(10);
    let app = router(fx.state());
    let ids: Vec<String> = fx
        .failing()
        .iter()
        .map(|g| g.trace.trace_id.clone())
        .collect();
    assert!(ids.len() >= 3);
    for g in fx.failing() {
        stream_trace(&app, &g.trace).await;
    }
    let (_, page) = call_json(&app, Method::GET, "/v1/reviews?offset=1&limit=2", None).await;
    let page: Page<Value> = serde_json::from_value(page).unwrap();
    assert_eq!(page.total, ids.len());
    let got: Vec<&str> = page
        .items
        .iter()
        .map(|i| i["trace_id"].as_str().unwrap())
        .collect();
    assert_eq!(got, vec![ids[1].as_str(), ids[2].as_str()]);
}

#[tokio::test]
async fn knowledge_browse_export_import() {
    let fx = Fixture::new(11);
    let state = fx.state();
    let app = router(state.clone());
    let kb = state.snapshot().kb.clone();

    let (s, page) = call_json(&app, Method::GET, "/v1/knowledge?tier=coarse&limit=2", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(page["total"], kb.coarse().len());
    assert_eq!(
        page["items"].as_array().unwrap().len(),
        2.min(kb.coarse().len())
    );
    assert!(page["items"][0].get("embedding").is_none());
    let (_, page) = call_json(&app, Method::GET, "/v1/knowledge", None).await;
    assert_eq!(page["total"], kb.fine().len());
    let (s, _) = call_json(&app, Method::GET, "/v1/knowledge?tier=medium", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, export) = call(&app, Method::POST, "/v1/knowledge/export", None).await;
    assert_eq!(s, StatusCode::OK);
    let parsed = KnowledgeBase::import_text(std::io::Cursor::new(&export)).unwrap();
    assert_eq!(&parsed, kb.as_ref());

    let (s, _) = call(
        &app,
        Method::POST,
        "/v1/knowledge/import",
        Some(b"garbage\n".to_vec()),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let mut other = fx.model.clone();
    other.version += 1;
    let mut foreign = Vec::new();
    KnowledgeBase::for_model(&other)
        .export_text(&mut foreign)
        .unwrap();
    let (s, _) = call(&app, Method::POST, "/v1/knowledge/import", Some(foreign)).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let mut empty = Vec::new();
    KnowledgeBase::for_model(&fx.model)
        .export_text(&mut empty)
        .unwrap();
    let (s, sizes) = call(&app, Method::POST, "/v1/knowledge/import", Some(empty)).await;
    assert_eq!(s, StatusCode::OK);
    let sizes: Value = serde_json::from_slice(&sizes).unwrap();
    assert_eq!(sizes, json!({"fine": 0, "coarse": 0}));
    assert!(load_kb(&fx.config.kb_path).unwrap().is_empty());

    let (s, _) = call(&app, Method::POST, "/v1/knowledge/import", Some(export)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(state.snapshot().kb.as_ref(), kb.as_ref());
}

#[tokio::test]
async fn reload_swaps_in_files_from_disk() {
    let fx = Fixture::new(12);
    let state = fx.state();
    let app = router(state.clone());
    let mut next = fx.model.clone();
    next.version += 1;
    save_model(&next, &fx.config.model_path).unwrap();
    let (s, _) = call_json(&app, Method::POST, "/v1/admin/reload", None).await;
    assert_eq!(
        s,
        StatusCode::INTERNAL_SERVER_ERROR,
        "stale knowledge is refused"
    );
    assert_eq!(state.snapshot().model.version, fx.model.version);

    std::fs::remove_file(&fx.config.kb_path).unwrap();
    let (s, h) = call_json(&app, Method::POST, "/v1/admin/reload", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(h["model_version"], next.version);
    assert_eq!(h["kb_sizes"], json!({"fine": 0, "coarse": 0}));
}

#[tokio::test]
async fn session_log_records_every_verdict() {
    let mut fx = Fixture::new(13);
    let log = fx.path("verdicts.jsonl");
    fx.config.persistence.session_log = Some(log.clone());
    let app = router(fx.state());
    let trace = &fx.clean()[0].trace;
    let (segs, _) = stream_trace(&app, trace).await;
    let lines = std::fs::read_to_string(&log).unwrap();
    let logged: Vec<DetectionVerdict> = lines
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(logged.len(), segs.len() + 1);
    assert!(logged.iter().all(|v| v.trace_id == trace.trace_id));
}

#[tokio::test]
async fn ui_bundle_is_served() {
    let fx = Fixture::new(14);
    let app = router(fx.state());
    let (s, body) = call(&app, Method::GET, "/ui/", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(String::from_utf8(body)
        .unwrap()
        .contains("<title>inspect</title>"));
    let (s, _) = call(&app, Method::GET, "/ui/missing.js", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

// ------------------------------------------------------- runtime callback

struct MockRuntime {
    corpus: Vec<(ReasoningTrace, ReasoningTrace)>,
    fail: bool,
    calls: AtomicU32,
}

async fn spawn_runtime(mock: Arc<MockRuntime>) -> String {
    let reinvoke = {
        let mock = mock.clone();
        move |Json(req): Json<ReinvokeRequest>| {
            let mock = mock.clone();
            async move {
                mock.calls.fetch_add(1, Ordering::SeqCst);
                if mock.fail {
                    return Err(StatusCode::BAD_GATEWAY);
                }
                let (_, clean) = mock
                    .corpus
                    .iter()
                    .find(|(t, _)| t.trace_id == req.trace_id)
                    .unwrap();
                let seg = segment_by_agent(clean).unwrap()[req.segment_ordinal as usize].clone();
                assert_eq!(seg.agent_role, req.agent_role);
                assert!(!req.reflection_context.is_empty());
                Ok(Json(seg))
            }
        }
    };
    let replan = move |Json(req): Json<ReplanRequest>| {
        let mock = mock.clone();
        async move {
            mock.calls.fetch_add(1, Ordering::SeqCst);
            let (_, clean) = mock
                .corpus
                .iter()
                .find(|(t, _)| t.trace_id == req.trace_id)
                .unwrap();
            Json(clean.clone())
        }
    };
    let app = Router::new()
        .route("/reinvoke", post(reinvoke))
        .route("/replan", post(replan));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn http_runtime_recovers_the_culprit() {
    let mut fx = Fixture::new(15);
    let mock = Arc::new(MockRuntime {
        corpus: fx
            .corpus
            .iter()
            .map(|g| (g.trace.clone(), g.clean.clone()))
            .collect(),
        fail: false,
        calls: AtomicU32::new(0),
    });
    fx.config.mitigation.runtime_url = Some(spawn_runtime(mock.clone()).await);
    let app = router(fx.state());
    let g = fx.failing()[0];
    let (_, fin) = stream_trace(&app, &g.trace).await;
    let fin: FinalizeResponse = serde_json::from_value(fin).unwrap();
    let report = fin.mitigation.unwrap();
    assert!(report.resolved, "{report:?}");
    assert_eq!(report.attempts, 1);
    assert!(!fin.pending_review);
    assert_eq!(mock.calls.load(Ordering::SeqCst), 1);
    let (_, view) = call_json(
        &app,
        Method::GET,
        &format!("/v1/traces/{}", g.trace.trace_id),
        None,
    )
    .await;
    let o = g
        .trace
        .label
        .as_ref()
        .unwrap()
        .culprit_segment_ordinal
        .unwrap() as usize;
    let clean_seg = &segment_by_agent(&g.clean).unwrap()[o];
    assert_eq!(
        view["segments"][o],
        serde_json::to_value(clean_seg).unwrap()
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn failing_runtime_exhausts_budget_then_queues() {
    let mut fx = Fixture::new(16);
    let mock = Arc::new(MockRuntime {
        corpus: fx
            .corpus
            .iter()
            .map(|g| (g.trace.clone(), g.clean.clone()))
            .collect(),
        fail: true,
        calls: AtomicU32::new(0),
    });
    fx.config.mitigation.runtime_url = Some(spawn_runtime(mock.clone()).await);
    fx.config.mitigation.budget = 3;
    let app = router(fx.state());
    let (_, fin) = stream_trace(&app, &fx.failing()[0].trace).await;
    let fin: FinalizeResponse = serde_json::from_value(fin).unwrap();
    let report = fin.mitigation.unwrap();
    assert_eq!(report.attempts, 3);
    assert_eq!(report.runtime_errors.len(), 3);
    assert!(fin.pending_review && report.enqueued);
    assert_eq!(mock.calls.load(Ordering::SeqCst), 3);
}
