use std::io::Write;
use std::path::Path;

use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use prefrank_core::bayesopt::sobol;
use prefrank_core::dataset::{write_pool_images, write_records, CandidatePool};
use prefrank_core::emotion::Emotion;
use prefrank_core::face::{ActuatorVector, FaceSim};
use prefrank_core::ranking::{consistency_check, LogEntry, Ranking};
use prefrank_service::{router, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

const N: usize = 9;

struct Fixture {
    _dir: tempfile::TempDir,
    cfg: ServiceConfig,
    latent: Vec<f64>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let sim = FaceSim::default();
    let acts: Vec<ActuatorVector> =
        sobol::points(N, 35, 5).into_iter().map(|v| ActuatorVector::new(v).unwrap()).collect();
    let latent = acts.iter().map(|a| sim.latent_intensity(a, Emotion::Happiness).unwrap()).collect();
    let pool = CandidatePool::render(&sim, acts).unwrap();
    let records = write_pool_images(dir.path(), &pool).unwrap();
    let manifest = dir.path().join("subset.jsonl");
    write_records(&manifest, &records).unwrap();
    let cfg = ServiceConfig { pool: manifest, data_dir: dir.path().join("sessions"), static_dir: None };
    Fixture { _dir: dir, cfg, latent }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header(header::CONTENT_TYPE, "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn create(app: &Router) -> String {
    let (status, body) =
        call(app, "POST", "/api/sessions", Some(json!({"annotator_id": "ann1", "emotion": "happiness", "seed": 3}))).await;
    assert_eq!(status, StatusCode::CREATED);
    body["session_id"].as_str().unwrap().to_string()
}

fn oracle_pick(latent: &[f64], next: &Value) -> (u64, u32) {
    let l = next["left"]["id"].as_u64().unwrap() as u32;
    let r = next["right"]["id"].as_u64().unwrap() as u32;
    let w = if latent[l as usize] > latent[r as usize] { l } else { r };
    (next["query_id"].as_u64().unwrap(), w)
}

#[tokio::test]
async fn full_session_lifecycle() {
    let fx = fixture();
    let app = router(&fx.cfg).unwrap();
    let id = create(&app).await;
    assert_eq!(id, "ann1-happiness");

    let (status, again) =
        call(&app, "POST", "/api/sessions", Some(json!({"annotator_id": "ann1", "emotion": "happiness", "seed": 3}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(again["resumed"], true);
    let (status, _) =
        call(&app, "POST", "/api/sessions", Some(json!({"annotator_id": "ann1", "emotion": "happiness", "seed": 4}))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, first) = call(&app, "GET", &format!("/api/sessions/{id}/next"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(first["progress"]["answered_count"], 0);
    let (_, repeat) = call(&app, "GET", &format!("/api/sessions/{id}/next"), None).await;
    assert_eq!(repeat["query_id"], first["query_id"]);

    let (qid, winner) = oracle_pick(&fx.latent, &first);
    let (status, _) =
        call(&app, "POST", &format!("/api/sessions/{id}/answer"), Some(json!({"query_id": qid, "winner": 999}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) =
        call(&app, "POST", &format!("/api/sessions/{id}/answer"), Some(json!({"query_id": qid + 1, "winner": winner})))
            .await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, ack) =
        call(&app, "POST", &format!("/api/sessions/{id}/answer"), Some(json!({"query_id": qid, "winner": winner}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ack["duplicate"], false);
    assert_eq!(ack["next"]["progress"]["answered_count"], 1);
    let (status, dup) =
        call(&app, "POST", &format!("/api/sessions/{id}/answer"), Some(json!({"query_id": qid, "winner": winner}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(dup["duplicate"], true);
    assert_eq!(dup["next"]["progress"]["answered_count"], 1);
    let loser = if first["left"]["id"].as_u64().unwrap() as u32 == winner { &first["right"] } else { &first["left"] };
    let (status, _) = call(
        &app,
        "POST",
        &format!("/api/sessions/{id}/answer"),
        Some(json!({"query_id": qid, "winner": loser["id"]})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, _) = call(&app, "GET", &format!("/api/sessions/{id}/ranking"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let mut answers = 1;
    loop {
        let (_, next) = call(&app, "GET", &format!("/api/sessions/{id}/next"), None).await;
        if next["completed"] == true {
            assert_eq!(next["ranking_url"], format!("/api/sessions/{id}/ranking"));
            break;
        }
        let (qid, winner) = oracle_pick(&fx.latent, &next);
        let (status, _) =
            call(&app, "POST", &format!("/api/sessions/{id}/answer"), Some(json!({"query_id": qid, "winner": winner})))
                .await;
        assert_eq!(status, StatusCode::OK);
        answers += 1;
    }
    assert!(answers <= N * 4);

    let (status, ranking) = call(&app, "GET", &format!("/api/sessions/{id}/ranking"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ranking["consistency"], 1.0);
    let order: Vec<u32> = serde_json::from_value(ranking["ranking"].clone()).unwrap();
    let mut expected: Vec<u32> = (0..N as u32).collect();
    expected.sort_by(|a, b| fx.latent[*b as usize].total_cmp(&fx.latent[*a as usize]));
    assert_eq!(order, expected);

    let (_, progress) = call(&app, "GET", &format!("/api/sessions/{id}/progress"), None).await;
    assert_eq!(progress["completed"], true);
    assert_eq!(progress["answered_count"], answers);
    assert_eq!(progress["estimated_remaining"], 0);

    // the session file holds exactly one record per answer plus header and ranking
    let text = std::fs::read_to_string(fx.cfg.data_dir.join("session-ann1-happiness.jsonl")).unwrap();
    assert_eq!(text.lines().count(), answers + 2);
    let log: Vec<LogEntry> = text.lines().skip(1).take(answers).map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(log.iter().all(|e| e.timestamp.is_some()));
    assert_eq!(consistency_check(&Ranking::new(order).unwrap(), &log).unwrap(), 1.0);
}

#[tokio::test]
async fn unknown_things_are_not_found() {
    let fx = fixture();
    let app = router(&fx.cfg).unwrap();
    for uri in ["/api/sessions/nobody-anger/next", "/api/sessions/nobody-anger/progress", "/api/images/77.png"] {
        let (status, _) = call(&app, "GET", uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
    }
    let (status, _) =
        call(&app, "POST", "/api/sessions/nobody-anger/answer", Some(json!({"query_id": 0, "winner": 1}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) =
        call(&app, "POST", "/api/sessions", Some(json!({"annotator_id": "../x", "emotion": "anger"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "POST", "/api/sessions", Some(json!({"annotator_id": "a", "emotion": "joy"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(
        &app,
        "POST",
        "/api/sessions",
        Some(json!({"annotator_id": "a", "emotion": "anger", "pool_ref": "other.jsonl"})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn images_are_immutable_and_cacheable() {
    let fx = fixture();
    let app = router(&fx.cfg).unwrap();
    let get = |etag: Option<String>| {
        let app = app.clone();
        async move {
            let mut req = Request::builder().uri("/api/images/3.png");
            if let Some(e) = etag {
                req = req.header(header::IF_NONE_MATCH, e);
            }
            app.oneshot(req.body(Body::empty()).unwrap()).await.unwrap()
        }
    };
    let a = get(None).await;
    assert_eq!(a.status(), StatusCode::OK);
    assert_eq!(a.headers()[header::CONTENT_TYPE], "image/png");
    let etag = a.headers()[header::ETAG].to_str().unwrap().to_string();
    let a_bytes = to_bytes(a.into_body(), usize::MAX).await.unwrap();
    let b_bytes = to_bytes(get(None).await.into_body(), usize::MAX).await.unwrap();
    assert_eq!(a_bytes, b_bytes);
    assert_eq!(a_bytes, std::fs::read(fx._dir.path().join("pool/0003.png")).unwrap());
    assert_eq!(get(Some(etag)).await.status(), StatusCode::NOT_MODIFIED);
}

fn append_raw(path: &Path, text: &str) {
    let mut f = std::fs::OpenOptions::new().append(true).open(path).unwrap();
    f.write_all(text.as_bytes()).unwrap();
}

#[tokio::test]
async fn restart_resumes_at_pending_query() {
    let fx = fixture();
    let id = {
        let app = router(&fx.cfg).unwrap();
        let id = create(&app).await;
        for _ in 0..4 {
            let (_, next) = call(&app, "GET", &format!("/api/sessions/{id}/next"), None).await;
            let (qid, winner) = oracle_pick(&fx.latent, &next);
            call(&app, "POST", &format!("/api/sessions/{id}/answer"), Some(json!({"query_id": qid, "winner": winner})))
                .await;
        }
        id
    };
    let (_, before) = call(&router(&fx.cfg).unwrap(), "GET", &format!("/api/sessions/{id}/next"), None).await;
    assert_eq!(before["query_id"], 4);

    // a crash mid-append leaves a torn, unacknowledged record
    let file = fx.cfg.data_dir.join("session-ann1-happiness.jsonl");
    append_raw(&file, "{\"query_id\":4,\"left_id\":");
    let app = router(&fx.cfg).unwrap();
    let (status, after) = call(&app, "GET", &format!("/api/sessions/{id}/next"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(after["query_id"], before["query_id"]);
    assert_eq!(after["left"], before["left"]);
    assert_eq!(after["right"], before["right"]);
    assert_eq!(after["progress"]["answered_count"], 4);

    let (_, list) = call(&app, "GET", "/api/sessions", None).await;
    assert_eq!(list.as_array().unwrap().len(), 1);
}
