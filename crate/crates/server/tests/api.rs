use std::path::Path;
use std::thread;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use pixelpick_core::datasets::{generate_synthetic, Dataset, SyntheticSpec};
use pixelpick_core::oracle::{HumanLink, HumanOracle, Oracle};
use pixelpick_core::{AnnotationDatabase, LabelSource, PixelRef};
use pixelpick_server::{router, AppState};
use serde_json::{json, Value};
use tower::ServiceExt;

fn dataset() -> Dataset {
    generate_synthetic(&SyntheticSpec { num_images: 3, height: 16, width: 16, seed: 2, ..Default::default() }).unwrap()
}

async fn call(state: &AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

fn ten_proposals() -> Value {
    // interleaved across two images on purpose
    let ps: Vec<Value> = (0..10)
        .map(|k| json!({"image": if k % 2 == 0 { "img_0000" } else { "img_0001" }, "row": k, "col": 3}))
        .collect();
    json!({ "proposals": ps })
}

fn line_count(path: &Path) -> usize {
    std::fs::read_to_string(path).map(|s| s.lines().count()).unwrap_or(0)
}

#[tokio::test]
async fn full_propose_session() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("labels.jsonl");
    let state = AppState::open(dataset(), &out).unwrap();

    let (status, created) = call(&state, "POST", "/sessions", Some(ten_proposals())).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(created["session_id"], "s1");
    let (_, progress) = call(&state, "GET", "/sessions/s1/progress", None).await;
    assert_eq!((progress["done"].as_u64(), progress["total"].as_u64()), (Some(0), Some(10)));

    let mut served = Vec::new();
    for k in 0..10 {
        let (status, next) = call(&state, "GET", "/sessions/s1/next", None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(next["done"], false);
        let p = &next["proposal"];
        assert_eq!(p["index"], k);
        assert_eq!(next["keys"][0]["key"], "a");
        served.push((p["image_id"].as_str().unwrap().to_string(), p["row"].as_u64().unwrap()));
        let class = k % 4;
        let (status, ack) =
            call(&state, "POST", "/sessions/s1/labels", Some(json!({"index": k, "class": class, "elapsed_ms": 100 * (k + 1)}))).await;
        assert_eq!(status, StatusCode::OK, "{ack}");
        assert_eq!(ack["cursor"], k + 1);
        assert_eq!(line_count(&out), (k + 1) as usize);
    }
    // grouped by image, first-appearance order, stable inside each image
    let expected: Vec<(String, u64)> = [0, 2, 4, 6, 8]
        .iter()
        .map(|&r| ("img_0000".to_string(), r))
        .chain([1, 3, 5, 7, 9].iter().map(|&r| ("img_0001".to_string(), r)))
        .collect();
    assert_eq!(served, expected);

    let (_, next) = call(&state, "GET", "/sessions/s1/next", None).await;
    assert_eq!(next["done"], true);
    let (_, progress) = call(&state, "GET", "/sessions/s1/progress", None).await;
    assert_eq!(progress["done"], 10);
    assert_eq!(progress["mean_ms"], 550.0);
    assert_eq!(progress["per_class"], json!([3, 3, 2, 2]));

    let db = AnnotationDatabase::load(&out, 4).unwrap();
    let order: Vec<(String, u64)> = db.entries().iter().map(|e| (e.pixel.image_id.clone(), e.pixel.row as u64)).collect();
    assert_eq!(order, expected);
    assert!(db.entries().iter().all(|e| e.source == LabelSource::Human));
}

#[tokio::test]
async fn submission_errors() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::open(dataset(), &dir.path().join("l.jsonl")).unwrap();
    call(&state, "POST", "/sessions", Some(ten_proposals())).await;

    let (status, err) = call(&state, "POST", "/sessions/s1/labels", Some(json!({"index": 1, "class": 0}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["error"], "wrong_index");
    assert_eq!(err["cursor"], 0);
    assert!(err["detail"].is_string());

    let (status, err) = call(&state, "POST", "/sessions/s1/labels", Some(json!({"index": 0, "class": 4}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"], "invalid_class");

    let (status, _) = call(&state, "POST", "/sessions/s1/labels", Some(json!({"index": 0, "class": 1}))).await;
    assert_eq!(status, StatusCode::OK);
    let (status, err) = call(&state, "POST", "/sessions/s1/labels", Some(json!({"index": 0, "class": 1}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["cursor"], 1);

    let (status, err) = call(&state, "GET", "/sessions/s9/next", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["error"], "unknown_session");
    let (status, _) = call(&state, "GET", "/sessions/bogus/progress", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, err) = call(&state, "POST", "/sessions/s1/labels", Some(json!({"nope": true}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"], "bad_request");

    let (status, err) = call(&state, "POST", "/sessions/s1/picks", Some(json!({"image": "img_0000", "row": 0, "col": 0, "class": 0}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["error"], "wrong_mode");
}

#[tokio::test]
async fn session_creation_rules() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::open(dataset(), &dir.path().join("l.jsonl")).unwrap();
    let (status, err) = call(&state, "POST", "/sessions", Some(json!({"proposals": []}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"], "empty_proposals");
    let (status, err) = call(&state, "POST", "/sessions", Some(json!({"proposals": [{"image": "zzz", "row": 0, "col": 0}]}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"], "unknown_image");
    let (status, err) = call(&state, "POST", "/sessions", Some(json!({"proposals": [{"image": "img_0000", "row": 16, "col": 0}]}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"], "out_of_bounds");
    let dup = json!({"proposals": [{"image": "img_0000", "row": 1, "col": 0}, {"image": "img_0000", "row": 1, "col": 0}]});
    assert_eq!(call(&state, "POST", "/sessions", Some(dup)).await.1["error"], "duplicate_proposal");
    let (status, created) = call(&state, "POST", "/sessions", Some(json!({"proposals": [], "mode": "human_pick"}))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(created["session_id"], "s1");
    assert_eq!(created["mode"], "human_pick");
}

#[tokio::test]
async fn human_pick_session() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("l.jsonl");
    let state = AppState::open(dataset(), &out).unwrap();
    call(&state, "POST", "/sessions", Some(json!({"mode": "human_pick"}))).await;
    let pick = json!({"image": "img_0002", "row": 4, "col": 5, "class": 2, "elapsed_ms": 900});
    let (status, ack) = call(&state, "POST", "/sessions/s1/picks", Some(pick.clone())).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(ack["cursor"], 1);
    let (status, err) = call(&state, "POST", "/sessions/s1/picks", Some(pick)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["error"], "already_labelled");
    let (status, err) =
        call(&state, "POST", "/sessions/s1/picks", Some(json!({"image": "img_0002", "row": 40, "col": 5, "class": 2}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"], "out_of_bounds");
    assert_eq!(line_count(&out), 1);
    let (_, progress) = call(&state, "GET", "/sessions/s1/progress", None).await;
    assert_eq!(progress["done"], 1);
    assert_eq!(progress["mean_ms"], 900.0);
}

#[tokio::test]
async fn restart_restores_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("labels.jsonl");
    {
        let state = AppState::open(dataset(), &out).unwrap();
        call(&state, "POST", "/sessions", Some(ten_proposals())).await;
        call(&state, "POST", "/sessions", Some(json!({"mode": "human_pick"}))).await;
        for k in 0..4 {
            call(&state, "POST", "/sessions/s1/labels", Some(json!({"index": k, "class": 1, "elapsed_ms": 10}))).await;
        }
        call(&state, "POST", "/sessions/s2/picks", Some(json!({"image": "img_0002", "row": 0, "col": 0, "class": 3, "elapsed_ms": 30}))).await;
    }
    // an interrupted append leaves half a line behind
    let mut text = std::fs::read_to_string(&out).unwrap();
    text.push_str("{\"image\":\"img_0000\",\"row\"");
    std::fs::write(&out, text).unwrap();

    let state = AppState::open(dataset(), &out).unwrap();
    let (_, progress) = call(&state, "GET", "/sessions/s1/progress", None).await;
    assert_eq!((progress["done"].as_u64(), progress["total"].as_u64()), (Some(4), Some(10)));
    assert_eq!(progress["mean_ms"], 10.0);
    let (_, next) = call(&state, "GET", "/sessions/s1/next", None).await;
    assert_eq!(next["proposal"]["index"], 4);
    let (_, progress) = call(&state, "GET", "/sessions/s2/progress", None).await;
    assert_eq!(progress["done"], 1);
    let (status, _) = call(&state, "POST", "/sessions/s1/labels", Some(json!({"index": 4, "class": 0}))).await;
    assert_eq!(status, StatusCode::OK);
    let (_, created) = call(&state, "POST", "/sessions", Some(json!({"mode": "human_pick"}))).await;
    assert_eq!(created["session_id"], "s3");
    assert_eq!(AnnotationDatabase::load(&out, 4).unwrap().len(), 6);
}

#[tokio::test]
async fn images_and_classes() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::open(dataset(), &dir.path().join("l.jsonl")).unwrap();
    let resp = router(state.clone()).oneshot(Request::get("/images/img_0001").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&bytes[1..4], b"PNG");
    let (status, err) = call(&state, "GET", "/images/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["error"], "unknown_image");
    let (_, keys) = call(&state, "GET", "/classes", None).await;
    assert_eq!(keys.as_array().unwrap().len(), 4);
    assert_eq!(keys[1]["name"], "class_1");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn engine_requests_become_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("l.jsonl");
    let state = AppState::open(dataset(), &out).unwrap();
    let link = HumanLink::new();
    let watcher = pixelpick_server::spawn_link_watcher(state.clone(), link.clone());

    let engine_link = link.clone();
    let engine = thread::spawn(move || {
        let queries: Vec<PixelRef> = (0..3).map(|r| PixelRef::new("img_0002", r, 1)).collect();
        HumanOracle::new(engine_link).label(&queries, 0)
    });

    let mut id = None;
    for _ in 0..100 {
        let (_, list) = call(&state, "GET", "/sessions", None).await;
        if let Some(s) = list.as_array().unwrap().first() {
            id = Some(s["session_id"].as_str().unwrap().to_string());
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    let id = id.expect("session for the engine request");
    for k in 0..3 {
        let (status, _) = call(&state, "POST", &format!("/sessions/{id}/labels"), Some(json!({"index": k, "class": 2}))).await;
        assert_eq!(status, StatusCode::OK);
    }
    let labels = engine.join().unwrap().unwrap();
    assert_eq!(labels.iter().map(|l| (l.pixel.row, l.class_id)).collect::<Vec<_>>(), vec![(0, 2), (1, 2), (2, 2)]);
    assert_eq!(line_count(&out), 3);
    link.close();
    watcher.await.unwrap();
}
