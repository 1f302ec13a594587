use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use shapealign::dataset::{
    filter, load_annotations, save_annotations, AnnotationRecord, RecordFilter, ANNOTATION_FILE,
};
use shapealign::geometry::KeypointSet2D;
use shapealign::pose::SolverConfig;
use shapealign::synth::write_synthetic_dataset;
use shapealign_service::{router, AppState, AUDIT_LOG};

fn fast_config() -> SolverConfig {
    SolverConfig {
        n_restarts: 4,
        ..SolverConfig::default()
    }
}

fn app(root: &std::path::Path) -> Router {
    router(Arc::new(AppState::open(root, fast_config(), 2).unwrap()))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (
        status,
        resp.into_body()
            .collect()
            .await
            .unwrap()
            .to_bytes()
            .to_vec(),
    )
}

async fn call_json(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn dataset(n: usize, seed: u64) -> (tempfile::TempDir, Vec<AnnotationRecord>) {
    let dir = tempfile::tempdir().unwrap();
    let records = write_synthetic_dataset(dir.path(), n, seed).unwrap();
    (dir, records)
}

#[tokio::test]
async fn empty_dataset_lists_nothing() {
    let dir = tempfile::tempdir().unwrap();
    save_annotations(&dir.path().join(ANNOTATION_FILE), &[]).unwrap();
    let (s, v) = call_json(&app(dir.path()), "GET", "/records", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!([]));
}

#[tokio::test]
async fn unknown_record_is_404() {
    let (dir, _) = dataset(2, 1);
    let app = app(dir.path());
    for (m, uri, body) in [
        ("GET", "/records/nope", None),
        ("GET", "/records/nope/image", None),
        ("POST", "/records/nope/solve", Some(json!({}))),
    ] {
        let (s, v) = call_json(&app, m, uri, body).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(v["code"], "NotFound");
    }
}

#[tokio::test]
async fn listing_filters_like_the_dataset() {
    let (dir, mut records) = dataset(6, 2);
    records[1].truncated = true;
    records[2].occluded = true;
    save_annotations(&dir.path().join(ANNOTATION_FILE), &records).unwrap();
    let app = app(dir.path());
    for (query, f) in [
        ("", RecordFilter::default()),
        (
            "?category=cube",
            RecordFilter {
                category: Some("cube".into()),
                ..Default::default()
            },
        ),
        (
            "?category=prism&truncated=false&occluded=false",
            RecordFilter::clean("prism"),
        ),
        (
            "?truncated=true",
            RecordFilter {
                truncated: Some(true),
                ..Default::default()
            },
        ),
        ("?category=chair", RecordFilter::clean("chair")),
    ] {
        let (s, v) = call_json(&app, "GET", &format!("/records{query}"), None).await;
        assert_eq!(s, StatusCode::OK);
        let got: Vec<&str> = v
            .as_array()
            .unwrap()
            .iter()
            .map(|r| r["id"].as_str().unwrap())
            .collect();
        let want: Vec<String> = filter(&records, |r| f.matches(r))
            .into_iter()
            .map(|r| r.id)
            .collect();
        assert_eq!(got, want, "{query}");
    }
    let (s, _) = call_json(&app, "GET", "/records?truncated=maybe", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn record_detail_and_resources() {
    let (dir, records) = dataset(2, 3);
    let app = app(dir.path());
    let id = &records[0].id;
    let (s, v) = call_json(&app, "GET", &format!("/records/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    let back: AnnotationRecord = serde_json::from_value(v["record"].clone()).unwrap();
    assert_eq!(&back, &records[0]);
    let (s, bytes) = call(&app, "GET", v["resources"]["mask"].as_str().unwrap(), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(bytes.starts_with(b"P5"));
    let (s, bytes) = call(&app, "GET", &format!("/records/{id}/model"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(String::from_utf8(bytes).unwrap().starts_with("v "));
    let (s, _) = call(&app, "GET", &format!("/records/{id}/texture"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn noise_free_solve_has_tiny_residuals_and_an_outline() {
    let (dir, records) = dataset(2, 4);
    let app = app(dir.path());
    let (s, v) = call_json(
        &app,
        "POST",
        &format!("/records/{}/solve", records[0].id),
        Some(json!({"method": "plain"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let residuals = v["residuals"].as_array().unwrap();
    assert_eq!(residuals.len(), records[0].keypoints_3d.len());
    for r in residuals {
        let (du, dv) = (r[0].as_f64().unwrap(), r[1].as_f64().unwrap());
        assert!(du.hypot(dv) < 1e-3, "{r}");
    }
    let e = v["solution"]["error"].as_f64().unwrap();
    let again = v["recomputed_error"].as_f64().unwrap();
    assert!((e - again).abs() <= 1e-6 * e.max(1e-9));
    assert!(!v["outline"].as_array().unwrap().is_empty());
    assert_eq!(
        v["projected"].as_array().unwrap().len(),
        records[0].keypoints_3d.len()
    );
}

#[tokio::test]
async fn three_keypoints_are_too_few() {
    let (dir, records) = dataset(1, 5);
    let app = app(dir.path());
    let set = &records[0].keypoint_annotations.sets()[0];
    let visible: Vec<bool> = (0..set.len()).map(|i| i < 3).collect();
    let kp = KeypointSet2D::new(set.points().to_vec(), visible).unwrap();
    let (s, v) = call_json(
        &app,
        "POST",
        &format!("/records/{}/solve", records[0].id),
        Some(json!({"keypoints_2d": kp, "method": "plain"})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "TooFewPoints");
    assert!(v["message"].as_str().unwrap().contains('3'));
}

#[tokio::test]
async fn bad_requests_are_rejected() {
    let (dir, records) = dataset(1, 6);
    let app = app(dir.path());
    let uri = format!("/records/{}/solve", records[0].id);
    let (s, v) = call_json(&app, "POST", &uri, Some(json!({"method": "guess"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "BadRequest");
    let (s, v) = call_json(
        &app,
        "POST",
        &uri,
        Some(json!({"config": {"n_restarts": 0}})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "InvalidConfig");
    let (s, _) = call_json(
        &app,
        "POST",
        &uri,
        Some(json!({"config": {"warp_speed": 9}})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn identical_solves_are_byte_identical() {
    let (dir, records) = dataset(1, 7);
    let app = app(dir.path());
    let uri = format!("/records/{}/solve", records[0].id);
    for method in ["plain", "ransac", "subset"] {
        let body = json!({"method": method, "config": {"rng_seed": 11}});
        let (s1, a) = call(&app, "POST", &uri, Some(body.clone())).await;
        let (s2, b) = call(&app, "POST", &uri, Some(body)).await;
        assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK), "{method}");
        assert_eq!(a, b, "{method}");
    }
}

#[tokio::test]
async fn solve_does_not_touch_the_disk() {
    let (dir, records) = dataset(1, 8);
    let path = dir.path().join(ANNOTATION_FILE);
    let before = std::fs::read(&path).unwrap();
    let app = app(dir.path());
    let (s, _) = call_json(
        &app,
        "POST",
        &format!("/records/{}/solve", records[0].id),
        Some(json!({})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(std::fs::read(&path).unwrap(), before);
}

#[tokio::test]
async fn commit_after_solve_persists() {
    let (dir, mut records) = dataset(2, 9);
    // Forget the stored pose so the commit visibly restores one.
    records[0].pose = None;
    records[0].focal = None;
    save_annotations(&dir.path().join(ANNOTATION_FILE), &records).unwrap();
    let app = app(dir.path());
    let id = records[0].id.clone();

    let (s, v) = call_json(
        &app,
        "POST",
        &format!("/records/{id}/commit"),
        Some(json!({})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "NoPriorSolve");

    let (s, solved) = call_json(
        &app,
        "POST",
        &format!("/records/{id}/solve"),
        Some(json!({"session": "s1"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let (s, committed) = call_json(
        &app,
        "POST",
        &format!("/records/{id}/commit"),
        Some(json!({"session": "s1"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{committed}");
    assert_eq!(committed["version"], 1);
    assert_eq!(committed["pose"], solved["solution"]["pose"]);

    let (on_disk, _) = load_annotations(&dir.path().join(ANNOTATION_FILE)).unwrap();
    assert_eq!(on_disk[0].version, 1);
    assert!(on_disk[0].pose.is_some());
    assert_eq!(on_disk[1], records[1]);
    let fresh = AppState::open(dir.path(), fast_config(), 1).unwrap();
    let (_, v) = call_json(
        &router(Arc::new(fresh)),
        "GET",
        &format!("/records/{id}"),
        None,
    )
    .await;
    assert_eq!(v["record"]["pose"], solved["solution"]["pose"]);
    let log = std::fs::read_to_string(dir.path().join(AUDIT_LOG)).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.contains(&id));

    // The solve was against version 0; committing it again is stale.
    let (s, v) = call_json(
        &app,
        "POST",
        &format!("/records/{id}/commit"),
        Some(json!({"session": "s1"})),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["code"], "VersionConflict");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_commits_one_wins() {
    let (dir, records) = dataset(1, 10);
    let app = app(dir.path());
    let id = records[0].id.clone();
    for session in ["a", "b"] {
        let (s, _) = call_json(
            &app,
            "POST",
            &format!("/records/{id}/solve"),
            Some(json!({"session": session})),
        )
        .await;
        assert_eq!(s, StatusCode::OK);
    }
    let uri = format!("/records/{id}/commit");
    let (ra, rb) = tokio::join!(
        call_json(&app, "POST", &uri, Some(json!({"session": "a"}))),
        call_json(&app, "POST", &uri, Some(json!({"session": "b"}))),
    );
    let mut statuses = [ra.0, rb.0];
    statuses.sort();
    assert_eq!(statuses, [StatusCode::OK, StatusCode::CONFLICT]);
    let (on_disk, _) = load_annotations(&dir.path().join(ANNOTATION_FILE)).unwrap();
    assert_eq!(on_disk[0].version, 1);
}
