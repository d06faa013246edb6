use std::sync::OnceLock;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use futures::{SinkExt, StreamExt};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use slidereg_core::imagecore::{decode_png, encode_png};
use slidereg_core::scopemodel::StageCoord;
use slidereg_core::virtualscope::{generate_scene, render_view, RegionParams, SlideScene, ViewSpec};
use slidereg_core::workflow::simulate_store;
use slidereg_core::{Magnification, ProfileSet};
use slidereg_service::{router, AppState, ServiceConfig};

fn app_for(dir: &std::path::Path) -> Router {
    let mut cfg = ServiceConfig::new("127.0.0.1:0".parse().unwrap(), dir.to_path_buf());
    cfg.workers = 1;
    router(AppState::open(&cfg).unwrap())
}

/// A store with one simulated region, shared by the tests that only read it.
fn fixture() -> &'static std::path::Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = tempfile::tempdir().unwrap();
        simulate_store(d.path(), 3, 1, &ProfileSet::ideal(), &RegionParams::default(), 1).unwrap();
        d
    })
    .path()
}

fn fresh_fixture() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    let src = fixture();
    for entry in walk(src) {
        let rel = entry.strip_prefix(src).unwrap();
        let to = d.path().join(rel);
        std::fs::create_dir_all(to.parent().unwrap()).unwrap();
        std::fs::copy(&entry, &to).unwrap();
    }
    d
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

async fn call(app: &Router, method: &str, uri: &str, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).body(Body::from(body)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Value) -> (StatusCode, Value) {
    let bytes = if body.is_null() { Vec::new() } else { body.to_string().into_bytes() };
    let (s, b) = call(app, method, uri, bytes).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn scene() -> &'static SlideScene {
    static S: OnceLock<SlideScene> = OnceLock::new();
    S.get_or_init(|| generate_scene(21, [0.8, 0.8], 8000.0, 0.1).unwrap())
}

fn frame_png(x: f64, y: f64) -> Vec<u8> {
    let mut spec = ViewSpec::new("hcm", Magnification::X100, StageCoord::new(x, y));
    spec.out_size = [320, 240];
    encode_png(&render_view(scene(), &spec, &ProfileSet::ideal()).unwrap().0).unwrap()
}

async fn live_session(app: &Router, extra: Value) -> String {
    let mut body = json!({"mode": "live_guidance", "profile": "hcm"});
    body.as_object_mut().unwrap().extend(extra.as_object().cloned().unwrap_or_default());
    let (s, v) = call_json(app, "POST", "/sessions", body).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn frames_track_and_order() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_for(dir.path());
    let id = live_session(&app, Value::Null).await;
    let f = frame_png(0.4, 0.4);

    let (s, first) = call(&app, "POST", &format!("/sessions/{id}/frames?index=0"), f.clone()).await;
    assert_eq!(s, StatusCode::OK);
    let first: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(first["shift"], json!({"x": 0.0, "y": 0.0}));
    assert_eq!(first["lock"], "locked");

    let (s, second) = call(&app, "POST", &format!("/sessions/{id}/frames?index=1"), f.clone()).await;
    assert_eq!(s, StatusCode::OK);
    let second: Value = serde_json::from_slice(&second).unwrap();
    assert_eq!(second["shift"], json!({"x": 0.0, "y": 0.0}));
    assert_eq!(second["confidence"], 1.0);

    let (s, err) = call(&app, "POST", &format!("/sessions/{id}/frames?index=1"), f.clone()).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let err: Value = serde_json::from_slice(&err).unwrap();
    assert_eq!(err["code"], "conflict");
    assert!(err.get("message").is_some() && err.get("detail").is_some());

    let (s, moved) = call(&app, "POST", &format!("/sessions/{id}/frames?index=7"), frame_png(0.41, 0.395)).await;
    assert_eq!(s, StatusCode::OK);
    let moved: Value = serde_json::from_slice(&moved).unwrap();
    assert!((moved["shift"]["x"].as_f64().unwrap() + 10.0).abs() < 0.5, "{moved}");
    assert!((moved["shift"]["y"].as_f64().unwrap() - 5.0).abs() < 0.5, "{moved}");
    let g = &moved["guidance"];
    // Patch moved to (149.5, 124.5); the target is the frame center.
    assert!((g["view_vector"]["x"].as_f64().unwrap() - 10.0).abs() < 0.5);
    assert!((g["stage_vector_mm"]["x"].as_f64().unwrap() + 0.010).abs() < 0.0005);

    let (s, v) = call_json(&app, "GET", &format!("/sessions/{id}"), Value::Null).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["last_index"], 7);

    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/frames?index=8"), b"not a png".to_vec()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{}", String::from_utf8_lossy(&v));
    let (s, v) = call_json(&app, "POST", "/sessions/nope/frames?index=0", Value::Null).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "not_found");
}

#[tokio::test]
async fn session_validation() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_for(dir.path());
    let (s, v) = call_json(&app, "POST", "/sessions", json!({"mode": "live_guidance", "profile": "zzz"})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "bad_request");
    let (s, _) = call_json(&app, "POST", "/sessions", json!({"mode": "dancing", "profile": "hcm"})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, v) = call_json(&app, "POST", "/sessions", json!({"mode": "verification", "profile": "lcm"})).await;
    assert_eq!(s, StatusCode::CREATED);
    let id = v["session_id"].as_str().unwrap();
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/frames?index=0"), frame_png(0.4, 0.4)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn calibration_fits_and_drives_targets() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_for(dir.path());
    let ep = |m: u32| json!({"microscope": "hcm", "magnification": m});
    let pairs: Vec<Value> = [(1.0, 1.0), (3.0, 1.5), (2.0, 4.0), (5.0, 5.0)]
        .iter()
        .map(|(x, y)| json!([[x, y], [x + 0.012, y - 0.008]]))
        .collect();
    let (s, map) = call_json(
        &app,
        "POST",
        "/calibration",
        json!({"kind": "cross_magnification", "from": ep(100), "to": ep(400), "pairs": pairs}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{map}");
    assert!(map["rms_mm"].as_f64().unwrap() < 0.005);

    let one = json!({"kind": "cross_microscope", "from": ep(100), "to": {"microscope": "lcm", "magnification": 100},
                     "pairs": [[[1.0, 1.0], [2.25, 0.5]]]});
    let (s, _) = call_json(&app, "POST", "/calibration", one).await;
    assert_eq!(s, StatusCode::OK);

    let bad = json!({"kind": "cross_magnification", "from": ep(400), "to": ep(1000),
                     "pairs": [[[0.0, 0.0], [0.0, 0.0]], [[1.0, 0.0], [1.0, 0.0]], [[0.0, 1.0], [0.5, 1.0]], [[1.0, 1.0], [1.0, 1.4]]]});
    let (s, v) = call_json(&app, "POST", "/calibration", bad).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "calibration_rejected");

    let few = json!({"kind": "cross_magnification", "from": ep(400), "to": ep(1000), "pairs": [[[0.0, 0.0], [0.0, 0.0]]]});
    let (_, v) = call_json(&app, "POST", "/calibration", few).await;
    assert_eq!(v["code"], "too_few_pairs");

    let (_, list) = call_json(&app, "GET", "/calibration", Value::Null).await;
    assert_eq!(list.as_array().unwrap().len(), 2);
    assert!(dir.path().join("calibration.json").exists());

    // A fresh service on the same store reloads the map and derives targets.
    let app = app_for(dir.path());
    let id = live_session(&app, json!({"stage_mm": [0.4, 0.4]})).await;
    let (_, r) = call(&app, "POST", &format!("/sessions/{id}/frames?index=0"), frame_png(0.4, 0.4)).await;
    let r: Value = serde_json::from_slice(&r).unwrap();
    let t = &r["target"]["target_center"];
    assert!((t["x"].as_f64().unwrap() - (159.5 - 12.0)).abs() < 1e-6, "{r}");
    assert!((t["y"].as_f64().unwrap() - (119.5 + 8.0)).abs() < 1e-6, "{r}");
}

async fn wait_job(app: &Router, job: &str) -> Value {
    for _ in 0..600 {
        let (s, v) = call_json(app, "GET", &format!("/transfer/jobs/{job}"), Value::Null).await;
        assert_eq!(s, StatusCode::OK);
        if v["status"] == "done" || v["status"] == "failed" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
    panic!("job {job} did not finish");
}

#[tokio::test]
async fn transfer_job_then_verification() {
    let dir = fresh_fixture();
    let app = app_for(dir.path());
    let (s, v) = call_json(&app, "POST", "/transfer/run", json!({"region_id": "region-0000"})).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    let job = v["job_id"].as_str().unwrap().to_string();
    let done = wait_job(&app, &job).await;
    assert_eq!(done["status"], "done", "{done}");
    let records = done["records"].as_array().unwrap();
    assert_eq!(records.len(), 5);
    for r in records {
        assert_eq!(r["confidence"], "high");
        for a in r["annotations"].as_array().unwrap() {
            let st = a["status"].as_str().unwrap();
            assert!(["confirmed", "needs_review", "out_of_fov"].contains(&st));
            assert_eq!(a["source"], "transferred");
        }
    }
    // Same inputs: the finished job is reused.
    let (s, again) = call_json(&app, "POST", "/transfer/run", json!({"region_id": "region-0000"})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(again["job_id"], job.as_str());

    let (_, region) = call_json(&app, "GET", "/regions/region-0000", Value::Null).await;
    assert_eq!(region["transfers"].as_array().unwrap().len(), 5);

    let (_, queue) = call_json(&app, "GET", "/verify/queue", Value::Null).await;
    let queue = queue.as_array().unwrap().clone();
    assert!(!queue.is_empty(), "fixture region should have boxes to review");
    let first = queue[0]["reference"].as_str().unwrap().to_string();
    let (s, v) = call_json(&app, "POST", &format!("/verify/{first}"), json!({"action": "accept", "who": "ana"})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["annotation"]["status"], "confirmed");
    assert_eq!(v["audit"][0]["who"], "ana");
    let (_, q2) = call_json(&app, "GET", "/verify/queue", Value::Null).await;
    assert_eq!(q2.as_array().unwrap().len(), queue.len() - 1);

    // Drag-correct a confirmed box by 10 px and read it back.
    let lcm = region["slots"]["lcm_400x"]["annotations"].as_array().unwrap();
    let target = lcm.iter().find(|a| a["status"] != "out_of_fov").unwrap();
    let id = target["id"].as_str().unwrap();
    let before: Vec<f64> = serde_json::from_value(target["box"].clone()).unwrap();
    let (s, v) = call_json(
        &app,
        "POST",
        &format!("/verify/region-0000:lcm_400x:{id}"),
        json!({"action": "correct", "payload": {"dx": 10.0, "dy": 0.0}}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let (_, region) = call_json(&app, "GET", "/regions/region-0000", Value::Null).await;
    let after = region["slots"]["lcm_400x"]["annotations"].as_array().unwrap().iter().find(|a| a["id"] == id).unwrap().clone();
    let b: Vec<f64> = serde_json::from_value(after["box"].clone()).unwrap();
    assert!((b[0] - before[0] - 10.0).abs() < 1e-9 && (b[2] - before[2] - 10.0).abs() < 1e-9);
    assert_eq!(after["source"], "corrected");

    let (s, v) = call_json(
        &app,
        "POST",
        "/verify/region-0000:lcm_1000x:",
        json!({"action": "add", "payload": {"box": [10.0, 10.0, 60.0, 50.0], "label": "gametocyte"}}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let new_id = v["annotation"]["id"].as_str().unwrap().to_string();
    let (_, region) = call_json(&app, "GET", "/regions/region-0000", Value::Null).await;
    let added = region["slots"]["lcm_1000x"]["annotations"].as_array().unwrap().iter().find(|a| a["id"] == new_id.as_str()).unwrap().clone();
    assert_eq!(added["label"], "gametocyte");
    assert_eq!(added["source"], "corrected");

    let (s, _) = call_json(&app, "POST", &format!("/verify/region-0000:lcm_1000x:{new_id}"), json!({"action": "delete"})).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = call_json(&app, "POST", &format!("/verify/region-0000:lcm_1000x:{new_id}"), json!({"action": "delete"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND, "{v}");
    let (s, _) = call_json(&app, "POST", "/verify/region-0000:lcm_9x:c1", json!({"action": "accept"})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call_json(&app, "POST", "/verify/nowhere:lcm_400x:c1", json!({"action": "accept"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    // Everything survives a restart.
    let reopened = app_for(dir.path());
    let (_, r2) = call_json(&reopened, "GET", "/regions/region-0000", Value::Null).await;
    assert_eq!(r2, region_after_delete(&app).await);
    assert!(dir.path().join("audit.json").exists());
}

async fn region_after_delete(app: &Router) -> Value {
    call_json(app, "GET", "/regions/region-0000", Value::Null).await.1
}

#[tokio::test]
async fn regions_images_and_spec() {
    let app = app_for(fixture());
    let (s, v) = call_json(&app, "GET", "/regions", Value::Null).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 1);
    let (s, png) = call(&app, "GET", "/regions/region-0000/images/lcm_400x", Vec::new()).await;
    assert_eq!(s, StatusCode::OK);
    let img = decode_png(&png).unwrap();
    assert_eq!((img.width(), img.height()), (1024, 768));
    let (s, _) = call(&app, "GET", "/regions/region-0000/images/nope", Vec::new()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/regions/region-9999", Vec::new()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call_json(&app, "POST", "/transfer/run", json!({"region_id": "region-9999"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call_json(&app, "GET", "/transfer/jobs/job-404", Value::Null).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, spec) = call_json(&app, "GET", "/api/spec", Value::Null).await;
    assert_eq!(s, StatusCode::OK);
    for p in ["/sessions", "/sessions/{id}/frames", "/sessions/{id}/stream", "/transfer/run", "/verify/queue", "/calibration"] {
        assert!(spec["paths"].get(p).is_some(), "{p}");
    }
}

#[tokio::test]
async fn websocket_stream() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_for(dir.path());
    let id = live_session(&app, Value::Null).await;
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });

    let url = format!("ws://{addr}/sessions/{id}/stream");
    let (mut ws, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
    // Only one stream per session.
    let second = tokio_tungstenite::connect_async(&url).await;
    assert!(second.is_err());

    use tokio_tungstenite::tungstenite::Message;
    let f = frame_png(0.4, 0.4);
    let mut replies = Vec::new();
    for png in [f.clone(), f.clone(), frame_png(0.405, 0.4)] {
        ws.send(Message::Binary(png.into())).await.unwrap();
        let msg = ws.next().await.unwrap().unwrap();
        let v: Value = serde_json::from_str(msg.to_text().unwrap()).unwrap();
        replies.push(v);
    }
    assert_eq!(replies[0]["index"], 0);
    assert_eq!(replies[1]["index"], 1);
    assert_eq!(replies[1]["shift"], json!({"x": 0.0, "y": 0.0}));
    assert!((replies[2]["shift"]["x"].as_f64().unwrap() + 5.0).abs() < 0.5, "{}", replies[2]);
    ws.send(Message::Text("hello".into())).await.unwrap();
    let msg = ws.next().await.unwrap().unwrap();
    let v: Value = serde_json::from_str(msg.to_text().unwrap()).unwrap();
    assert_eq!(v["code"], "bad_request");
    ws.close(None).await.unwrap();
    drop(ws);

    // The stream slot frees up once the socket closes.
    let mut reopened = None;
    for _ in 0..50 {
        tokio::time::sleep(Duration::from_millis(20)).await;
        if let Ok((s, _)) = tokio_tungstenite::connect_async(&url).await {
            reopened = Some(s);
            break;
        }
    }
    assert!(reopened.is_some());
}
