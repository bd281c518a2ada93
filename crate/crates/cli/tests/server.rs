use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use partlayout::boxvae::{BoxVae, BoxVaeConfig};
use partlayout::dataset::{synth_generate, SynthConfig};
use partlayout::labelmapvae::{paste_orders, LabelMapConfig, LabelMapVae};
use partlayout::pipeline::LayoutModel;
use partlayout::DType;
use partlayout_cli::server::{router, AppState, SessionResponse};
use serde_json::{json, Value};
use tower::ServiceExt;

fn state() -> Arc<AppState> {
    let corpus = synth_generate(
        &SynthConfig {
            instances_per_category: 3,
            ..SynthConfig::default()
        },
        1,
    )
    .unwrap();
    let (p, m) = (corpus.schemas.p_max, corpus.schemas.num_categories());
    let model = LayoutModel::from_parts(
        BoxVae::new(BoxVaeConfig::new(p, m), 1, DType::F32).unwrap(),
        LabelMapVae::new(LabelMapConfig::new(p, m), 2, DType::F32).unwrap(),
        corpus.schemas.clone(),
        paste_orders(&corpus),
    )
    .unwrap();
    AppState::new(model)
}

async fn call(state: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn session(state: &Arc<AppState>, uri: &str, body: Value) -> SessionResponse {
    let (status, bytes) = call(state, "POST", uri, Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    serde_json::from_slice(&bytes).unwrap()
}

#[tokio::test]
async fn health_and_schema() {
    let s = state();
    let (status, body) = call(&s, "GET", "/health", None).await;
    assert_eq!((status, body.as_slice()), (StatusCode::OK, b"ok".as_slice()));
    let (status, body) = call(&s, "GET", "/schema", None).await;
    assert_eq!(status, StatusCode::OK);
    let schema: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(schema["p_max"], 5);
}

#[tokio::test]
async fn generate_then_empty_edit_keeps_the_layout() {
    let s = state();
    let g = session(&s, "/generate", json!({"category": "biped", "parts": ["torso", 1, "limb_l"], "seed": 4})).await;
    assert_eq!(g.boxes.keys().copied().collect::<Vec<_>>(), vec![0, 1, 2]);
    assert_eq!(g.part_names[&1], "head");
    assert_eq!((g.layout.width, g.layout.height), (256, 256));
    assert!(!g.layout.png_base64.is_empty());

    let e = session(&s, "/edit", json!({"session_id": g.session_id, "edits": []})).await;
    assert_eq!(e.layout.hash, g.layout.hash);
    assert_eq!(e.session_id, g.session_id);

    let moved = session(
        &s,
        "/edit",
        json!({"session_id": g.session_id, "edits": [
            {"op": "set_box", "part": 1, "bbox": {"x_min": -0.3, "y_min": -0.9, "x_max": 0.3, "y_max": -0.4}}
        ]}),
    )
    .await;
    assert_eq!(moved.boxes[&0], g.boxes[&0]);
    assert_eq!(moved.boxes[&1].y_max, -0.4);

    let again = session(&s, "/generate", json!({"category": 1, "parts": [0, 1, 2], "seed": 4})).await;
    assert_eq!(again.layout.hash, g.layout.hash);
    assert_ne!(again.session_id, g.session_id);
    assert_eq!(s.session_count(), 2);
}

#[tokio::test]
async fn addpart_extends_the_session() {
    let s = state();
    let g = session(&s, "/generate", json!({"category": "glider", "parts": [0, 1], "seed": 2})).await;
    let a = session(&s, "/addpart", json!({"session_id": g.session_id, "part": "tail"})).await;
    let tail = s.model.schemas.by_name("glider").unwrap().part_index("tail").unwrap();
    let mut want: Vec<usize> = g.boxes.keys().copied().collect();
    want.push(tail);
    want.sort();
    assert_eq!(a.boxes.keys().copied().collect::<Vec<_>>(), want);
    assert_eq!(a.boxes[&0], g.boxes[&0]);
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let s = state();
    let (status, body) = call(&s, "POST", "/edit", Some(json!({"session_id": "nope", "edits": []}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let err: Value = serde_json::from_slice(&body).unwrap();
    assert!(err["error"].as_str().unwrap().contains("nope"));

    let (status, _) = call(&s, "POST", "/generate", Some(json!({"category": "teapot"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&s, "POST", "/generate", Some(json!({"category": 1, "parts": [17]}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let g = session(&s, "/generate", json!({"category": 1, "parts": [0], "seed": 1})).await;
    let offscreen = json!({"session_id": g.session_id, "edits": [
        {"op": "set_box", "part": 0, "bbox": {"x_min": 2.0, "y_min": 2.0, "x_max": 3.0, "y_max": 3.0}}
    ]});
    let (status, _) = call(&s, "POST", "/edit", Some(offscreen)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&s, "POST", "/addpart", Some(json!({"session_id": g.session_id, "part": "wing"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let unchanged = session(&s, "/edit", json!({"session_id": g.session_id})).await;
    assert_eq!(unchanged.layout.hash, g.layout.hash);
}
