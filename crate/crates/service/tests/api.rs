use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use latentbrdf::checkpoint::Checkpoint;
use latentbrdf::latent_tools::{fit_manifold, ManifoldConfig, ManifoldModel};
use latentbrdf::vae_model::{LatentStats, ModelConfig};
use latentbrdf_service::{router, AppState, SharedState, ELAPSED_HEADER};

fn fixture() -> &'static (Checkpoint, ManifoldModel) {
    static F: OnceLock<(Checkpoint, ManifoldModel)> = OnceLock::new();
    F.get_or_init(|| {
        let mut ck = Checkpoint::untrained(ModelConfig::default(), 3).unwrap();
        let names: Vec<String> = std::iter::once("aluminium".to_string())
            .chain((1..12).map(|i| format!("m{i:02}")))
            .collect();
        let mut latents = Vec::new();
        for (i, name) in names.iter().enumerate() {
            let mu: Vec<f64> = (0..8).map(|d| ((i * 7 + d * 3) % 11) as f64 * 0.3 - 1.5).collect();
            ck.latent_table.insert(
                name.clone(),
                LatentStats { mu: mu.clone(), logvar: vec![-2.0; 8] },
            );
            latents.push(mu);
        }
        let m = fit_manifold(names, latents, ManifoldConfig { n_epochs: 100, ..Default::default() }).unwrap();
        (ck, m)
    })
}

fn loaded() -> SharedState {
    let (ck, m) = fixture();
    Arc::new(AppState::new(Some(ck.clone()), Some(m.clone())))
}

async fn call(state: &SharedState, req: Request<Body>) -> (StatusCode, Vec<u8>, Option<String>) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let elapsed = resp
        .headers()
        .get(ELAPSED_HEADER)
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes, elapsed)
}

fn post(uri: &str, body: &str) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn as_json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn png_from(v: &Value) -> Vec<u8> {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD
        .decode(v["image_png_base64"].as_str().unwrap())
        .unwrap()
}

const SMALL: &str = r#"{"size":16}"#;

#[tokio::test]
async fn lists_materials() {
    let state = loaded();
    let (status, body, _) = call(&state, get("/materials")).await;
    assert_eq!(status, StatusCode::OK);
    let v = as_json(&body);
    let list = v["materials"].as_array().unwrap();
    assert_eq!(list.len(), 12);
    assert_eq!(list[0]["name"], "aluminium");
    assert_eq!(list[0]["mu"].as_array().unwrap().len(), 8);
    let s = list[0]["sigma"][0].as_f64().unwrap();
    assert!((s - (-1.0f64).exp()).abs() < 1e-12);
}

#[tokio::test]
async fn decode_eight_values() {
    let state = loaded();
    let req = format!(r#"{{"code":[0,0.5,-1,0,0,0,0,2],"scene":{SMALL}}}"#);
    let (status, body, elapsed) = call(&state, post("/decode", &req)).await;
    assert_eq!(status, StatusCode::OK);
    assert!(elapsed.is_some());
    let v = as_json(&body);
    assert_eq!(v["augmented"], false);
    assert_eq!(v["width"], 16);
    assert_eq!(&png_from(&v)[1..4], b"PNG");
    assert_eq!(v["reflectance_mean"].as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn wrong_length_names_expected_lengths() {
    let state = loaded();
    let (status, body, _) = call(&state, post("/decode", r#"{"code":[1,2,3,4,5,6,7]}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let msg = as_json(&body)["error"].as_str().unwrap().to_string();
    assert!(msg.contains('8') && msg.contains("10"), "{msg}");
}

#[tokio::test]
async fn non_numeric_input_is_rejected() {
    let state = loaded();
    for (uri, body) in [
        ("/decode", r#"{"code":["a",2,3,4,5,6,7,8]}"#),
        ("/render", r#"{"code":"fast"}"#),
        ("/manifold/invert", r#"{"x":"left","y":0}"#),
        ("/manifold/invert", r#"{"x":1}"#),
        ("/render", "not json"),
    ] {
        let (status, resp, _) = call(&state, post(uri, body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri} {body}");
        assert!(as_json(&resp)["error"].is_string());
    }
    let (status, _, _) = call(&state, get("/traverse?dim=two")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _, _) = call(&state, get("/traverse?steps=3")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _, _) = call(&state, get("/traverse?dim=9&size=16")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn material_name_uses_stored_mean() {
    let state = loaded();
    let (ck, _) = fixture();
    let mu = &ck.latent_table["aluminium"].mu;
    let by_name = call(&state, post("/render", &format!(r#"{{"material":"aluminium","scene":{SMALL}}}"#))).await;
    let by_code = call(&state, post("/render", &json!({ "code": mu, "scene": { "size": 16 } }).to_string())).await;
    assert_eq!(by_name.0, StatusCode::OK);
    assert_eq!(by_name.1, by_code.1);
    let (status, _, _) = call(&state, post("/render", r#"{"material":"nonexistent"}"#)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn augmented_render_and_raw() {
    let state = loaded();
    let req = format!(r#"{{"code":[0,0,0,0,0,0,0,0,-2,2],"scene":{SMALL}}}"#);
    let (status, body, _) = call(&state, post("/decode", &req)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(as_json(&body)["augmented"], true);

    let resp = router(state.clone()).oneshot(post("/render/raw", &req)).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");
    let raw = resp.into_body().collect().await.unwrap().to_bytes();
    let (_, json_body, _) = call(&state, post("/render", &req)).await;
    assert_eq!(raw.to_vec(), png_from(&as_json(&json_body)));
}

#[tokio::test]
async fn missing_state_is_unavailable() {
    let state: SharedState = Arc::new(AppState::default());
    for req in [
        get("/materials"),
        post("/decode", r#"{"code":[0,0,0,0,0,0,0,0]}"#),
        get("/manifold"),
        post("/manifold/invert", r#"{"x":0,"y":0}"#),
        get("/traverse?dim=1"),
    ] {
        let (status, _, _) = call(&state, req).await;
        assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    }
    let (ck, _) = fixture();
    let partial: SharedState = Arc::new(AppState::new(Some(ck.clone()), None));
    let (status, _, _) = call(&partial, get("/manifold")).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, body, _) = call(&partial, get("/health")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(as_json(&body)["manifold_loaded"], false);
}

#[tokio::test]
async fn manifold_points_and_inverse() {
    let state = loaded();
    let (_, m) = fixture();
    let (status, body, _) = call(&state, get("/manifold")).await;
    assert_eq!(status, StatusCode::OK);
    let v = as_json(&body);
    assert_eq!(v["points"].as_array().unwrap().len(), 12);

    let p = m.embedding[0];
    let req = json!({ "x": p[0], "y": p[1], "scene": { "size": 16 } }).to_string();
    let (status, body, _) = call(&state, post("/manifold/invert", &req)).await;
    assert_eq!(status, StatusCode::OK);
    let v = as_json(&body);
    let latent: Vec<f64> = serde_json::from_value(v["latent"].clone()).unwrap();
    let err: f64 = latent.iter().zip(&m.latents[0]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(err <= 0.5, "{err}");
    assert_eq!(v["extrapolated"], false);

    let [_, _, x1, y1] = m.bounds();
    let far = json!({ "x": x1 + 1e3, "y": y1 + 1e3, "scene": { "size": 16 } }).to_string();
    let (status, body, _) = call(&state, post("/manifold/invert", &far)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(as_json(&body)["extrapolated"], true);
}

#[tokio::test]
async fn traversal_sheet() {
    let state = loaded();
    let (status, body, _) = call(&state, get("/traverse?dim=2&steps=3&range=-1,1&size=16&material=m03")).await;
    assert_eq!(status, StatusCode::OK);
    let v = as_json(&body);
    assert_eq!(v["values"], json!([-1.0, 0.0, 1.0]));
    assert_eq!(v["width"], 48);
    assert_eq!(v["height"], 16);
    assert_eq!(v["codes"].as_array().unwrap().len(), 3);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn identical_and_concurrent_requests_agree() {
    let state = loaded();
    let reqs: Vec<String> = (0..4)
        .map(|i| json!({ "code": [i as f64 * 0.5, 0, 0, 0, 0, 0, 0, -1], "scene": { "size": 16 } }).to_string())
        .collect();
    let mut serial = Vec::new();
    for r in &reqs {
        serial.push(call(&state, post("/decode", r)).await.1);
    }
    assert_eq!(call(&state, post("/decode", &reqs[0])).await.1, serial[0]);
    let handles: Vec<_> = reqs
        .iter()
        .cloned()
        .map(|r| {
            let s = state.clone();
            tokio::spawn(async move { call(&s, post("/decode", &r)).await.1 })
        })
        .collect();
    for (h, expected) in handles.into_iter().zip(&serial) {
        assert_eq!(&h.await.unwrap(), expected);
    }
}

#[tokio::test]
async fn reload_swaps_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, m) = fixture();
    let ck_path = dir.path().join("model.bvae");
    let m_path = dir.path().join("manifold.json");
    ck.save(&ck_path).unwrap();
    m.save(&m_path).unwrap();

    let state: SharedState = Arc::new(AppState::default());
    let (status, _, _) = call(&state, get("/materials")).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let body = json!({ "checkpoint": ck_path, "manifold": m_path }).to_string();
    let (status, resp, _) = call(&state, post("/admin/reload", &body)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(as_json(&resp)["manifold_loaded"], true);
    let (status, _, _) = call(&state, get("/materials")).await;
    assert_eq!(status, StatusCode::OK);

    let (status, _, _) = call(&state, post("/admin/reload", "")).await;
    assert_eq!(status, StatusCode::OK);
    let bad = json!({ "checkpoint": dir.path().join("missing.bvae") }).to_string();
    let (status, _, _) = call(&state, post("/admin/reload", &bad)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _, _) = call(&state, get("/materials")).await;
    assert_eq!(status, StatusCode::OK);
}
