use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::http::{Request, StatusCode};
use axum::Router;
use candle_core::{DType, Device, Tensor};
use clsm_core::model::{Clsm, ModelConfig};
use clsm_service::api::{router, AppState, ServeOptions};
use clsm_service::served::ServedModel;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn tiny_model(seed: u64) -> Clsm {
    let m = Clsm::new(ModelConfig::tiny(), seed, DType::F32, &Device::Cpu).unwrap();
    m.store().pp("flow").randomize(seed, 0.3).unwrap();
    m
}

fn app_with(model: Clsm, opts: ServeOptions) -> Router {
    router(AppState::new(ServedModel::Clsm(model), "test", opts))
}

fn app() -> Router {
    app_with(tiny_model(1), ServeOptions::default())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Bytes) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes())
}

async fn ok(app: &Router, method: &str, uri: &str, body: Value) -> Value {
    let (status, bytes) = call(app, method, uri, Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    serde_json::from_slice(&bytes).unwrap()
}

fn window() -> Value {
    json!(["60", "__", "62", "R", "64", "65", "__", "67"])
}

async fn session(app: &Router, seed: u64) -> String {
    let v = ok(app, "POST", "/session", json!({ "window": window(), "span": { "start": 2, "length": 4 }, "seed": seed })).await;
    v["session_id"].as_str().unwrap().to_string()
}

fn tokens(v: &Value) -> Vec<String> {
    v.as_array().unwrap().iter().map(|t| t.as_str().unwrap().to_string()).collect()
}

#[tokio::test]
async fn health_reports_latent_size() {
    let (status, body) = call(&app(), "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["model_version"], "test");
    assert_eq!(v["d_z"], 4);

    let full = Clsm::new(ModelConfig::default(), 0, DType::F32, &Device::Cpu).unwrap();
    let (_, body) = call(&app_with(full, ServeOptions::default()), "GET", "/health", None).await;
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["d_z"], 128);
}

#[tokio::test]
async fn generate_keeps_context_and_is_reproducible() {
    let app = app();
    let a = session(&app, 3).await;
    let b = session(&app, 3).await;
    let (s1, r1) = call(&app, "POST", "/generate", Some(json!({ "session_id": a, "seed": 11 }))).await;
    let (s2, r2) = call(&app, "POST", "/generate", Some(json!({ "session_id": b, "seed": 11 }))).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(r1, r2, "identical request and seed give identical bytes");
    let v: Value = serde_json::from_slice(&r1).unwrap();
    let t = tokens(&v["tokens"]);
    let w = tokens(&window());
    assert_eq!(t.len(), 8);
    assert_eq!(&t[..2], &w[..2]);
    assert_eq!(&t[6..], &w[6..]);
    assert_eq!(tokens(&v["target"]), t[2..6].to_vec());
    assert!(v["z_handle"].as_str().unwrap().starts_with("z-"));
    // no latent values in the response
    assert!(v.get("z").is_none());
}

#[tokio::test]
async fn interpolation_endpoints_match_anchor_decodings() {
    let app = app();
    let s = session(&app, 5).await;
    let g1 = ok(&app, "POST", "/generate", json!({ "session_id": s, "seed": 1 })).await;
    let g2 = ok(&app, "POST", "/generate", json!({ "session_id": s, "seed": 2 })).await;
    let v = ok(
        &app,
        "POST",
        "/interpolate",
        json!({ "session_id": s, "from": g1["z_handle"], "to": g2["z_handle"], "J": 8 }),
    )
    .await;
    let seqs = v["sequences"].as_array().unwrap();
    assert_eq!(seqs.len(), 9);
    assert_eq!(v["alphas"].as_array().unwrap().len(), 9);
    assert_eq!(tokens(&seqs[0]), tokens(&g1["tokens"]));
    assert_eq!(tokens(&seqs[8]), tokens(&g2["tokens"]));
    let w = tokens(&window());
    for s in seqs {
        let t = tokens(s);
        assert_eq!((&t[..2], &t[6..]), (&w[..2], &w[6..]));
    }
}

#[tokio::test]
async fn zero_variation_repeats_anchor() {
    let app = app();
    let s = session(&app, 6).await;
    let g = ok(&app, "POST", "/generate", json!({ "session_id": s })).await;
    let v = ok(&app, "POST", "/vary", json!({ "session_id": s, "z_handle": g["z_handle"], "delta": 0.0 })).await;
    assert_eq!(v["tokens"], g["tokens"]);
    assert_eq!(v["z_handle"], g["z_handle"]);
    // a varied latent becomes a usable anchor
    let v1 = ok(&app, "POST", "/vary", json!({ "session_id": s, "z_handle": g["z_handle"], "delta": 1.0, "seed": 4 })).await;
    assert_ne!(v1["z_handle"], g["z_handle"]);
    ok(&app, "POST", "/interpolate", json!({ "session_id": s, "from": g["z_handle"], "to": v1["z_handle"], "j": 2 })).await;
}

#[tokio::test]
async fn encode_returns_a_handle_for_the_window() {
    let app = app();
    let s = session(&app, 7).await;
    let e = ok(&app, "POST", "/encode", json!({ "session_id": s })).await;
    assert_eq!(tokens(&e["tokens"]).len(), 8);
    let again = ok(&app, "POST", "/encode", json!({ "session_id": s })).await;
    assert_eq!(e, again);
}

#[tokio::test]
async fn malformed_requests_are_400() {
    let app = app();
    let (st, _) = call(&app, "POST", "/session", None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let bad_span = json!({ "window": window(), "span": { "start": 1, "length": 4 } });
    let (st, body) = call(&app, "POST", "/session", Some(bad_span)).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&body).contains("span"));
    let short = json!({ "window": ["60", "R"], "span": { "start": 0, "length": 2 } });
    assert_eq!(call(&app, "POST", "/session", Some(short)).await.0, StatusCode::BAD_REQUEST);
    let bad_token = json!({ "window": ["60", "__", "62", "R", "64", "65", "__", "99"], "span": { "start": 2, "length": 2 } });
    assert_eq!(call(&app, "POST", "/session", Some(bad_token)).await.0, StatusCode::BAD_REQUEST);
    let s = session(&app, 1).await;
    let g = ok(&app, "POST", "/generate", json!({ "session_id": s })).await;
    let neg = json!({ "session_id": s, "z_handle": g["z_handle"], "delta": -1.0 });
    assert_eq!(call(&app, "POST", "/vary", Some(neg)).await.0, StatusCode::BAD_REQUEST);
    let j0 = json!({ "session_id": s, "from": g["z_handle"], "to": g["z_handle"], "J": 0 });
    assert_eq!(call(&app, "POST", "/interpolate", Some(j0)).await.0, StatusCode::BAD_REQUEST);
    let extra = json!({ "session_id": s, "bogus": 1 });
    assert_eq!(call(&app, "POST", "/generate", Some(extra)).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn unknown_session_or_handle_is_404() {
    let app = app();
    let (st, _) = call(&app, "POST", "/generate", Some(json!({ "session_id": "nope" }))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let s = session(&app, 1).await;
    let (st, _) = call(&app, "POST", "/vary", Some(json!({ "session_id": s, "z_handle": "z-0", "delta": 1.0 }))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "DELETE", &format!("/session/{s}"), None).await.0, StatusCode::NO_CONTENT);
    assert_eq!(call(&app, "DELETE", &format!("/session/{s}"), None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn changing_span_or_context_drops_handles() {
    let app = app();
    let s = session(&app, 2).await;
    let g = ok(&app, "POST", "/generate", json!({ "session_id": s })).await;
    let uri = format!("/session/{s}");
    // an identical update keeps the handles
    let same = ok(&app, "PUT", &uri, json!({ "span": { "start": 2, "length": 4 } })).await;
    assert_eq!(same["invalidated"], 0);
    ok(&app, "POST", "/vary", json!({ "session_id": s, "z_handle": g["z_handle"], "delta": 0.0 })).await;

    let moved = ok(&app, "PUT", &uri, json!({ "span": { "start": 0, "length": 2 } })).await;
    assert_eq!(moved["invalidated"], 1);
    let (st, _) = call(&app, "POST", "/vary", Some(json!({ "session_id": s, "z_handle": g["z_handle"], "delta": 0.0 }))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    let g = ok(&app, "POST", "/generate", json!({ "session_id": s })).await;
    let mut w = window();
    w[7] = json!("55");
    let edited = ok(&app, "PUT", &uri, json!({ "window": w })).await;
    assert_eq!(edited["invalidated"], 1);
    let (st, _) = call(&app, "POST", "/vary", Some(json!({ "session_id": s, "z_handle": g["z_handle"], "delta": 0.0 }))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(&app, "PUT", &uri, Some(json!({ "span": { "start": 7, "length": 2 } }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn idle_sessions_expire() {
    let app = app_with(tiny_model(1), ServeOptions { ttl: Duration::from_millis(50), seed: 0 });
    let s = session(&app, 1).await;
    ok(&app, "POST", "/generate", json!({ "session_id": s })).await;
    tokio::time::sleep(Duration::from_millis(120)).await;
    let (st, _) = call(&app, "POST", "/generate", Some(json!({ "session_id": s }))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn numeric_failure_is_500() {
    let m = tiny_model(1);
    for (name, t) in m.store().snapshot().unwrap() {
        if name.starts_with("prior.") {
            let nan = Tensor::full(f32::NAN, t.shape(), &Device::Cpu).unwrap();
            m.store().var(&name).unwrap().set(&nan).unwrap();
        }
    }
    let app = app_with(m, ServeOptions::default());
    let s = session(&app, 1).await;
    let (st, body) = call(&app, "POST", "/generate", Some(json!({ "session_id": s }))).await;
    assert_eq!(st, StatusCode::INTERNAL_SERVER_ERROR, "{}", String::from_utf8_lossy(&body));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn interleaved_sessions_do_not_interfere() {
    let app = app();
    let script = |app: Router, seed: u64| async move {
        let s = session(&app, seed).await;
        let mut out = Vec::new();
        let g1 = ok(&app, "POST", "/generate", json!({ "session_id": s })).await;
        let g2 = ok(&app, "POST", "/generate", json!({ "session_id": s })).await;
        out.push(g1["tokens"].clone());
        out.push(g2["tokens"].clone());
        let i = ok(&app, "POST", "/interpolate", json!({ "session_id": s, "from": g1["z_handle"], "to": g2["z_handle"], "J": 4 })).await;
        out.push(i["sequences"].clone());
        let v = ok(&app, "POST", "/vary", json!({ "session_id": s, "z_handle": g1["z_handle"], "delta": 0.5 })).await;
        out.push(v["tokens"].clone());
        out
    };
    // sequential reference
    let mut reference = Vec::new();
    for seed in 0..6 {
        reference.push(script(app.clone(), seed).await);
    }
    // the same scripts interleaved
    let handles: Vec<_> = (0..6).map(|seed| tokio::spawn(script(app.clone(), seed))).collect();
    for (seed, h) in handles.into_iter().enumerate() {
        assert_eq!(h.await.unwrap(), reference[seed], "session seed {seed}");
    }
}
