mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use common::tiny;
use serde_json::{json, Value};
use shapegene::labelspace::quantize;
use shapegene::Image;
use shapegene_cli::service::*;
use tower::ServiceExt;

fn state(stage: &str, edit: impl FnOnce(&mut ServiceConfig)) -> Arc<ServiceState> {
    let mut cfg = ServiceConfig::new(tiny().ckpt(stage));
    cfg.manifest = Some(tiny().manifest());
    edit(&mut cfg);
    Arc::new(ServiceState::new(&cfg).unwrap())
}

async fn call(st: &Arc<ServiceState>, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let body = body.map_or_else(Body::empty, |b| Body::from(b.to_string()));
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body)
        .unwrap();
    raw(st, req).await
}

async fn raw(st: &Arc<ServiceState>, req: Request<Body>) -> (StatusCode, Value) {
    let resp = router(st.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn b64(image: &Image) -> String {
    encode_image(image).unwrap()
}

fn faces() -> Vec<String> {
    tiny().faces(2).iter().map(b64).collect()
}

fn assert_error(resp: &(StatusCode, Value), status: StatusCode, code: &str) {
    assert_eq!(resp.0, status, "{}", resp.1);
    assert_eq!(resp.1["code"], code, "{}", resp.1);
    assert!(resp.1["message"].as_str().is_some_and(|m| !m.is_empty()));
}

#[tokio::test]
async fn health_and_palette() {
    let st = state("cyclic", |_| {});
    let (s, v) = call(&st, Method::GET, "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["stage"], "cyclic");
    assert_eq!(v["resolution"], common::RES);
    assert_eq!(v["gene_dim"], 28);
    assert_eq!(v["has_transformer"], true);
    assert_eq!(v["checkpoint_digest"], st.model().digest.as_str());

    let (s, v) = call(&st, Method::GET, "/palette", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["classes"].as_array().unwrap().len(), 11);
    assert_eq!(v["parts"].as_array().unwrap().len(), 7);
}

#[tokio::test]
async fn gallery_lists_a_split() {
    let st = state("cyclic", |_| {});
    let (s, v) = call(&st, Method::GET, "/faces?split=test&limit=2", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["faces"].as_array().unwrap().len(), 2);
    assert!(v["total"].as_u64().unwrap() >= 2);
    let img = decode_image(v["faces"][0]["image"].as_str().unwrap()).unwrap();
    assert_eq!(img.size(), common::RES);

    assert_error(&call(&st, Method::GET, "/faces?split=holdout", None).await, StatusCode::BAD_REQUEST, "BAD_IMAGE");
    assert_error(&call(&st, Method::GET, "/faces?limit=-1", None).await, StatusCode::BAD_REQUEST, "BAD_IMAGE");
    let bare = state("cyclic", |c| c.manifest = None);
    assert_error(&call(&bare, Method::GET, "/faces", None).await, StatusCode::SERVICE_UNAVAILABLE, "MODEL_UNAVAILABLE");
}

#[tokio::test]
async fn parse_returns_a_palette_label_and_gene() {
    let st = state("cyclic", |_| {});
    let f = faces();
    let (s, v) = call(&st, Method::POST, "/parse", Some(json!({"image": f[0]}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let label = decode_image(v["label"].as_str().unwrap()).unwrap();
    assert!(quantize(&label).image() == &label);
    assert_eq!(v["gene_values"].as_array().unwrap().len(), 28);
    assert!(!v["gene"].as_str().unwrap().is_empty());
}

#[tokio::test]
async fn remix_and_interpolate_contracts() {
    let st = state("cyclic", |_| {});
    let f = faces();
    let req = |part: &str, alpha: f64| json!({"receptor": f[0], "donor": f[1], "part": part, "alpha": alpha});
    let (s, v) = call(&st, Method::POST, "/remix", Some(req("hair", 1.0))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    for k in ["remixed_label", "remixed_face", "composited_face", "gene"] {
        assert!(v[k].is_string(), "{k}");
    }
    let (_, zero) = call(&st, Method::POST, "/remix", Some(req("hair", 0.0))).await;
    let (_, parsed) = call(&st, Method::POST, "/parse", Some(json!({"image": f[0]}))).await;
    assert_eq!(zero["remixed_label"], parsed["label"]);

    let (s, v) = call(&st, Method::POST, "/interpolate", Some(json!({"receptor": f[0], "donor": f[1], "part": "hair", "steps": 3}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let frames = v["frames"].as_array().unwrap();
    let alphas: Vec<f64> = frames.iter().map(|fr| fr["alpha"].as_f64().unwrap()).collect();
    assert_eq!(alphas, vec![0.0, 0.5, 1.0]);
    assert_eq!(frames[0]["remixed_label"], zero["remixed_label"]);
    let (_, one) = call(&st, Method::POST, "/remix", Some(req("hair", 1.0))).await;
    assert_eq!(frames[2]["remixed_label"], one["remixed_label"]);
}

#[tokio::test]
async fn negative_inputs_map_to_error_codes() {
    let st = state("cyclic", |_| {});
    let f = faces();
    let bad = StatusCode::BAD_REQUEST;
    let post = |uri: &'static str, body: Value| {
        let st = st.clone();
        async move { call(&st, Method::POST, uri, Some(body)).await }
    };
    assert_error(&post("/remix", json!({"receptor": f[0], "donor": f[1], "part": "wings"})).await, bad, "BAD_PART");
    assert_error(&post("/remix", json!({"receptor": f[0], "donor": f[1], "part": "hair", "alpha": 1.5})).await, bad, "BAD_ALPHA");
    assert_error(&post("/remix", json!({"receptor": f[0], "donor": f[1], "part": "hair", "alpha": -0.1})).await, bad, "BAD_ALPHA");
    assert_error(&post("/remix", json!({"receptor": "%%%", "donor": f[1], "part": "hair"})).await, bad, "BAD_IMAGE");
    assert_error(&post("/parse", json!({"image": "aGVsbG8="})).await, bad, "BAD_IMAGE");
    let small = b64(&Image::filled(16, [0.5; 3]));
    assert_error(&post("/parse", json!({"image": small})).await, bad, "BAD_IMAGE");
    let large = b64(&Image::filled(64, [0.5; 3]));
    assert_error(&post("/parse", json!({"image": large})).await, bad, "BAD_IMAGE");
    assert_error(&post("/parse", json!({"picture": f[0]})).await, bad, "BAD_IMAGE");
    for steps in [0, 1, 65] {
        let body = json!({"receptor": f[0], "donor": f[1], "part": "hair", "steps": steps});
        assert_error(&post("/interpolate", body).await, bad, "BAD_ALPHA");
    }
    let body = json!({"receptor": f[0], "donor": f[1], "part": "tail", "steps": 3});
    assert_error(&post("/interpolate", body).await, bad, "BAD_PART");

    let malformed = Request::post("/parse").body(Body::from("{not json")).unwrap();
    assert_error(&raw(&st, malformed).await, bad, "BAD_IMAGE");
    let huge = Request::post("/parse").body(Body::from(vec![b' '; (32 << 20) + 1])).unwrap();
    assert_error(&raw(&st, huge).await, StatusCode::PAYLOAD_TOO_LARGE, "BAD_IMAGE");

    assert_error(&call(&st, Method::GET, "/nowhere", None).await, StatusCode::NOT_FOUND, "MODEL_UNAVAILABLE");
    assert_error(&call(&st, Method::GET, "/remix", None).await, StatusCode::METHOD_NOT_ALLOWED, "MODEL_UNAVAILABLE");
}

#[tokio::test]
async fn max_edge_is_checked_before_decoding() {
    let st = state("cyclic", |c| c.max_edge = Some(16));
    let f = faces();
    let resp = call(&st, Method::POST, "/parse", Some(json!({"image": f[0]}))).await;
    assert_error(&resp, StatusCode::BAD_REQUEST, "BAD_IMAGE");
    assert!(resp.1["message"].as_str().unwrap().contains("max edge"));
}

#[tokio::test]
async fn generate_needs_a_transformer() {
    let f = faces();
    let cyc = state("cyclic", |_| {});
    let (_, parsed) = call(&cyc, Method::POST, "/parse", Some(json!({"image": f[0]}))).await;
    let body = json!({"label": parsed["label"], "conditional_image": f[0]});
    let (s, v) = call(&cyc, Method::POST, "/generate", Some(body.clone())).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(decode_image(v["face"].as_str().unwrap()).unwrap().size(), common::RES);

    // off-palette colors are snapped rather than rejected
    let mut noisy = decode_image(parsed["label"].as_str().unwrap()).unwrap();
    noisy.data_mut().iter_mut().for_each(|v| *v = (*v * 0.9 + 0.03).clamp(0.0, 1.0));
    let snapped = json!({"label": b64(&noisy), "conditional_image": f[0]});
    assert_eq!(call(&cyc, Method::POST, "/generate", Some(snapped)).await.0, StatusCode::OK);

    let overall = state("overall", |_| {});
    let resp = call(&overall, Method::POST, "/generate", Some(body)).await;
    assert_error(&resp, StatusCode::SERVICE_UNAVAILABLE, "MODEL_UNAVAILABLE");
    let (s, v) = call(&overall, Method::POST, "/remix", Some(json!({"receptor": f[0], "donor": f[1], "part": "nose"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["remixed_face"].is_null());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn saturation_and_timeouts_return_503() {
    let f = faces();
    let st = state("cyclic", |c| c.max_in_flight = 1);
    let body = json!({"receptor": f[0], "donor": f[1], "part": "hair", "steps": 64});
    let (a, b, c) = tokio::join!(
        call(&st, Method::POST, "/interpolate", Some(body.clone())),
        call(&st, Method::POST, "/interpolate", Some(body.clone())),
        call(&st, Method::POST, "/interpolate", Some(body.clone())),
    );
    let results = [a, b, c];
    assert!(results.iter().any(|r| r.0 == StatusCode::OK));
    let busy: Vec<_> = results.iter().filter(|r| r.0 != StatusCode::OK).collect();
    assert!(!busy.is_empty());
    for r in busy {
        assert_error(r, StatusCode::SERVICE_UNAVAILABLE, "MODEL_UNAVAILABLE");
    }

    let slow = state("cyclic", |c| c.timeout_secs = 1e-9);
    let resp = call(&slow, Method::POST, "/interpolate", Some(body)).await;
    assert_error(&resp, StatusCode::SERVICE_UNAVAILABLE, "MODEL_UNAVAILABLE");
}

#[test]
fn state_rejects_unusable_configs() {
    let ckpt = tiny().ckpt("cyclic");
    let bad = |edit: &dyn Fn(&mut ServiceConfig)| {
        let mut cfg = ServiceConfig::new(&ckpt);
        edit(&mut cfg);
        ServiceState::new(&cfg).is_err()
    };
    assert!(bad(&|c| c.max_edge = Some(0)));
    assert!(bad(&|c| c.max_edge = Some(64)));
    assert!(bad(&|c| c.timeout_secs = 0.0));
    assert!(bad(&|c| c.max_in_flight = 0));
    assert!(bad(&|c| c.checkpoint = tiny().ckpt("parsers")));
    assert!(bad(&|c| c.checkpoint = "/nonexistent.ckpt".into()));
    assert!(!bad(&|_| {}));
}

#[test]
fn service_config_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("serve.toml");
    std::fs::write(&path, "checkpoint = \"run/cyclic.ckpt\"\nmanifest = \"/data/manifest.json\"\nbind = \"0.0.0.0:9000\"\n").unwrap();
    let cfg = ServiceConfig::load(&path).unwrap();
    assert_eq!(cfg.checkpoint, dir.path().join("run/cyclic.ckpt"));
    assert_eq!(cfg.manifest.as_deref(), Some(std::path::Path::new("/data/manifest.json")));
    assert_eq!(cfg.bind.port(), 9000);
    assert_eq!((cfg.timeout_secs, cfg.max_in_flight), (30.0, 4));
    std::fs::write(&path, "checkpoint = \"x\"\nextra = 1\n").unwrap();
    assert!(ServiceConfig::load(&path).is_err());
}
