use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;

use safeclick::data::{generate_dataset, SynthConfig};
use safeclick::model::ModelConfig;
use safeclick::rle::decode_rle;
use safeclick_cli::service::{fresh_pair, router, AppState, Health, PerturbResponse, SampleDetail, SegmentResponse, Snapshot};

fn state() -> AppState {
    let cfg = ModelConfig { image_size: 32, patch_size: 8, ..ModelConfig::tiny() };
    let samples = generate_dataset(4, 3, &SynthConfig { size: 32, ..Default::default() }).unwrap();
    AppState::new(Snapshot::new(fresh_pair(cfg, 7).unwrap(), samples).unwrap())
}

async fn call(state: &AppState, method: &str, uri: &str, body: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = router(state.clone(), None).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

#[tokio::test]
async fn health_lists_variants() {
    let s = state();
    let (code, body) = call(&s, "GET", "/api/health", "").await;
    assert_eq!(code, StatusCode::OK);
    let h: Health = serde_json::from_slice(&body).unwrap();
    assert_eq!(h.variants, ["baseline", "safeclick"]);
    assert_eq!((h.image_size, h.samples), (Some(32), 4));
}

#[tokio::test]
async fn sample_detail_and_missing_sample() {
    let s = state();
    let (code, body) = call(&s, "GET", "/api/sample/1", "").await;
    assert_eq!(code, StatusCode::OK);
    let d: SampleDetail = serde_json::from_slice(&body).unwrap();
    assert_eq!(decode_rle(&d.gt_mask).unwrap(), s.snapshot().samples[1].mask);
    assert!(!d.image_png.is_empty());
    assert_eq!(call(&s, "GET", "/api/sample/99", "").await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&s, "GET", "/api/sample/x", "").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&s, "GET", "/api/samples", "").await.0, StatusCode::OK);
}

fn segment_body(variant: &str, prompt: &str) -> String {
    format!(r#"{{"sample_id": 0, "variant": "{variant}", "prompts": [{prompt}]}}"#)
}

#[tokio::test]
async fn fresh_pair_segments_identically() {
    let s = state();
    let p = r#"{"type":"point","x":12,"y":20,"label":1}"#;
    let (c1, b1) = call(&s, "POST", "/api/segment", &segment_body("baseline", p)).await;
    let (c2, b2) = call(&s, "POST", "/api/segment", &segment_body("safeclick", p)).await;
    assert_eq!((c1, c2), (StatusCode::OK, StatusCode::OK));
    let r1: SegmentResponse = serde_json::from_slice(&b1).unwrap();
    let r2: SegmentResponse = serde_json::from_slice(&b2).unwrap();
    assert_eq!(r1.mask_rle, r2.mask_rle);
    assert_eq!((r1.logits_min, r1.logits_max), (r2.logits_min, r2.logits_max));
    assert!(r1.dice_vs_gt.is_some());
}

#[tokio::test]
async fn bad_requests_are_rejected() {
    let s = state();
    let oob = r#"{"type":"point","x":40,"y":3,"label":1}"#;
    assert_eq!(call(&s, "POST", "/api/segment", &segment_body("baseline", oob)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&s, "POST", "/api/segment", "{not json").await.0, StatusCode::BAD_REQUEST);
    let wrong_field = r#"{"sample_id": 0, "variant": "baseline", "prompts": [{"type":"point","x":1}]}"#;
    assert_eq!(call(&s, "POST", "/api/segment", wrong_field).await.0, StatusCode::BAD_REQUEST);
    let unloaded = segment_body("ablate_e1", r#"{"type":"point","x":1,"y":1,"label":1}"#);
    assert_eq!(call(&s, "POST", "/api/segment", &unloaded).await.0, StatusCode::BAD_REQUEST);
    let empty = r#"{"sample_id": 0, "variant": "baseline", "prompts": []}"#;
    assert_eq!(call(&s, "POST", "/api/segment", empty).await.0, StatusCode::BAD_REQUEST);
    let missing = r#"{"sample_id": 9, "variant": "baseline", "prompts": [{"type":"point","x":1,"y":1,"label":1}]}"#;
    assert_eq!(call(&s, "POST", "/api/segment", missing).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn identical_requests_give_identical_bytes() {
    let s = state();
    let body = r#"{"sample_id": 2, "variant": "safeclick",
        "prompts": [{"type":"box","x0":4,"y0":5,"x1":20,"y1":22}],
        "perturb": {"kind":"box","level":1.25,"seed":3}}"#;
    let (c, a) = call(&s, "POST", "/api/segment", body).await;
    assert_eq!(c, StatusCode::OK);
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let s = s.clone();
            tokio::spawn(async move { call(&s, "POST", "/api/segment", body).await.1 })
        })
        .collect();
    for h in handles {
        assert_eq!(h.await.unwrap(), a);
    }
    let r: SegmentResponse = serde_json::from_slice(&a).unwrap();
    assert_ne!(r.applied_prompts[0], safeclick::data::Prompt::boxed(4.0, 5.0, 20.0, 22.0));
}

#[tokio::test]
async fn perturb_endpoint() {
    let s = state();
    let q0 = r#"{"prompt":{"type":"point","x":10,"y":11,"label":1},"spec":{"kind":"point","level":0.0,"seed":5},"sample_id":0}"#;
    let (c, b) = call(&s, "POST", "/api/perturb", q0).await;
    assert_eq!(c, StatusCode::OK);
    let r: PerturbResponse = serde_json::from_slice(&b).unwrap();
    assert_eq!(r.perturbed, r.prompt);

    let q1 = r#"{"prompt":{"type":"point","x":10,"y":11,"label":1},"spec":{"kind":"point","level":1.0,"seed":5},"radius":4.0}"#;
    let r: PerturbResponse = serde_json::from_slice(&call(&s, "POST", "/api/perturb", q1).await.1).unwrap();
    let safeclick::data::Prompt::Point { x, y, .. } = r.perturbed else { panic!() };
    assert!(((x - 10.0).hypot(y - 11.0) - 4.0).abs() < 1e-9);

    let no_radius = r#"{"prompt":{"type":"point","x":10,"y":11,"label":1},"spec":{"kind":"point","level":0.5}}"#;
    assert_eq!(call(&s, "POST", "/api/perturb", no_radius).await.0, StatusCode::BAD_REQUEST);
    let bad_level = r#"{"prompt":{"type":"point","x":10,"y":11,"label":1},"spec":{"kind":"point","level":2.0},"radius":3}"#;
    assert_eq!(call(&s, "POST", "/api/perturb", bad_level).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn snapshot_swap_is_visible_to_new_requests() {
    let s = state();
    let cfg = ModelConfig { image_size: 32, patch_size: 8, ..ModelConfig::tiny() };
    s.replace(Snapshot::new(fresh_pair(cfg, 8).unwrap()[..1].to_vec(), Vec::new()).unwrap());
    let h: Health = serde_json::from_slice(&call(&s, "GET", "/api/health", "").await.1).unwrap();
    assert_eq!((h.variants.len(), h.samples), (1, 0));
}
