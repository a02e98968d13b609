mod common;

use std::sync::OnceLock;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use textloc::core::{dequantize, expand, quantize, BBox};
use textloc::server::{router, Health, LATENCY_HEADER};
use textloc::train::Page;
use textloc::{Engine, InferenceRequest, InferenceResponse, ServiceTask};
use tower::ServiceExt;

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, body)
}

fn post(uri: &str, body: impl Into<Body>) -> Request<Body> {
    Request::builder()
        .method(Method::POST)
        .uri(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(body.into())
        .unwrap()
}

fn infer_body(req: &InferenceRequest) -> String {
    serde_json::to_string(req).unwrap()
}

fn micro_app() -> (Engine, Router) {
    let engine = common::micro_engine();
    (engine.clone(), router(engine, &[]))
}

#[tokio::test]
async fn healthz_reports_the_checkpoint_hash() {
    let (engine, app) = micro_app();
    let (status, _, body) = call(&app, Request::get("/healthz").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let h: Health = serde_json::from_slice(&body).unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.checkpoint, engine.checkpoint_hash());
    assert_eq!(h.checkpoint.len(), 64);
    assert_eq!(h.vocabulary, engine.vocab_hash());
    assert_eq!(h.max_image, [160, 50]);
}

#[tokio::test]
async fn malformed_requests_are_400() {
    let (engine, app) = micro_app();
    let (max_w, max_h) = engine.max_image();
    let png = common::blank_png(100, 40);
    let mut region_without_box = InferenceRequest::new(&png, ServiceTask::Region);
    region_without_box.query = Some("x".into());
    let mut ocr_with_query = InferenceRequest::new(&png, ServiceTask::Ocr);
    ocr_with_query.query = Some("x".into());
    let mut empty_region = InferenceRequest::new(&png, ServiceTask::Region);
    empty_region.region = Some([10, 10, 10, 20]);
    let mut outside_region = InferenceRequest::new(&png, ServiceTask::Region);
    outside_region.region = Some([10, 10, 120, 20]);
    let mut empty_query = InferenceRequest::new(&png, ServiceTask::Locate);
    empty_query.query = Some(String::new());
    let bodies = vec![
        "not json".to_string(),
        json!({ "task": "ocr" }).to_string(),
        json!({ "image": "AAAA", "task": "transcribe" }).to_string(),
        json!({ "image": "%%%", "task": "ocr" }).to_string(),
        json!({ "image": "aGVsbG8=", "task": "ocr" }).to_string(),
        infer_body(&InferenceRequest::new(&common::blank_png(max_w as u32 + 1, 20), ServiceTask::Ocr)),
        infer_body(&InferenceRequest::new(&common::blank_png(20, max_h as u32 + 1), ServiceTask::Ocr)),
        infer_body(&region_without_box),
        infer_body(&ocr_with_query),
        infer_body(&empty_region),
        infer_body(&outside_region),
        infer_body(&empty_query),
    ];
    for body in bodies {
        let (status, _, resp) = call(&app, post("/api/infer", body.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{}", &body[..body.len().min(80)]);
        let v: Value = serde_json::from_slice(&resp).unwrap();
        assert!(v["error"].is_string());
    }
    let ok = infer_body(&InferenceRequest::new(&png, ServiceTask::Ocr));
    for uri in ["/api/infer?pad=-1", "/api/infer?pad=abc"] {
        let (status, _, _) = call(&app, post(uri, ok.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri}");
    }
}

#[tokio::test]
async fn unknown_query_characters_are_422() {
    let (_, app) = micro_app();
    let mut req = InferenceRequest::new(&common::blank_png(100, 40), ServiceTask::Locate);
    req.query = Some("caf\u{e9}".into());
    let (status, _, body) = call(&app, post("/api/infer", infer_body(&req))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert!(v["error"].as_str().unwrap().contains('\u{e9}'));
}

#[tokio::test]
async fn identical_requests_get_identical_bodies() {
    let (engine, app) = micro_app();
    let page = &common::pages(1, 9)[0];
    let body = infer_body(&InferenceRequest::new(&common::png(page), ServiceTask::OcrLayout));
    let (s1, h1, b1) = call(&app, post("/api/infer", body.clone())).await;
    assert_eq!(s1, StatusCode::OK);
    assert!(h1[LATENCY_HEADER].to_str().unwrap().parse::<f64>().unwrap() >= 0.0);
    // Concurrent copies of the same request.
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let (app, body) = (app.clone(), body.clone());
            tokio::spawn(async move { call(&app, post("/api/infer", body)).await })
        })
        .collect();
    for h in handles {
        let (s, _, b) = h.await.unwrap();
        assert_eq!(s, StatusCode::OK);
        assert_eq!(b, b1);
    }
    let resp: InferenceResponse = serde_json::from_slice(&b1).unwrap();
    assert_eq!(resp.model_version, engine.checkpoint_hash());
    assert_eq!(resp.vocab_version, engine.vocab_hash());
    assert!(resp.elements.is_some() && resp.lines.is_none() && resp.bbox.is_none());
}

#[tokio::test]
async fn cors_preflight_is_answered() {
    let engine = common::micro_engine();
    let app = router(engine, &["http://localhost:5173".to_string()]);
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/api/infer")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .header(header::ACCESS_CONTROL_REQUEST_HEADERS, "content-type")
        .body(Body::empty())
        .unwrap();
    let (status, headers, _) = call(&app, req).await;
    assert!(status.is_success());
    assert_eq!(headers[header::ACCESS_CONTROL_ALLOW_ORIGIN], "http://localhost:5173");
}

fn overfit() -> &'static (Vec<Page>, Engine) {
    static CELL: OnceLock<(Vec<Page>, Engine)> = OnceLock::new();
    CELL.get_or_init(|| {
        let pages = common::pages(4, 1);
        let engine = common::overfit_engine(&pages);
        (pages, engine)
    })
}

async fn infer_ok(app: &Router, req: &InferenceRequest, uri: &str) -> InferenceResponse {
    let (status, _, body) = call(app, post(uri, infer_body(req))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

#[tokio::test]
async fn overfit_model_reads_regions_and_locates_lines() {
    let (pages, engine) = tokio::task::spawn_blocking(overfit).await.unwrap();
    let app = router(engine.clone(), &[]);
    let (mut read, mut found, mut total) = (0, 0, 0);
    for page in pages {
        let png = common::png(page);
        for line in &page.lines {
            total += 1;
            let b = line.bbox;
            let mut req = InferenceRequest::new(&png, ServiceTask::Region);
            req.region = Some([b.x1 as u32, b.y1 as u32, b.x2.ceil() as u32, b.y2.ceil() as u32]);
            let resp = infer_ok(&app, &req, "/api/infer").await;
            if resp.lines.as_deref() == Some(std::slice::from_ref(&line.text)) {
                read += 1;
            } else {
                eprintln!("region {:?}: want {:?} got {:?}", req.region, line.text, resp.lines);
            }

            let mut req = InferenceRequest::new(&png, ServiceTask::Locate);
            req.query = Some(line.text.clone());
            let resp = infer_ok(&app, &req, "/api/infer").await;
            let got = resp.bbox.expect("locate answers with a box field");
            // The best a step-10 grid can answer: the quantized box, clipped.
            let d = dequantize(&quantize(&b, engine.model().vocab().grid()), engine.model().vocab().grid());
            let want = [d.x1 as u32, d.y1 as u32, (d.x2 as u32).min(page.width as u32), (d.y2 as u32).min(page.height as u32)];
            if got == Some(want) {
                found += 1;
            } else {
                eprintln!("locate {:?}: want {want:?} got {got:?}", line.text);
            }
        }
    }
    assert_eq!((read, found), (total, total));
}

#[tokio::test]
async fn pad_grows_boxes_and_is_echoed() {
    let (pages, engine) = tokio::task::spawn_blocking(overfit).await.unwrap();
    let app = router(engine.clone(), &[]);
    let page = &pages[0];
    let req = InferenceRequest::new(&common::png(page), ServiceTask::OcrLayout);
    let plain = infer_ok(&app, &req, "/api/infer").await;
    let padded = infer_ok(&app, &req, "/api/infer?pad=2").await;
    assert_eq!(plain.pad, None);
    assert_eq!(padded.pad, Some(2.0));
    let (a, b) = (plain.elements.unwrap(), padded.elements.unwrap());
    assert!(!a.is_empty());
    assert_eq!(a.len(), b.len());
    for (p, q) in a.iter().zip(&b) {
        let bb = BBox { x1: p.bbox[0].into(), y1: p.bbox[1].into(), x2: p.bbox[2].into(), y2: p.bbox[3].into() };
        let e = expand(&bb, 2.0, page.width as f64, page.height as f64);
        assert_eq!(q.bbox, [e.x1 as u32, e.y1 as u32, e.x2 as u32, e.y2 as u32]);
        assert_eq!(p.text, q.text);
    }
}
