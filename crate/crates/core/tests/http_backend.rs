//! Live HTTP backends and the remote eraser against a local fake provider.

mod common;

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::IntoResponse;
use axum::routing::post;
use axum::{Json, Router};
use image::{Rgb, RgbImage};
use serde_json::{json, Value};

use unhate::backend::http::{HttpChatBackend, HttpChatConfig, HttpEmbeddingBackend, HttpEmbeddingConfig};
use unhate::backend::{BackendError, ChatBackend, EmbedItem, EmbeddingBackend, Gateway};
use unhate::compositor::{EraseError, EraserBackend, RemoteEraser, TextRegion};
use unhate::config::{BackendKind, PipelineConfig};
use unhate::model::{ImageHandle, Label, MemeRecord};
use unhate::pipeline::Pipeline;
use unhate::prompt::render_detection_prompt;

#[derive(Default)]
struct Provider {
    chats: Mutex<Vec<(Option<String>, Value)>>,
    embed_calls: AtomicUsize,
}

async fn chat(State(p): State<Arc<Provider>>, headers: HeaderMap, Json(body): Json<Value>) -> impl IntoResponse {
    let auth = headers.get("authorization").and_then(|v| v.to_str().ok()).map(str::to_string);
    p.chats.lock().unwrap().push((auth, body.clone()));
    let text = body.to_string();
    if text.contains("please refuse") {
        return (StatusCode::BAD_REQUEST, Json(json!({"error": {"code": "content_filter", "message": "blocked"}})));
    }
    if text.contains("filtered finish") {
        return (StatusCode::OK, Json(json!({"choices": [{"finish_reason": "content_filter", "message": {"content": null}}]})));
    }
    let content = "Classification: hateful\nProbability of the meme being hateful (from 0 to 1): 0.70";
    (StatusCode::OK, Json(json!({"choices": [{"finish_reason": "stop", "message": {"role": "assistant", "content": content}}]})))
}

async fn embeddings(State(p): State<Arc<Provider>>, Json(body): Json<Value>) -> impl IntoResponse {
    // every other call is rate limited
    if p.embed_calls.fetch_add(1, Ordering::SeqCst) % 2 == 0 {
        return (StatusCode::TOO_MANY_REQUESTS, Json(json!({"error": {"code": "rate_limit"}})));
    }
    let input = body["input"].as_str().unwrap_or_default();
    let v = if input.starts_with("data:image/png;base64,") { [0.0, 3.0, 4.0, 0.0] } else { [1.0, 0.0, 0.0, 0.0] };
    (StatusCode::OK, Json(json!({"data": [{"embedding": v}]})))
}

/// Fake inpainting service: finds the PNG part in the multipart body and
/// answers with a white image of the same size, or a wrong size on /shrink.
fn png_in(body: &[u8]) -> RgbImage {
    let start = body.windows(4).position(|w| w == b"\x89PNG").unwrap();
    let end = body.windows(8).position(|w| w == b"IEND\xaeB`\x82").unwrap() + 8;
    image::load_from_memory(&body[start..end]).unwrap().to_rgb8()
}

fn png_bytes(img: &RgbImage) -> Vec<u8> {
    unhate::model::encode_png(img).unwrap()
}

async fn erase(body: Bytes) -> impl IntoResponse {
    let img = png_in(&body);
    assert!(body.windows(9).any(|w| w == b"\"regions\""));
    png_bytes(&RgbImage::from_pixel(img.width(), img.height(), Rgb([255, 255, 255])))
}

async fn shrink(body: Bytes) -> impl IntoResponse {
    let img = png_in(&body);
    png_bytes(&RgbImage::new(img.width() / 2, img.height()))
}

fn start_provider() -> (SocketAddr, Arc<Provider>) {
    let provider = Arc::new(Provider::default());
    let app = Router::new()
        .route("/v1/chat/completions", post(chat))
        .route("/v1/embeddings", post(embeddings))
        .route("/erase", post(erase))
        .route("/shrink", post(shrink))
        .with_state(provider.clone());
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    (rx.recv().unwrap(), provider)
}

fn meme(text: &str) -> MemeRecord {
    MemeRecord::new("q1", ImageHandle::from_raster(RgbImage::from_pixel(24, 16, Rgb([9, 99, 199]))), text)
}

fn chat_config(addr: SocketAddr) -> HttpChatConfig {
    HttpChatConfig {
        api_key: Some("sk-test".into()),
        min_safety_filtering: true,
        ..HttpChatConfig::new(format!("http://{addr}/v1"), "vision-model")
    }
}

#[test]
fn chat_request_shape_and_refusals() {
    let (addr, provider) = start_provider();
    let backend = HttpChatBackend::new(chat_config(addr)).unwrap();
    let prompt = render_detection_prompt(&meme("ordinary words"), &[], false).unwrap();
    let reply = backend.complete(&prompt).unwrap();
    assert!(reply.contains("0.70"));
    {
        let chats = provider.chats.lock().unwrap();
        let (auth, body) = &chats[0];
        assert_eq!(auth.as_deref(), Some("Bearer sk-test"));
        assert_eq!(body["model"], "vision-model");
        assert_eq!(body["temperature"], 0.0);
        assert!(body["safety_settings"].as_array().is_some_and(|a| !a.is_empty()));
        let parts = body["messages"][0]["content"].as_array().unwrap();
        let images = parts.iter().filter(|p| p["type"] == "image_url").count();
        assert_eq!(images, 1);
        let url = parts.iter().find(|p| p["type"] == "image_url").unwrap()["image_url"]["url"].as_str().unwrap();
        assert!(url.starts_with("data:image/png;base64,"));
    }

    let refused = render_detection_prompt(&meme("x").with_ocr("please refuse"), &[], true).unwrap();
    let r = backend.complete(&refused);
    assert!(matches!(r, Err(BackendError::ProviderRefusal(_))), "{r:?}");
    let filtered = render_detection_prompt(&meme("x").with_ocr("filtered finish"), &[], true).unwrap();
    assert!(matches!(backend.complete(&filtered), Err(BackendError::ProviderRefusal(_))));
}

#[test]
fn unreachable_provider_is_a_transport_error() {
    let cfg = HttpChatConfig {
        timeout: Duration::from_secs(2),
        ..HttpChatConfig::new("http://127.0.0.1:9/v1", "m")
    };
    let backend = HttpChatBackend::new(cfg).unwrap();
    let prompt = render_detection_prompt(&meme("x"), &[], false).unwrap();
    let err = backend.complete(&prompt).unwrap_err();
    assert!(err.is_transient(), "{err:?}");
}

#[test]
fn embeddings_retry_through_rate_limits_and_normalize() {
    let (addr, provider) = start_provider();
    let embedder = HttpEmbeddingBackend::new(HttpEmbeddingConfig {
        base_url: format!("http://{addr}/v1"),
        model: "clip".into(),
        api_key: None,
        dim: 4,
        timeout: Duration::from_secs(5),
    })
    .unwrap();
    assert!(matches!(embedder.embed_text("kite"), Err(BackendError::RateLimited)));
    let chat = Arc::new(HttpChatBackend::new(chat_config(addr)).unwrap());
    let gateway = Gateway::new(chat, Arc::new(embedder));
    let img = ImageHandle::from_raster(RgbImage::from_pixel(4, 4, Rgb([1, 2, 3])));
    let v = gateway.embed(EmbedItem::Image(&img)).unwrap();
    assert_eq!(v.values(), [0.0, 0.6, 0.8, 0.0]);
    let t = gateway.embed(EmbedItem::Text("kite")).unwrap();
    assert_eq!(t.values(), [1.0, 0.0, 0.0, 0.0]);
    assert!(provider.embed_calls.load(Ordering::SeqCst) >= 4);
}

#[test]
fn live_pipeline_detects_through_the_provider() {
    let (addr, _provider) = start_provider();
    let cfg = PipelineConfig {
        backend: BackendKind::Live,
        base_url: format!("http://{addr}/v1"),
        embedding_dim: 4,
        ..Default::default()
    };
    let pipeline = Pipeline::new(cfg, None, None).unwrap();
    let result = pipeline.detect_one(&meme("words")).unwrap();
    assert_eq!(result.label, Label::Hateful);
    assert_eq!(result.probability, 0.7);
}

#[test]
fn remote_eraser_round_trip_and_dimension_check() {
    let (addr, _provider) = start_provider();
    let img = RgbImage::from_pixel(30, 20, Rgb([10, 10, 10]));
    let regions = [TextRegion::new(2, 2, 10, 5)];
    let eraser = RemoteEraser::new(format!("http://{addr}/erase"), Duration::from_secs(5)).unwrap();
    let out = eraser.erase(&img, &regions).unwrap();
    assert_eq!(out.dimensions(), (30, 20));
    assert_eq!(out.get_pixel(0, 0), &Rgb([255, 255, 255]));

    let bad = RemoteEraser::new(format!("http://{addr}/shrink"), Duration::from_secs(5)).unwrap();
    assert!(matches!(bad.erase(&img, &regions), Err(EraseError::DimensionChanged { .. })));
}
