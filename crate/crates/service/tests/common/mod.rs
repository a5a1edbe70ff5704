#![allow(dead_code)]

use std::path::Path;
use std::sync::{Arc, OnceLock};

use axum::body::{Body, Bytes};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use tactile::corpus::{self, DatasetConfig};
use tactile::init::LatentIndex;
use tactile::model::{ModelConfig, TextureGan};
use tactile_service::{Endpoint, Phase, ServiceConfig, SessionManager, Targets};
use tower::ServiceExt;

pub struct Fixture {
    pub model: TextureGan,
    pub index: LatentIndex,
    pub targets: Targets,
}

/// Untrained toy-shaped model; the contract does not depend on training.
pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = DatasetConfig::toy();
        let data = corpus::synth_dataset(&corpus::toy_profile(), 1, 3.0, 1, &cfg).unwrap();
        let model = TextureGan::for_dataset(ModelConfig::toy(5), &data).unwrap();
        let idx: Vec<usize> = (0..data.len()).step_by(5).collect();
        let index = LatentIndex::from_model(&model, &data, &idx).unwrap();
        let waves = corpus::toy_targets()
            .iter()
            .take(2)
            .enumerate()
            .map(|(k, spec)| (spec.name.clone(), Some(spec.name.clone()), corpus::synth_texture(spec, 100 + k as u64, 3.0).unwrap()))
            .collect::<Vec<_>>();
        let targets = Targets::from_waveforms(&model, waves).unwrap();
        Fixture { model, index, targets }
    })
}

pub const TARGET: &str = "t-mid-subtle";

pub fn manager(dir: &Path, snapshot_every: usize) -> SessionManager {
    let f = fixture();
    let cfg = ServiceConfig {
        data_dir: dir.to_path_buf(),
        preview_iterations: 4,
        save_iterations: 8,
        snapshot_every,
        index_pairs: 200,
        ..ServiceConfig::default()
    };
    SessionManager::new(f.model.clone(), f.index.clone(), f.targets.clone(), cfg).unwrap()
}

pub fn app(dir: &Path) -> (Router, Arc<SessionManager>) {
    let m = Arc::new(manager(dir, 4));
    (tactile_service::router(m.clone()), m)
}

pub async fn call(app: &Router, method: Method, uri: &str, body: &str) -> (StatusCode, Bytes) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_owned()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes())
}

pub async fn json(app: &Router, method: Method, uri: &str, body: &str) -> (StatusCode, serde_json::Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(serde_json::Value::Null))
}

pub async fn create(app: &Router, seed: u64) -> String {
    let (s, v) = json(app, Method::POST, "/sessions", &format!(r#"{{"target_id":"{TARGET}","seed":{seed}}}"#)).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_owned()
}

pub async fn drive_to(app: &Router, phase: Phase, seed: u64) -> String {
    let id = create(app, seed).await;
    let path = |p: &str| format!("/sessions/{id}/{p}");
    match phase {
        Phase::Initializing => {}
        Phase::Optimizing => {
            assert_eq!(json(app, Method::POST, &path("rate"), r#"{"rating":"good"}"#).await.0, StatusCode::OK);
        }
        Phase::Saved => {
            assert_eq!(json(app, Method::POST, &path("rate"), r#"{"rating":"good"}"#).await.0, StatusCode::OK);
            assert_eq!(json(app, Method::POST, &path("save"), r#"{"finish":true}"#).await.0, StatusCode::OK);
        }
        Phase::Abandoned => {
            assert_eq!(json(app, Method::POST, &path("abandon"), "").await.0, StatusCode::OK);
        }
    }
    id
}

pub fn request(e: Endpoint) -> (Method, &'static str, &'static str) {
    match e {
        Endpoint::State => (Method::GET, "state", ""),
        Endpoint::TargetWav => (Method::GET, "target.wav", ""),
        Endpoint::CandidateWav => (Method::GET, "candidate.wav", ""),
        Endpoint::Rate => (Method::POST, "rate", r#"{"rating":"soso"}"#),
        Endpoint::SliderWav => (Method::GET, "slider.wav?w=0.3", ""),
        Endpoint::Commit => (Method::POST, "commit", r#"{"w":0.25}"#),
        Endpoint::Save => (Method::POST, "save", ""),
        Endpoint::Restart => (Method::POST, "restart", ""),
        Endpoint::Abandon => (Method::POST, "abandon", ""),
    }
}

pub fn phase_after(e: Endpoint, from: Phase) -> Phase {
    match e {
        Endpoint::Restart => Phase::Initializing,
        Endpoint::Abandon => Phase::Abandoned,
        _ => from,
    }
}
