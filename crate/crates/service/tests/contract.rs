mod common;

use std::io::Cursor;

use axum::http::{Method, StatusCode};
use common::{call, create, drive_to, json, phase_after, request, TARGET};
use tactile_service::{Endpoint, Phase};

#[tokio::test]
async fn every_endpoint_in_every_phase() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = common::app(dir.path());
    let phases = [Phase::Initializing, Phase::Optimizing, Phase::Saved, Phase::Abandoned];
    for (pi, phase) in phases.into_iter().enumerate() {
        for (ei, e) in Endpoint::ALL.into_iter().enumerate() {
            let id = drive_to(&app, phase, (pi * 16 + ei) as u64).await;
            let (method, tail, body) = request(e);
            let (status, bytes) = call(&app, method, &format!("/sessions/{id}/{tail}"), body).await;
            let (_, state) = json(&app, Method::GET, &format!("/sessions/{id}/state"), "").await;
            let now: Phase = serde_json::from_value(state["phase"].clone()).unwrap();
            if e.allowed_in(phase) {
                assert!(status.is_success(), "{e:?} in {phase:?}: {status} {}", String::from_utf8_lossy(&bytes));
                assert_eq!(now, phase_after(e, phase), "{e:?} from {phase:?}");
            } else {
                assert_eq!(status, StatusCode::CONFLICT, "{e:?} in {phase:?}");
                assert_eq!(now, phase, "rejected {e:?} changed the phase");
            }
        }
    }
}

#[tokio::test]
async fn initialization_flow() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = common::app(dir.path());
    let a = create(&app, 1).await;
    let b = create(&app, 1).await;
    assert_ne!(a, b);

    let (_, st) = json(&app, Method::GET, &format!("/sessions/{a}/state"), "").await;
    assert_eq!(st["iteration"], 0);
    assert_eq!(st["phase"], "Initializing");
    for key in ["phase", "iteration", "label", "magnitudes", "grid", "events"] {
        assert!(st.get(key).is_some(), "missing {key}");
    }
    let grid = st["grid"].as_array().unwrap();
    let cells = grid[0].as_u64().unwrap() * grid[1].as_u64().unwrap();
    assert_eq!(st["magnitudes"].as_array().unwrap().len() as u64, cells);

    let (s, v) = json(&app, Method::POST, &format!("/sessions/{a}/rate"), r#"{"rating":"soso"}"#).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["phase"], "Initializing");
    assert!(v["candidate"].is_object());
    let (s, v) = json(&app, Method::POST, &format!("/sessions/{a}/rate"), r#"{"rating":"good"}"#).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["phase"], "Optimizing");
    let (s, _) = json(&app, Method::POST, &format!("/sessions/{a}/rate"), r#"{"rating":"good"}"#).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = common::app(dir.path());
    let (s, _) = json(&app, Method::POST, "/sessions", r#"{"target_id":"nope"}"#).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = json(&app, Method::POST, "/sessions", &format!(r#"{{"target_id":"{TARGET}","latent_dim":3}}"#)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = json(&app, Method::POST, "/sessions", "{not json").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    for tail in ["state", "target.wav", "candidate.wav"] {
        assert_eq!(call(&app, Method::GET, &format!("/sessions/missing/{tail}"), "").await.0, StatusCode::NOT_FOUND);
    }
    assert_eq!(call(&app, Method::GET, "/artifacts/missing", "").await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, Method::GET, "/artifacts/..%2F..%2Fetc/audio.wav", "").await.0, StatusCode::NOT_FOUND);

    let id = create(&app, 2).await;
    let (s, _) = json(&app, Method::POST, &format!("/sessions/{id}/rate"), r#"{"rating":"meh"}"#).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    json(&app, Method::POST, &format!("/sessions/{id}/rate"), r#"{"rating":"good"}"#).await;
    for q in ["w=2", "w=-1.5", "w=abc", "w=NaN", ""] {
        let (s, _) = call(&app, Method::GET, &format!("/sessions/{id}/slider.wav?{q}"), "").await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{q}");
    }
    let (s, _) = json(&app, Method::POST, &format!("/sessions/{id}/commit"), r#"{"w":2.0}"#).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = json(&app, Method::POST, &format!("/sessions/{id}/commit"), r#"{"w":"x"}"#).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (_, st) = json(&app, Method::GET, &format!("/sessions/{id}/state"), "").await;
    assert_eq!(st["iteration"], 0);
}

fn parse_wav(bytes: &[u8]) -> (hound::WavSpec, usize) {
    let r = hound::WavReader::new(Cursor::new(bytes)).unwrap();
    (r.spec(), r.len() as usize)
}

#[tokio::test]
async fn wav_endpoints_are_valid_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (app, m) = common::app(dir.path());
    let id = create(&app, 3).await;
    let url = |p: &str| format!("/sessions/{id}/{p}");

    let (s, target) = call(&app, Method::GET, &url("target.wav"), "").await;
    assert_eq!(s, StatusCode::OK);
    let (spec, n) = parse_wav(&target);
    assert_eq!((spec.channels, spec.sample_rate), (1, 44_100));
    assert!(n > 0);

    let (_, c1) = call(&app, Method::GET, &url("candidate.wav"), "").await;
    let (_, c2) = call(&app, Method::GET, &url("candidate.wav"), "").await;
    assert_eq!(c1, c2);
    let (spec, n) = parse_wav(&c1);
    assert_eq!((spec.channels, spec.sample_rate), (1, 44_100));
    let stft = m.model().dataset.stft;
    let expect = stft.signal_len(m.model().segment_shape().1);
    assert_eq!(n, expect);

    json(&app, Method::POST, &url("rate"), r#"{"rating":"good"}"#).await;
    let (_, base) = call(&app, Method::GET, &url("candidate.wav"), "").await;
    let (_, w0) = call(&app, Method::GET, &url("slider.wav?w=0"), "").await;
    assert_eq!(base, w0);
    let (_, a) = call(&app, Method::GET, &url("slider.wav?w=0.3"), "").await;
    let (_, b) = call(&app, Method::GET, &url("slider.wav?w=0.3"), "").await;
    assert_eq!(a, b);
    assert_ne!(a, w0);

    // A zero commit keeps the base point.
    let (_, v) = json(&app, Method::POST, &url("commit"), r#"{"w":0}"#).await;
    assert_eq!(v["iteration"], 1);
    let (_, after) = call(&app, Method::GET, &url("slider.wav?w=0"), "").await;
    assert_eq!(after, w0);

    let (_, v) = json(&app, Method::POST, &url("commit"), r#"{"w":0.3}"#).await;
    assert_eq!(v["iteration"], 2);
    let (_, st) = json(&app, Method::GET, &url("state"), "").await;
    assert_eq!(st["iteration"], 2);
    assert_eq!(st["history"].as_array().unwrap().len(), 2);
    let (_, moved) = call(&app, Method::GET, &url("slider.wav?w=0"), "").await;
    assert_eq!(moved, a, "commit at 0.3 should land on the 0.3 preview");
}

#[tokio::test]
async fn save_restart_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (app, m) = common::app(dir.path());
    let id = create(&app, 4).await;
    let url = |p: &str| format!("/sessions/{id}/{p}");
    json(&app, Method::POST, &url("rate"), r#"{"rating":"good"}"#).await;
    json(&app, Method::POST, &url("commit"), r#"{"w":-0.4}"#).await;

    let (s, first) = json(&app, Method::POST, &url("save"), "").await;
    assert_eq!(s, StatusCode::OK);
    let (_, second) = json(&app, Method::POST, &url("save"), "{}").await;
    assert_ne!(first["artifact_id"], second["artifact_id"]);
    for v in [&first, &second] {
        let aid = v["artifact_id"].as_str().unwrap();
        let (s, meta) = json(&app, Method::GET, &format!("/artifacts/{aid}"), "").await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(meta["session_id"], id.as_str());
        assert_eq!(meta["iteration"], 1);
        let (s, audio) = call(&app, Method::GET, &format!("/artifacts/{aid}/audio.wav"), "").await;
        assert_eq!(s, StatusCode::OK);
        let artifact = m.artifact(aid).unwrap();
        assert_eq!(m.regenerate_artifact(&artifact).unwrap(), audio.to_vec());
        assert_eq!(parse_wav(&audio).0.sample_rate, 44_100);
    }

    let (s, v) = json(&app, Method::POST, &url("restart"), "").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["phase"], "Initializing");
    assert_eq!(v["iteration"], 0);
    let st = m.session(&id).unwrap();
    assert!(st.dss.is_none() && st.tabu.is_empty());
    assert_eq!(st.epoch, 1);
    assert_eq!(st.artifacts.len(), 2);
}
