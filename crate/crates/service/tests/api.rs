use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use haicu::dataset::{GeneratorSpec, PerceptionNoiseModel};
use haicu::model::{Haicu, ModelConfig, Variant};
use haicu_service::{router, AppState, PredictResponse, SweepResponse, WhatIfResponse};

fn state() -> AppState {
    let spec = GeneratorSpec::confusable_classes(3);
    let mut scenes = spec.generate(5).unwrap();
    let mut other = GeneratorSpec {
        noise: PerceptionNoiseModel::identity(3),
        ..spec.clone()
    };
    other.generator.classes[2].name = "truck".into();
    other.generator.scene_prefix = "other".into();
    other.generator.num_scenes = 1;
    scenes.extend(other.generate(5).unwrap());
    let cfg = ModelConfig {
        history: 4,
        horizon: 5,
        node_hidden: 8,
        edge_hidden: 4,
        future_hidden: 4,
        decoder_hidden: 8,
        latent: 3,
        ..ModelConfig::new(spec.generator.class_names(), Variant::FullProbs)
    };
    AppState::new(Haicu::new(cfg, 1).unwrap(), "test-ckpt", scenes, 3.0).unwrap()
}

async fn call(method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(state()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

/// A timestep of the first scene with at least one agent present.
async fn busy_timestep() -> (String, i64) {
    let (_, scene) = call("GET", "/scenes/synthetic-00000", None).await;
    let t = scene["agents"][0]["steps"][10]["t"].as_i64().unwrap();
    ("synthetic-00000".into(), t)
}

#[tokio::test]
async fn health_reports_checkpoint() {
    let (status, body) = call("GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({"status": "ok", "checkpoint_id": "test-ckpt"}));
}

#[tokio::test]
async fn scenes_are_listed_and_served_in_dataset_format() {
    let (status, list) = call("GET", "/scenes", None).await;
    assert_eq!(status, StatusCode::OK);
    let list = list.as_array().unwrap();
    assert_eq!(list.len(), 4);
    assert_eq!(list.iter().filter(|s| s["compatible"] == json!(false)).count(), 1);
    let (status, scene) = call("GET", "/scenes/synthetic-00001", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(scene["scene_id"], "synthetic-00001");
    assert!(scene["agents"][0]["steps"][0]["probs"].is_array());
    let (status, body) = call("GET", "/scenes/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].as_str().unwrap().contains("nope"));
}

#[tokio::test]
async fn predict_returns_normalized_psd_mixtures() {
    let (scene, t) = busy_timestep().await;
    let req = json!({"scene_id": scene, "timestep": t, "horizon_s": 1.5, "probe_id": 7});
    let (status, body) = call("POST", "/predict", Some(req.clone())).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let resp: PredictResponse = serde_json::from_value(body.clone()).unwrap();
    assert_eq!(resp.steps, 15);
    assert_eq!(resp.probe_id, Some(7));
    assert!(!resp.agents.is_empty());
    for a in &resp.agents {
        let total: f64 = a.modes.iter().map(|m| m.weight).sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert_eq!(a.most_likely.len(), 15);
        for m in &a.modes {
            for c in &m.covariances {
                assert_eq!(c[0][1], c[1][0]);
                assert!(c[0][0] > 0.0 && c[0][0] * c[1][1] - c[0][1] * c[1][0] > 0.0);
            }
        }
    }
    let (_, again) = call("POST", "/predict", Some(req)).await;
    assert_eq!(again, body);
}

#[tokio::test]
async fn predict_rejects_bad_requests() {
    let (scene, t) = busy_timestep().await;
    let cases = [
        (json!({"scene_id": "nope", "timestep": t, "horizon_s": 1.0}), StatusCode::NOT_FOUND),
        (json!({"scene_id": scene, "timestep": t, "horizon_s": 4.0}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"scene_id": scene, "timestep": t, "horizon_s": 0.25}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"scene_id": "other-00000", "timestep": t, "horizon_s": 1.0}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"scene_id": scene, "timestep": t, "agent_ids": ["ghost"], "horizon_s": 1.0}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"scene_id": scene, "timestep": 100000, "horizon_s": 1.0}), StatusCode::UNPROCESSABLE_ENTITY),
    ];
    for (req, expected) in cases {
        let (status, body) = call("POST", "/predict", Some(req.clone())).await;
        assert_eq!(status, expected, "{req} -> {body}");
        assert!(body["error"].is_string());
    }
}

#[tokio::test]
async fn whatif_keep_matches_baseline_and_uniform_changes_it() {
    let (scene, t) = busy_timestep().await;
    let keep = json!({"scene_id": scene, "timestep": t, "horizon_s": 1.0, "spec": {"all": {"mode": "keep"}}});
    let (status, body) = call("POST", "/whatif", Some(keep)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let resp: WhatIfResponse = serde_json::from_value(body).unwrap();
    assert_eq!(resp.baseline, resp.counterfactual);

    let uniform = json!({"scene_id": scene, "timestep": t, "horizon_s": 1.0, "spec": {"all": {"mode": "uniform"}}});
    let (_, body) = call("POST", "/whatif", Some(uniform)).await;
    let resp: WhatIfResponse = serde_json::from_value(body).unwrap();
    assert_ne!(resp.baseline, resp.counterfactual);
    for a in &resp.counterfactual.agents {
        assert!(a.class_probs.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));
    }

    let ghost = json!({"scene_id": scene, "timestep": t, "horizon_s": 1.0,
        "spec": {"agents": [{"agent_id": "ghost", "mode": "uniform"}]}});
    let (status, _) = call("POST", "/whatif", Some(ghost)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn sweep_returns_a_curve_from_zero() {
    let (scene, t) = busy_timestep().await;
    let (_, pred) = call("POST", "/predict", Some(json!({"scene_id": scene, "timestep": t, "horizon_s": 1.0}))).await;
    let agent = pred["agents"][0]["agent_id"].as_str().unwrap().to_string();
    let req = json!({"scene_id": scene, "timestep": t, "agent_id": agent, "target_probs": [0.0, 1.0, 0.0],
        "n_lambdas": 11, "horizon_s": 1.0, "probe_id": 3});
    let (status, body) = call("POST", "/whatif/sweep", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let resp: SweepResponse = serde_json::from_value(body).unwrap();
    assert_eq!(resp.points.len(), 11);
    assert_eq!(resp.points[0].divergence, 0.0);
    assert_eq!(resp.points[10].lambda, 1.0);
    assert_eq!(resp.probe_id, Some(3));

    let bad = json!({"scene_id": scene, "timestep": t, "agent_id": agent, "target_probs": [0.5, 0.5],
        "n_lambdas": 11, "horizon_s": 1.0});
    let (status, _) = call("POST", "/whatif/sweep", Some(bad)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_requests_agree() {
    let (scene, t) = busy_timestep().await;
    let app = router(state());
    let req = json!({"scene_id": scene, "timestep": t, "horizon_s": 2.0}).to_string();
    let handles: Vec<_> = (0..6)
        .map(|_| {
            let app = app.clone();
            let req = req.clone();
            tokio::spawn(async move {
                let r = Request::post("/predict").header("content-type", "application/json").body(Body::from(req)).unwrap();
                let resp = app.oneshot(r).await.unwrap();
                resp.into_body().collect().await.unwrap().to_bytes()
            })
        })
        .collect();
    let mut bodies = Vec::new();
    for h in handles {
        bodies.push(h.await.unwrap());
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}
