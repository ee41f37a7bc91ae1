//! HTTP service over a loaded checkpoint and scene set.
//!
//! Units on the wire: positions in meters, covariances in m², entropies in
//! nats, horizons in seconds.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use haicu::batch::{examples_at, ObservationBatch};
use haicu::counterfactual::{
    apply_counterfactual, lipschitz_check, mean_mixture_entropy, probe_smoothness, lambda_grid, CounterfactualSpec,
    InterpolationPath, LipschitzReport, ProbePoint,
};
use haicu::dataset::io::scene_to_line;
use haicu::metrics::horizon_steps;
use haicu::model::{Haicu, TrajectoryDistribution};
use haicu::scene::{ClassProbVector, Scene};

pub const DEFAULT_MAX_HORIZON_S: f64 = 3.0;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("duplicate scene id {0}")]
    DuplicateScene(String),
}

struct Inner {
    model: Haicu,
    checkpoint_id: String,
    scenes: BTreeMap<String, Scene>,
    max_horizon_s: f64,
}

/// Read-only state shared by all handlers.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// `max_horizon_s` bounds the horizon a request may ask for.
    pub fn new(model: Haicu, checkpoint_id: impl Into<String>, scenes: Vec<Scene>, max_horizon_s: f64) -> Result<Self, ServiceError> {
        let mut map = BTreeMap::new();
        for s in scenes {
            let id = s.scene_id.clone();
            if map.insert(id.clone(), s).is_some() {
                return Err(ServiceError::DuplicateScene(id));
            }
        }
        Ok(AppState(Arc::new(Inner {
            model,
            checkpoint_id: checkpoint_id.into(),
            scenes: map,
            max_horizon_s,
        })))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    pub fn status(&self) -> StatusCode {
        self.status
    }

    pub fn message(&self) -> &str {
        &self.message
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for ApiError {}

impl From<haicu::Error> for ApiError {
    fn from(e: haicu::Error) -> Self {
        ApiError::unprocessable(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SceneSummary {
    pub scene_id: String,
    /// Seconds per timestep.
    pub dt: f64,
    pub class_names: Vec<String>,
    pub num_agents: usize,
    pub first_timestep: Option<i64>,
    pub last_timestep: Option<i64>,
    /// Whether the loaded model accepts this scene's classes.
    pub compatible: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictRequest {
    pub scene_id: String,
    pub timestep: i64,
    #[serde(default)]
    pub agent_ids: Option<Vec<String>>,
    pub horizon_s: f64,
    /// Echoed back so clients can discard stale responses.
    #[serde(default)]
    pub probe_id: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModeOut {
    pub weight: f64,
    pub head: usize,
    pub latent: usize,
    /// Mean positions per step, meters.
    pub means: Vec<[f64; 2]>,
    /// Position covariances per step, m².
    pub covariances: Vec<[[f64; 2]; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AgentPrediction {
    pub agent_id: String,
    /// Class probabilities at the prediction timestep.
    pub class_probs: Vec<f64>,
    pub modes: Vec<ModeOut>,
    pub most_likely: Vec<[f64; 2]>,
    /// Mean mixture differential entropy per step, nats.
    pub mean_entropy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictResponse {
    pub scene_id: String,
    pub timestep: i64,
    pub horizon_s: f64,
    pub steps: usize,
    pub agents: Vec<AgentPrediction>,
    #[serde(default)]
    pub probe_id: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WhatIfRequest {
    #[serde(flatten)]
    pub predict: PredictRequest,
    pub spec: CounterfactualSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub baseline: PredictResponse,
    pub counterfactual: PredictResponse,
    pub spec: CounterfactualSpec,
    #[serde(default)]
    pub probe_id: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRequest {
    pub scene_id: String,
    pub timestep: i64,
    pub agent_id: String,
    pub target_probs: Vec<f64>,
    pub n_lambdas: usize,
    pub horizon_s: f64,
    #[serde(default)]
    pub path: InterpolationPath,
    #[serde(default)]
    pub probe_id: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResponse {
    pub agent_id: String,
    pub points: Vec<ProbePoint>,
    pub lipschitz: LipschitzReport,
    #[serde(default)]
    pub probe_id: Option<u64>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/scenes", get(list_scenes))
        .route("/scenes/:id", get(get_scene))
        .route("/predict", post(predict))
        .route("/whatif", post(whatif))
        .route("/whatif/sweep", post(sweep))
        .layer(middleware::from_fn(access_log))
        .with_state(state)
}

pub async fn serve(state: AppState, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn access_log(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let start = Instant::now();
    let resp = next.run(req).await;
    log::info!(
        "method={method} path={path} status={} ms={:.1}",
        resp.status().as_u16(),
        start.elapsed().as_secs_f64() * 1e3
    );
    resp
}

async fn health(State(s): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        checkpoint_id: s.0.checkpoint_id.clone(),
    })
}

async fn list_scenes(State(s): State<AppState>) -> Json<Vec<SceneSummary>> {
    let names = &s.0.model.config.class_names;
    Json(
        s.0.scenes
            .values()
            .map(|sc| {
                let span = sc.time_span();
                SceneSummary {
                    scene_id: sc.scene_id.clone(),
                    dt: sc.dt,
                    class_names: sc.class_names.clone(),
                    num_agents: sc.tracks.len(),
                    first_timestep: span.map(|x| x.0),
                    last_timestep: span.map(|x| x.1),
                    compatible: &sc.class_names == names && (sc.dt - s.0.model.config.dt).abs() < 1e-9,
                }
            })
            .collect(),
    )
}

async fn get_scene(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let scene = scene(&s, &id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], scene_to_line(scene)).into_response())
}

fn scene<'a>(s: &'a AppState, id: &str) -> Result<&'a Scene, ApiError> {
    s.0.scenes
        .get(id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown scene {id}")))
}

/// Checks compatibility and horizon, and builds the batch.
fn prepare(model: &Haicu, sc: &Scene, timestep: i64, agent_ids: Option<&[String]>, horizon_s: f64, max_horizon_s: f64) -> Result<(ObservationBatch, usize), ApiError> {
    let cfg = &model.config;
    if sc.class_names != cfg.class_names {
        return Err(ApiError::unprocessable(format!(
            "scene classes {:?} do not match the checkpoint's {:?}",
            sc.class_names, cfg.class_names
        )));
    }
    if (sc.dt - cfg.dt).abs() > 1e-9 {
        return Err(ApiError::unprocessable(format!("scene dt {} differs from the checkpoint's {}", sc.dt, cfg.dt)));
    }
    if !(horizon_s > 0.0) || horizon_s > max_horizon_s + 1e-9 {
        return Err(ApiError::unprocessable(format!("horizon {horizon_s} s outside (0, {max_horizon_s}] s")));
    }
    let steps = horizon_steps(horizon_s, cfg.dt)?;
    let examples = examples_at(sc, timestep, agent_ids, &cfg.batch_config(0))?;
    if examples.is_empty() {
        return Err(ApiError::unprocessable(format!("no agents observed at timestep {timestep}")));
    }
    let batch = ObservationBatch::new(examples, cfg.num_classes(), cfg.history + 1, cfg.dt)?;
    Ok((batch, steps))
}

fn agent_prediction(d: &TrajectoryDistribution, class_probs: Vec<f64>) -> AgentPrediction {
    AgentPrediction {
        agent_id: d.agent_id.clone(),
        class_probs,
        modes: d
            .modes
            .iter()
            .map(|m| ModeOut {
                weight: m.weight,
                head: m.head,
                latent: m.latent,
                means: m.positions.iter().map(|g| g.mean).collect(),
                covariances: m.positions.iter().map(|g| g.cov).collect(),
            })
            .collect(),
        most_likely: d.most_likely(),
        mean_entropy: mean_mixture_entropy(d),
    }
}

fn run_predict(model: &Haicu, batch: &ObservationBatch, req: &PredictRequest, steps: usize) -> Result<PredictResponse, ApiError> {
    let dists = model.predict_distributions(batch, steps)?;
    Ok(PredictResponse {
        scene_id: req.scene_id.clone(),
        timestep: req.timestep,
        horizon_s: req.horizon_s,
        steps,
        agents: dists
            .iter()
            .zip(&batch.examples)
            .map(|(d, ex)| agent_prediction(d, ex.current_probs().to_vec()))
            .collect(),
        probe_id: req.probe_id,
    })
}

pub fn predict_payload(model: &Haicu, scene: &Scene, req: &PredictRequest, max_horizon_s: f64) -> Result<PredictResponse, ApiError> {
    let (batch, steps) = prepare(model, scene, req.timestep, req.agent_ids.as_deref(), req.horizon_s, max_horizon_s)?;
    run_predict(model, &batch, req, steps)
}

pub fn whatif_payload(model: &Haicu, scene: &Scene, req: &WhatIfRequest, max_horizon_s: f64) -> Result<WhatIfResponse, ApiError> {
    let p = &req.predict;
    let (batch, steps) = prepare(model, scene, p.timestep, p.agent_ids.as_deref(), p.horizon_s, max_horizon_s)?;
    let altered = apply_counterfactual(&batch, &req.spec)?;
    Ok(WhatIfResponse {
        baseline: run_predict(model, &batch, p, steps)?,
        counterfactual: run_predict(model, &altered, p, steps)?,
        spec: req.spec.clone(),
        probe_id: p.probe_id,
    })
}

pub fn sweep_payload(model: &Haicu, scene: &Scene, req: &SweepRequest, max_horizon_s: f64) -> Result<SweepResponse, ApiError> {
    if req.n_lambdas < 2 {
        return Err(ApiError::unprocessable("n_lambdas must be at least 2"));
    }
    let k = model.config.num_classes();
    if req.target_probs.len() != k {
        return Err(ApiError::unprocessable(format!(
            "target_probs has {} classes, checkpoint has {k}",
            req.target_probs.len()
        )));
    }
    let target = ClassProbVector::new(req.target_probs.clone()).map_err(ApiError::unprocessable)?;
    let agents = std::slice::from_ref(&req.agent_id);
    let (batch, steps) = prepare(model, scene, req.timestep, Some(agents), req.horizon_s, max_horizon_s)?;
    let grid = lambda_grid(req.n_lambdas);
    Ok(SweepResponse {
        agent_id: req.agent_id.clone(),
        points: probe_smoothness(model, &batch, &req.agent_id, &target, &grid, steps, req.path)?,
        lipschitz: lipschitz_check(model, &batch, &req.agent_id, &target, req.n_lambdas, steps, 1e-3, req.path)?,
        probe_id: req.probe_id,
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map(Json)
}

async fn predict(State(s): State<AppState>, Json(req): Json<PredictRequest>) -> ApiResult<PredictResponse> {
    blocking(move || predict_payload(&s.0.model, scene(&s, &req.scene_id)?, &req, s.0.max_horizon_s)).await
}

async fn whatif(State(s): State<AppState>, Json(req): Json<WhatIfRequest>) -> ApiResult<WhatIfResponse> {
    blocking(move || whatif_payload(&s.0.model, scene(&s, &req.predict.scene_id)?, &req, s.0.max_horizon_s)).await
}

async fn sweep(State(s): State<AppState>, Json(req): Json<SweepRequest>) -> ApiResult<SweepResponse> {
    blocking(move || sweep_payload(&s.0.model, scene(&s, &req.scene_id)?, &req, s.0.max_horizon_s)).await
}
