//! HTTP decomposition and modulation endpoint.
//!
//! `POST /modulate` takes `{"image": {"pgm": <base64>} | {"data": [..],
//! "height": h, "width": w}, "alphas": {"alpha_b", "alpha_l", "alpha_o"},
//! "return_maps": bool}` and answers with base64 16-bit PGMs. `GET /health`
//! reports the loaded model. Both answer 503 until the checkpoint is loaded.

use std::future::IntoFuture;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use xdec_core::decgan::{ComponentWeights, DecGan};
use xdec_core::drr::{Domain, Image2D};

use crate::checkpoint::{model_id, Checkpoint};
use crate::infer::decompose;
use crate::io::{decode_pgm, encode_pgm};

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_CONCURRENCY: usize = 4;

/// Inference-only view of a checkpoint.
#[derive(Debug)]
pub struct Model {
    pub nets: DecGan<f32>,
    pub size: usize,
    pub model_id: String,
}

impl Model {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = Checkpoint::from_bytes(bytes)?;
        Ok(Self {
            size: ck.trainer.config.image_size,
            nets: ck.trainer.nets,
            model_id: model_id(bytes),
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))
    }
}

#[derive(Clone)]
pub struct AppState {
    model: Arc<OnceLock<Arc<Model>>>,
    permits: Arc<Semaphore>,
    started: Instant,
}

impl AppState {
    pub fn new(concurrency: usize) -> Self {
        Self {
            model: Arc::new(OnceLock::new()),
            permits: Arc::new(Semaphore::new(concurrency)),
            started: Instant::now(),
        }
    }

    pub fn with_model(model: Model, concurrency: usize) -> Self {
        let s = Self::new(concurrency);
        s.install(model);
        s
    }

    /// Publishes the model; later calls are ignored.
    pub fn install(&self, model: Model) {
        let _ = self.model.set(Arc::new(model));
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageInput {
    pub pgm: Option<String>,
    pub data: Option<Vec<f32>>,
    pub height: Option<usize>,
    pub width: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModulateRequest {
    pub image: ImageInput,
    pub alphas: ComponentWeights,
    #[serde(default)]
    pub return_maps: bool,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ModulateResponse {
    pub x_m: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_bone: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_lung: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_other: Option<String>,
    pub model_id: String,
    pub timing_ms: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Health {
    pub model_id: String,
    pub size: usize,
    pub uptime_s: f64,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": msg.into() }))).into_response()
}

fn not_ready() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "model not loaded")
}

fn parse_image(input: ImageInput, size: usize) -> Result<Image2D, String> {
    let img = match (input.pgm, input.data) {
        (Some(p), None) => {
            if input.height.is_some() || input.width.is_some() {
                return Err("image: height/width apply only to raw data".into());
            }
            let bytes = B64
                .decode(p.as_bytes())
                .map_err(|e| format!("image.pgm: invalid base64: {e}"))?;
            decode_pgm(&bytes).map_err(|e| format!("image.pgm: {e:#}"))?
        }
        (None, Some(data)) => {
            let (h, w) = match (input.height, input.width) {
                (Some(h), Some(w)) => (h, w),
                _ => return Err("image: raw data needs height and width".into()),
            };
            if data.len() != h * w {
                return Err(format!("image.data: {} values for {h}×{w}", data.len()));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err("image.data: values must be finite".into());
            }
            Image2D::new(h, w, data, Domain::Display).map_err(|e| format!("image: {e}"))?
        }
        _ => return Err("image: give exactly one of `pgm` or `data`".into()),
    };
    if img.dims() != (size, size) {
        return Err(format!(
            "image: expected {size}×{size}, got {}×{}",
            img.height, img.width
        ));
    }
    Ok(img)
}

fn encode(img: &Image2D) -> String {
    B64.encode(encode_pgm(img))
}

async fn modulate(State(state): State<AppState>, body: Bytes) -> Response {
    let Some(model) = state.model.get().cloned() else {
        return not_ready();
    };
    let Ok(permit) = state.permits.clone().try_acquire_owned() else {
        return error(StatusCode::TOO_MANY_REQUESTS, "too many concurrent requests");
    };
    let req: ModulateRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    if let Err(e) = req.alphas.validate() {
        return error(StatusCode::BAD_REQUEST, format!("alphas: {e}"));
    }
    let img = match parse_image(req.image, model.size) {
        Ok(i) => i,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let t = Instant::now();
    let w = req.alphas;
    let res = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        decompose(&model.nets, model.size, &img, w).map(|d| (d, model))
    })
    .await;
    let (d, model) = match res {
        Ok(Ok(v)) => v,
        Ok(Err(e)) => return error(StatusCode::INTERNAL_SERVER_ERROR, format!("{e:#}")),
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    let maps = req.return_maps.then(|| d.maps.each_ref().map(encode));
    let [z_bone, z_lung, z_other] = match maps {
        Some([b, l, o]) => [Some(b), Some(l), Some(o)],
        None => [None, None, None],
    };
    Json(ModulateResponse {
        x_m: encode(&d.x_m),
        z_bone,
        z_lung,
        z_other,
        model_id: model.model_id.clone(),
        timing_ms: t.elapsed().as_secs_f64() * 1e3,
    })
    .into_response()
}

async fn health(State(state): State<AppState>) -> Response {
    match state.model.get() {
        None => not_ready(),
        Some(m) => Json(Health {
            model_id: m.model_id.clone(),
            size: m.size,
            uptime_s: state.started.elapsed().as_secs_f64(),
        })
        .into_response(),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/modulate", post(modulate))
        .route("/health", get(health))
        .with_state(state)
}

/// Binds the port, loads the checkpoint in the background and serves until
/// interrupted.
pub async fn serve(checkpoint: PathBuf, port: u16) -> Result<()> {
    let state = AppState::new(DEFAULT_CONCURRENCY);
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port))
        .await
        .with_context(|| format!("binding port {port}"))?;
    eprintln!("listening on {}", listener.local_addr()?);
    let loader = {
        let state = state.clone();
        tokio::task::spawn_blocking(move || -> Result<()> {
            let model = Model::load(&checkpoint)?;
            eprintln!("loaded model {}", model.model_id);
            state.install(model);
            Ok(())
        })
    };
    let server = axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .into_future();
    tokio::pin!(server);
    tokio::select! {
        r = &mut server => return Ok(r?),
        r = loader => r??,
    }
    Ok(server.await?)
}
