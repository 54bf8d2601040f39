//! JSON-over-HTTP front end. Images travel as base64-encoded PNGs.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::{STANDARD, URL_SAFE, URL_SAFE_NO_PAD};
use base64::Engine;
use serde::Serialize;
use serde_json::{json, Value};

use super::pipeline::{check_delta, quantize_weights, retouch, Mode, MAX_DELTA};
use crate::attributes::{attribute_vector, ATTRIBUTE_NAMES, NUM_ATTRIBUTES, NUM_LEVELS};
use crate::error::Error;
use crate::image::{decode_png, encode_gray8_png, encode_png, Image};
use crate::model::RetouchModel;
use crate::style::AtpModel;

/// Environment variable holding the listen port.
pub const PORT_ENV: &str = "CAATP_PORT";
pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Limits {
    /// Largest accepted request body.
    pub max_body_bytes: usize,
    /// Largest accepted image area.
    pub max_pixels: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_body_bytes: 8 << 20,
            max_pixels: 1 << 20,
        }
    }
}

/// Immutable snapshot shared by every request.
pub struct AppState {
    pub model: RetouchModel,
    pub atp: Option<AtpModel>,
    pub limits: Limits,
    errors: AtomicU64,
}

impl AppState {
    pub fn new(model: RetouchModel, atp: Option<AtpModel>, limits: Limits) -> Self {
        Self {
            model,
            atp,
            limits,
            errors: AtomicU64::new(0),
        }
    }
}

#[derive(Debug)]
enum ApiError {
    BadField { field: &'static str, message: String },
    TooLarge(String),
    Internal(String),
}

fn bad(field: &'static str, message: impl Into<String>) -> ApiError {
    ApiError::BadField {
        field,
        message: message.into(),
    }
}

impl ApiError {
    fn into_response(self, state: &AppState) -> Response {
        match self {
            ApiError::BadField { field, message } => (
                StatusCode::BAD_REQUEST,
                Json(json!({ "error": "bad_request", "field": field, "message": message })),
            )
                .into_response(),
            ApiError::TooLarge(message) => (
                StatusCode::PAYLOAD_TOO_LARGE,
                Json(json!({ "error": "payload_too_large", "message": message })),
            )
                .into_response(),
            ApiError::Internal(detail) => {
                let n = state.errors.fetch_add(1, Ordering::Relaxed);
                let id = format!("err-{:08x}-{n}", std::process::id());
                eprintln!("{id}: {detail}");
                (
                    StatusCode::INTERNAL_SERVER_ERROR,
                    Json(json!({ "error": "internal", "id": id })),
                )
                    .into_response()
            }
        }
    }
}

fn decode_image_field(field: &'static str, text: &str, limits: &Limits) -> Result<Image, ApiError> {
    // Query strings turn '+' into ' '.
    let cleaned: String = text.trim().replace(' ', "+");
    let bytes = STANDARD
        .decode(&cleaned)
        .or_else(|_| URL_SAFE.decode(&cleaned))
        .or_else(|_| URL_SAFE_NO_PAD.decode(&cleaned))
        .map_err(|e| bad(field, format!("not valid base64: {e}")))?;
    let img = decode_png(&bytes).map_err(|e| bad(field, format!("not a readable 8-bit PNG: {e}")))?;
    if img.pixel_count() > limits.max_pixels {
        return Err(ApiError::TooLarge(format!(
            "{field}: {}x{} exceeds the limit of {} pixels",
            img.height(),
            img.width(),
            limits.max_pixels
        )));
    }
    Ok(img)
}

struct RetouchRequest {
    image: Image,
    mode: Mode,
    return_weights: bool,
}

fn parse_request(body: &[u8], state: &AppState) -> Result<RetouchRequest, ApiError> {
    let value: Value = serde_json::from_slice(body).map_err(|e| bad("body", format!("invalid JSON: {e}")))?;
    let obj = value.as_object().ok_or_else(|| bad("body", "expected a JSON object"))?;
    for key in obj.keys() {
        if !["image", "mode", "delta", "return_weights"].contains(&key.as_str()) {
            return Err(bad("body", format!("unknown field {key:?}")));
        }
    }
    let image = match obj.get("image") {
        Some(Value::String(s)) => decode_image_field("image", s, &state.limits)?,
        Some(_) => return Err(bad("image", "expected a base64 string")),
        None => return Err(bad("image", "missing")),
    };
    let delta = match obj.get("delta") {
        None | Some(Value::Null) => None,
        Some(Value::Array(items)) => {
            if items.len() != NUM_ATTRIBUTES {
                return Err(bad("delta", format!("expected {NUM_ATTRIBUTES} numbers, got {}", items.len())));
            }
            let mut d = [0.0; NUM_ATTRIBUTES];
            for (i, item) in items.iter().enumerate() {
                d[i] = item.as_f64().ok_or_else(|| bad("delta", format!("element {i} is not a number")))?;
            }
            check_delta(&d).map_err(|_| bad("delta", format!("components must lie in [-{MAX_DELTA}, {MAX_DELTA}]")))?;
            Some(d)
        }
        Some(_) => return Err(bad("delta", "expected an array of numbers")),
    };
    let mode = match obj.get("mode").map(|m| m.as_str()) {
        None | Some(Some("manual")) => Mode::Manual(delta.ok_or_else(|| bad("delta", "required in manual mode"))?),
        Some(Some("auto")) => {
            if state.atp.is_none() {
                return Err(bad("mode", "auto mode unavailable: missing artifact: attribute predictor checkpoint"));
            }
            Mode::Auto
        }
        _ => return Err(bad("mode", "expected \"auto\" or \"manual\"")),
    };
    let return_weights = match obj.get("return_weights") {
        None | Some(Value::Null) => false,
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err(bad("return_weights", "expected a boolean")),
    };
    Ok(RetouchRequest {
        image,
        mode,
        return_weights,
    })
}

fn retouch_response(state: &AppState, req: RetouchRequest) -> Result<Value, ApiError> {
    let r = retouch(&state.model, state.atp.as_ref(), &req.image, &req.mode).map_err(|e| match e {
        Error::Image(e) => bad("image", e.to_string()),
        other => ApiError::Internal(other.to_string()),
    })?;
    let mut out = json!({
        "image": STANDARD.encode(encode_png(&r.image)),
        "text": r.text,
        "delta": r.delta,
        "attributes_in": r.attributes_in,
        "predicted_target": r.predicted_target,
    });
    if req.return_weights {
        let (h, w) = (r.image.height(), r.image.width());
        let maps: Vec<String> = quantize_weights(&r.weights, r.n)
            .iter()
            .map(|plane| STANDARD.encode(encode_gray8_png(h, w, plane)))
            .collect();
        out["weight_maps"] = json!(maps);
    }
    Ok(out)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))
}

async fn post_retouch(State(state): State<Arc<AppState>>, body: Result<Bytes, BytesRejection>) -> Response {
    let body = match body {
        Ok(b) => b,
        Err(rejection) if rejection.status() == StatusCode::PAYLOAD_TOO_LARGE => {
            return ApiError::TooLarge(format!("body exceeds {} bytes", state.limits.max_body_bytes)).into_response(&state)
        }
        Err(rejection) => return bad("body", rejection.body_text()).into_response(&state),
    };
    let s = state.clone();
    let result = blocking(move || parse_request(&body, &s).and_then(|req| retouch_response(&s, req))).await;
    match result.and_then(|r| r) {
        Ok(v) => Json(v).into_response(),
        Err(e) => e.into_response(&state),
    }
}

async fn get_attributes(State(state): State<Arc<AppState>>, Query(q): Query<HashMap<String, String>>) -> Response {
    let Some(image) = q.get("image").cloned() else {
        return bad("image", "missing query parameter").into_response(&state);
    };
    let s = state.clone();
    let result = blocking(move || decode_image_field("image", &image, &s.limits).map(|img| attribute_vector(&img).to_json())).await;
    match result.and_then(|r| r) {
        Ok(v) => Json(v).into_response(),
        Err(e) => e.into_response(&state),
    }
}

async fn get_health(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "status": "ok", "model_config": state.model.config() }))
}

async fn get_config(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({
        "model_config": state.model.config(),
        "atp_loaded": state.atp.is_some(),
        "limits": state.limits,
        "max_delta": MAX_DELTA,
        "attributes": ATTRIBUTE_NAMES,
        "levels": NUM_LEVELS,
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.limits.max_body_bytes;
    Router::new()
        .route("/retouch", post(post_retouch))
        .route("/attributes", get(get_attributes))
        .route("/health", get(get_health))
        .route("/config", get(get_config))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await
}
