//! HTTP API for interactive span editing over a frozen model snapshot.
//!
//! All routes live under `/api/v1`. The model sits behind a lock that is held
//! only long enough to clone an `Arc`, so a checkpoint swap is atomic and
//! in-flight requests finish on the snapshot they started with.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

use iupac_infill::corruption::{MaskPlan, Span, Validity};
use iupac_infill::edit::{propose_edits, DecodeMode, MAX_CANDIDATES};
use iupac_infill::model::{load_checkpoint, ModelState, CHECKPOINT_VERSION};
use iupac_infill::property::{LookupOracle, PropertyOracle};
use iupac_infill::{proxy_property, Error as CoreError, PropertyBucket, PropertyKind, TokenId, Vocabulary, MAX_CONTENT_TOKENS};

/// Shared server state.
pub struct AppState {
    pub vocab: Vocabulary,
    model: RwLock<Option<Arc<ModelState>>>,
    /// Values for non-proxy properties, keyed by name.
    pub lookup: Option<LookupOracle>,
}

impl AppState {
    pub fn new(vocab: Vocabulary) -> Self {
        AppState {
            vocab,
            model: RwLock::new(None),
            lookup: None,
        }
    }

    pub fn with_lookup(mut self, lookup: LookupOracle) -> Self {
        self.lookup = Some(lookup);
        self
    }

    /// The current snapshot, if any.
    pub fn snapshot(&self) -> Option<Arc<ModelState>> {
        self.model.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Installs `model` after checking it against the vocabulary.
    pub fn swap(&self, model: ModelState) -> Result<(), CoreError> {
        model.check_compatible(&self.vocab, &model.property)?;
        *self.model.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(model));
        Ok(())
    }

    fn score(&self, kind: PropertyKind, name: &str, ids: &[TokenId]) -> Option<f64> {
        if kind == PropertyKind::Proxy {
            proxy_property(&self.vocab, ids).ok()
        } else {
            self.lookup.as_ref()?.evaluate(name, ids)
        }
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
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Parses a JSON body; any syntax or shape error is a 400.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed request body: {e}")))
}

fn tokenize_name(vocab: &Vocabulary, name: &str) -> Result<Vec<TokenId>, ApiError> {
    if name.trim().is_empty() {
        return Err(ApiError::unprocessable("name must not be empty"));
    }
    let ids = vocab.tokenize(name).map_err(|e| ApiError::unprocessable(e.to_string()))?.ids;
    if ids.len() > MAX_CONTENT_TOKENS {
        return Err(ApiError::unprocessable(format!("name has {} tokens; the limit is {MAX_CONTENT_TOKENS}", ids.len())));
    }
    Ok(ids)
}

#[derive(Debug, Deserialize)]
struct TokenizeRequest {
    name: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct TokenView {
    pub index: usize,
    pub surface: String,
    pub class: String,
    /// The token is `<unk>`: no vocabulary entry matched here.
    pub unknown: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TokenizeResponse {
    pub tokens: Vec<TokenView>,
}

async fn tokenize(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<TokenizeResponse> {
    let req: TokenizeRequest = parse_body(&body)?;
    let ids = tokenize_name(&state.vocab, &req.name)?;
    let tokens = ids
        .iter()
        .enumerate()
        .map(|(index, &id)| TokenView {
            index,
            surface: state.vocab.surface(id).to_string(),
            class: state.vocab.class(id).label().to_string(),
            unknown: id == state.vocab.unk(),
        })
        .collect();
    Ok(Json(TokenizeResponse { tokens }))
}

#[derive(Debug, Clone, Copy, Deserialize)]
struct SpanRequest {
    start: usize,
    length: usize,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "mode", rename_all = "camelCase", deny_unknown_fields)]
enum DecodeRequest {
    Greedy,
    #[serde(rename_all = "camelCase")]
    Sample {
        temperature: f64,
        k: usize,
        seed: Option<u64>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct InfillRequest {
    name: String,
    spans: Vec<SpanRequest>,
    target_bucket: String,
    #[serde(default)]
    decode: Option<DecodeRequest>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "camelCase")]
pub struct CandidateView {
    /// Absent when the sentinels did not line up.
    pub name: Option<String>,
    pub fragments: Vec<Vec<String>>,
    pub validity: Validity,
    pub property_before: Option<f64>,
    pub property_after: Option<f64>,
    pub bucket_after: Option<PropertyBucket>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "camelCase")]
pub struct InfillResponse {
    pub candidates: Vec<CandidateView>,
}

async fn infill(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<InfillResponse> {
    let req: InfillRequest = parse_body(&body)?;
    let model = state
        .snapshot()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no checkpoint is loaded"))?;
    let target: PropertyBucket = req.target_bucket.parse().map_err(|_| {
        ApiError::unprocessable(format!("unknown target bucket {:?}; expected low, med or high", req.target_bucket))
    })?;
    let ids = tokenize_name(&state.vocab, &req.name)?;
    if req.spans.is_empty() {
        return Err(ApiError::unprocessable("at least one span is required"));
    }
    let plan = MaskPlan {
        spans: req.spans.iter().map(|s| Span::new(s.start, s.length)).collect(),
    };
    plan.validate(ids.len()).map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let decode = match req.decode.unwrap_or(DecodeRequest::Greedy) {
        DecodeRequest::Greedy => DecodeMode::Greedy,
        DecodeRequest::Sample { temperature, k, seed } => {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(ApiError::unprocessable("temperature must be positive"));
            }
            if k == 0 || k > MAX_CANDIDATES {
                return Err(ApiError::unprocessable(format!("k must be in 1..={MAX_CANDIDATES}")));
            }
            let seed = seed.unwrap_or_else(|| rand_seed(&body));
            DecodeMode::Sample { temperature, k, seed }
        }
    };

    let worker = state.clone();
    let response = tokio::task::spawn_blocking(move || -> Result<InfillResponse, ApiError> {
        let kind = model.property.kind;
        let score = |name: &str, ids: &[TokenId]| worker.score(kind, name, ids);
        let before = score(&req.name, &ids);
        let candidates = propose_edits(&model, &worker.vocab, &ids, &plan, target, decode, &score)
            .map_err(|e| ApiError::unprocessable(e.to_string()))?;
        let vocab = &worker.vocab;
        Ok(InfillResponse {
            candidates: candidates
                .into_iter()
                .map(|c| CandidateView {
                    name: c.result.candidate_name.clone(),
                    fragments: c
                        .result
                        .fragments
                        .iter()
                        .flatten()
                        .map(|f| vocab.surfaces(f).map(str::to_string).collect())
                        .collect(),
                    validity: c.result.validity,
                    property_before: before,
                    property_after: c.property_after,
                    bucket_after: c.bucket_after,
                })
                .collect(),
        })
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("inference task failed: {e}")))??;
    Ok(Json(response))
}

/// Seed for unseeded sampling requests, drawn from randomly keyed hashing.
fn rand_seed(body: &[u8]) -> u64 {
    use std::hash::{BuildHasher, RandomState};
    RandomState::new().hash_one(body)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct VocabSummary {
    pub version: String,
    pub size: usize,
    pub content_size: usize,
    pub class_counts: std::collections::BTreeMap<String, usize>,
}

async fn vocab(State(state): State<Arc<AppState>>) -> Json<VocabSummary> {
    let v = &state.vocab;
    Json(VocabSummary {
        version: v.version().to_string(),
        size: v.len(),
        content_size: v.content_len(),
        class_counts: v.class_counts().into_iter().map(|(c, n)| (c.label().to_string(), n)).collect(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Health {
    pub status: String,
    pub checkpoint_version: Option<u32>,
    pub step: Option<u64>,
    pub property: Option<String>,
    pub vocab_version: String,
}

fn health_of(state: &AppState) -> Health {
    let model = state.snapshot();
    Health {
        status: "ok".into(),
        checkpoint_version: model.as_ref().map(|_| CHECKPOINT_VERSION),
        step: model.as_ref().map(|m| m.step),
        property: model.as_ref().map(|m| m.property.kind.as_str().to_string()),
        vocab_version: state.vocab.version().to_string(),
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(health_of(&state))
}

#[derive(Debug, Deserialize)]
struct CheckpointRequest {
    path: PathBuf,
}

/// Loads a checkpoint from the server's filesystem and swaps it in.
async fn swap_checkpoint(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Health> {
    let req: CheckpointRequest = parse_body(&body)?;
    let worker = state.clone();
    tokio::task::spawn_blocking(move || {
        let model = load_checkpoint(&req.path).map_err(|e| match e {
            CoreError::Io { ref source, .. } => ApiError::new(StatusCode::NOT_FOUND, format!("{e}: {source}")),
            other => ApiError::unprocessable(other.to_string()),
        })?;
        worker.swap(model).map_err(|e| ApiError::unprocessable(e.to_string()))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("checkpoint task failed: {e}")))??;
    Ok(Json(health_of(&state)))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no such route")
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/tokenize", post(tokenize))
        .route("/infill", post(infill))
        .route("/vocab", get(vocab))
        .route("/health", get(health))
        .route("/checkpoint", post(swap_checkpoint));
    Router::new()
        .nest("/api/v1", api)
        .fallback(not_found)
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
