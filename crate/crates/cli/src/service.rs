//! HTTP/JSON inference service over one immutable model snapshot.
//!
//! Images travel as base64 PNG. Every non-2xx response body is a single
//! [`ApiError`].

use std::collections::BTreeMap;
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use shapegene::image::{FaceImage, Image};
use shapegene::labelspace::{self, LabelMap, Palette, Part};
use shapegene::pipeline::{FaceModel, Remix};
use shapegene::synthgen::{DatasetManifest, Split};
use shapegene::{Error, Result};
use tokio::sync::Semaphore;

/// Largest interpolation strip served in one request.
pub const MAX_STEPS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_bind")]
    pub bind: SocketAddr,
    /// Overall or cyclic checkpoint.
    pub checkpoint: PathBuf,
    /// Dataset manifest backing the gallery.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Largest accepted image edge; defaults to the trained resolution.
    #[serde(default)]
    pub max_edge: Option<usize>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    /// Requests running inference at once; more are turned away with 503.
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_bind() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

fn default_timeout() -> f64 {
    30.0
}

fn default_in_flight() -> usize {
    4
}

impl ServiceConfig {
    pub fn new(checkpoint: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            bind: default_bind(),
            checkpoint: checkpoint.into(),
            manifest: None,
            max_edge: None,
            timeout_secs: default_timeout(),
            max_in_flight: default_in_flight(),
        }
    }

    /// Parses a TOML file; relative paths are taken relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: ServiceConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.checkpoint.is_relative() {
            cfg.checkpoint = base.join(&cfg.checkpoint);
        }
        if let Some(m) = cfg.manifest.as_mut().filter(|m| m.is_relative()) {
            *m = base.join(&*m);
        }
        Ok(cfg)
    }
}

/// Error codes of the API.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    BadImage,
    BadPart,
    BadAlpha,
    ModelUnavailable,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(skip)]
    status: Option<u16>,
}

impl ApiError {
    fn new(status: StatusCode, code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError {
            code,
            message: message.into(),
            status: Some(status.as_u16()),
        }
    }

    fn bad_image(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, ErrorCode::BadImage, message)
    }

    fn unavailable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, ErrorCode::ModelUnavailable, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorCode::Internal, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidPart(_) => Self::new(StatusCode::BAD_REQUEST, ErrorCode::BadPart, msg),
            Error::InvalidAlpha(_) => Self::new(StatusCode::BAD_REQUEST, ErrorCode::BadAlpha, msg),
            Error::ResolutionMismatch(..) | Error::Image(_) | Error::NonFinite(_) | Error::Unquantized => {
                Self::bad_image(msg)
            }
            _ => Self::internal(msg),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self
            .status
            .and_then(|s| StatusCode::from_u16(s).ok())
            .unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

/// The loaded model and everything the handlers share.
pub struct ServiceState {
    model: FaceModel,
    max_edge: usize,
    timeout: Duration,
    permits: Arc<Semaphore>,
    manifest: Option<(PathBuf, DatasetManifest)>,
}

impl ServiceState {
    /// Loads the checkpoint and manifest; fails on anything that would make
    /// the service unusable.
    pub fn new(cfg: &ServiceConfig) -> Result<Self> {
        let model = FaceModel::load(&cfg.checkpoint)?;
        let max_edge = cfg.max_edge.unwrap_or(model.resolution());
        if max_edge == 0 || max_edge > model.resolution() {
            return Err(Error::Config(format!(
                "max_edge {max_edge} must be in 1..={}",
                model.resolution()
            )));
        }
        if !(cfg.timeout_secs.is_finite() && cfg.timeout_secs > 0.0) {
            return Err(Error::Config(format!("timeout_secs {} must be positive", cfg.timeout_secs)));
        }
        if cfg.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        let manifest = match &cfg.manifest {
            Some(path) => {
                let m = DatasetManifest::load(path)?;
                if m.resolution != model.resolution() {
                    return Err(Error::ResolutionMismatch(m.resolution, model.resolution()));
                }
                let dir = path.parent().unwrap_or(Path::new("")).to_path_buf();
                Some((dir, m))
            }
            None => None,
        };
        Ok(ServiceState {
            model,
            max_edge,
            timeout: Duration::from_secs_f64(cfg.timeout_secs),
            permits: Arc::new(Semaphore::new(cfg.max_in_flight)),
            manifest,
        })
    }

    pub fn model(&self) -> &FaceModel {
        &self.model
    }

    /// Decodes a base64 PNG, checking its size before decoding pixels.
    fn image(&self, field: &str, b64: &str) -> std::result::Result<FaceImage, ApiError> {
        let bytes = B64
            .decode(b64.trim())
            .map_err(|e| ApiError::bad_image(format!("{field}: not base64: {e}")))?;
        let (w, h) = image::ImageReader::new(Cursor::new(&bytes))
            .with_guessed_format()
            .map_err(|e| ApiError::bad_image(format!("{field}: {e}")))?
            .into_dimensions()
            .map_err(|e| ApiError::bad_image(format!("{field}: not a decodable image: {e}")))?;
        let (w, h) = (w as usize, h as usize);
        if w.max(h) > self.max_edge {
            return Err(ApiError::bad_image(format!("{field}: {w}x{h} exceeds max edge {}", self.max_edge)));
        }
        let res = self.model.resolution();
        if w != res || h != res {
            return Err(ApiError::bad_image(format!("{field}: {w}x{h}, the model takes {res}x{res}")));
        }
        Image::decode_png(&bytes).map_err(|e| ApiError::bad_image(format!("{field}: {e}")))
    }

    /// A label map snapped to the palette.
    fn label(&self, field: &str, b64: &str) -> std::result::Result<LabelMap, ApiError> {
        Ok(labelspace::quantize(&self.image(field, b64)?))
    }
}

pub fn encode_image(image: &Image) -> Result<String> {
    Ok(B64.encode(image.encode_png()?))
}

pub fn decode_image(b64: &str) -> Result<Image> {
    let bytes = B64
        .decode(b64.trim())
        .map_err(|e| Error::InvalidArgument(format!("not base64: {e}")))?;
    Image::decode_png(&bytes)
}

fn parse_part(name: &str) -> std::result::Result<Part, ApiError> {
    name.parse::<Part>().map_err(ApiError::from)
}

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> std::result::Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_image(format!("malformed request: {e}")))
}

/// Runs `work` on the blocking pool under the in-flight limit and timeout.
async fn infer<T, F>(state: &Arc<ServiceState>, work: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&ServiceState) -> std::result::Result<T, ApiError> + Send + 'static,
{
    let permit = state
        .permits
        .clone()
        .try_acquire_owned()
        .map_err(|_| ApiError::unavailable("too many requests in flight"))?;
    let st = state.clone();
    let task = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        work(&st)
    });
    match tokio::time::timeout(state.timeout, task).await {
        Ok(Ok(out)) => out.map(Json),
        Ok(Err(e)) => Err(ApiError::internal(format!("inference task failed: {e}"))),
        Err(_) => Err(ApiError::unavailable("inference timed out")),
    }
}

const BODY_LIMIT: usize = 32 << 20;

async fn read_body(body: Body) -> std::result::Result<Vec<u8>, ApiError> {
    axum::body::to_bytes(body, BODY_LIMIT)
        .await
        .map(|b| b.to_vec())
        .map_err(|e| ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, ErrorCode::BadImage, format!("request body: {e}")))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint_digest: String,
    pub stage: String,
    pub resolution: usize,
    pub gene_dim: usize,
    pub has_transformer: bool,
}

async fn health(State(st): State<Arc<ServiceState>>) -> Json<Health> {
    let m = &st.model;
    Json(Health {
        status: "ok".into(),
        checkpoint_digest: m.digest.clone(),
        stage: m.stage.clone(),
        resolution: m.resolution(),
        gene_dim: m.net.gene_dim(),
        has_transformer: m.transformer.is_some(),
    })
}

async fn palette() -> Json<Palette> {
    Json(Palette::standard())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GalleryFace {
    pub id: String,
    pub identity: u32,
    pub image: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Gallery {
    pub split: String,
    pub total: usize,
    pub faces: Vec<GalleryFace>,
}

async fn faces(State(st): State<Arc<ServiceState>>, Query(q): Query<BTreeMap<String, String>>) -> ApiResult<Gallery> {
    // query parsed by hand so that bad values still produce an ApiError
    let limit = match q.get("limit") {
        Some(v) => v.parse().map_err(|_| ApiError::bad_image(format!("limit {v:?} is not a count")))?,
        None => usize::MAX,
    };
    let split_name = q.get("split").cloned().unwrap_or_else(|| "test".into());
    let split: Split = split_name.parse().map_err(|e: Error| ApiError::bad_image(e.to_string()))?;
    if st.manifest.is_none() {
        return Err(ApiError::unavailable("no gallery manifest configured"));
    }
    infer(&st, move |st| {
        let (dir, manifest) = st.manifest.as_ref().expect("checked above");
        let entries: Vec<_> = manifest.split(split).collect();
        let faces = entries
            .iter()
            .take(limit)
            .map(|e| {
                let bytes = std::fs::read(dir.join(&e.image)).map_err(|err| ApiError::internal(err.to_string()))?;
                Ok(GalleryFace {
                    id: e.id.clone(),
                    identity: e.identity,
                    image: B64.encode(bytes),
                })
            })
            .collect::<std::result::Result<Vec<_>, ApiError>>()?;
        Ok(Gallery {
            split: split_name,
            total: entries.len(),
            faces,
        })
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ParseRequest {
    pub image: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ParseResponse {
    pub label: String,
    /// Gene file bytes, base64.
    pub gene: String,
    pub gene_values: Vec<f32>,
}

async fn parse(State(st): State<Arc<ServiceState>>, body: Body) -> ApiResult<ParseResponse> {
    let req: ParseRequest = parse_body(&read_body(body).await?)?;
    let image = st.image("image", &req.image)?;
    infer(&st, move |st| {
        let (label, gene) = st.model.parse(&image)?;
        Ok(ParseResponse {
            label: encode_image(label.image())?,
            gene: B64.encode(gene.to_bytes()),
            gene_values: gene.values().to_vec(),
        })
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RemixRequest {
    pub receptor: String,
    pub donor: String,
    pub part: String,
    #[serde(default = "one")]
    pub alpha: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RemixResponse {
    pub remixed_label: String,
    pub remixed_face: Option<String>,
    pub composited_face: Option<String>,
    pub gene: String,
}

fn remix_response(r: &Remix) -> Result<RemixResponse> {
    Ok(RemixResponse {
        remixed_label: encode_image(r.label.image())?,
        remixed_face: r.face.as_ref().map(encode_image).transpose()?,
        composited_face: r.composited.as_ref().map(encode_image).transpose()?,
        gene: B64.encode(r.gene.to_bytes()),
    })
}

fn check_alpha(alpha: f64) -> std::result::Result<(), ApiError> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha).into())
    }
}

async fn remix(State(st): State<Arc<ServiceState>>, body: Body) -> ApiResult<RemixResponse> {
    let req: RemixRequest = parse_body(&read_body(body).await?)?;
    let part = parse_part(&req.part)?;
    check_alpha(req.alpha)?;
    let receptor = st.image("receptor", &req.receptor)?;
    let donor = st.image("donor", &req.donor)?;
    infer(&st, move |st| {
        Ok(remix_response(&st.model.remix(&receptor, &donor, part, req.alpha)?)?)
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub label: String,
    pub conditional_image: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub face: String,
}

async fn generate(State(st): State<Arc<ServiceState>>, body: Body) -> ApiResult<GenerateResponse> {
    let req: GenerateRequest = parse_body(&read_body(body).await?)?;
    let label = st.label("label", &req.label)?;
    let cond = st.image("conditional_image", &req.conditional_image)?;
    if st.model.transformer.is_none() {
        return Err(ApiError::unavailable(format!(
            "the loaded {} checkpoint cannot generate faces",
            st.model.stage
        )));
    }
    infer(&st, move |st| {
        Ok(GenerateResponse {
            face: encode_image(&st.model.generate(&label, &cond)?)?,
        })
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InterpolateRequest {
    pub receptor: String,
    pub donor: String,
    pub part: String,
    #[serde(default = "five")]
    pub steps: usize,
}

fn five() -> usize {
    5
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Frame {
    pub alpha: f64,
    #[serde(flatten)]
    pub remix: RemixResponse,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InterpolateResponse {
    pub frames: Vec<Frame>,
}

async fn interpolate(State(st): State<Arc<ServiceState>>, body: Body) -> ApiResult<InterpolateResponse> {
    let req: InterpolateRequest = parse_body(&read_body(body).await?)?;
    let part = parse_part(&req.part)?;
    if !(2..=MAX_STEPS).contains(&req.steps) {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            ErrorCode::BadAlpha,
            format!("steps {} outside 2..={MAX_STEPS}", req.steps),
        ));
    }
    let receptor = st.image("receptor", &req.receptor)?;
    let donor = st.image("donor", &req.donor)?;
    infer(&st, move |st| {
        let frames = st.model.interpolate(&receptor, &donor, part, req.steps)?;
        let n = frames.len();
        let frames = frames
            .iter()
            .enumerate()
            .map(|(k, r)| {
                Ok(Frame {
                    alpha: k as f64 / (n - 1) as f64,
                    remix: remix_response(r)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(InterpolateResponse { frames })
    })
    .await
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, ErrorCode::ModelUnavailable, "no such endpoint")
}

async fn wrong_method() -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, ErrorCode::ModelUnavailable, "method not allowed")
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/palette", get(palette))
        .route("/faces", get(faces))
        .route("/parse", post(parse))
        .route("/remix", post(remix))
        .route("/generate", post(generate))
        .route("/interpolate", post(interpolate))
        .fallback(not_found)
        .method_not_allowed_fallback(wrong_method)
        .with_state(state)
}

/// Binds and serves until the process is stopped.
pub fn serve(cfg: &ServiceConfig) -> Result<()> {
    let state = Arc::new(ServiceState::new(cfg)?);
    log::info!(
        "serving {} ({} checkpoint, digest {}) on {}",
        cfg.checkpoint.display(),
        state.model.stage,
        state.model.digest,
        cfg.bind
    );
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|source| Error::Io {
            path: PathBuf::from("<runtime>"),
            source,
        })?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(cfg.bind).await.map_err(|source| Error::Io {
            path: PathBuf::from(cfg.bind.to_string()),
            source,
        })?;
        axum::serve(listener, router(state)).await.map_err(|source| Error::Io {
            path: PathBuf::from(cfg.bind.to_string()),
            source,
        })
    })
}
