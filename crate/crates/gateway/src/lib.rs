//! HTTP gateway in front of a chat backend.
//!
//! `POST /v1/ask` wraps the question with the CoT scaffold (unless `cot` is
//! false) and relays it upstream. `GET /healthz` probes the upstream with a
//! 2 s ceiling; `GET /v1/config` describes the active prompt layer; `/ui`
//! optionally serves the static web chat.

use std::future::Future;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fusionkit_core::cot_prompting::{assemble_cot_prompt, default_cot_config, load_cot_config, CotError, ValidCotConfig};
use fusionkit_core::ingest::detect_language;
use fusionkit_core::llm_client::{ChatClient, ChatParams, ClientConfig, HttpTransport, MockScript, MockTransport};
use fusionkit_core::Lang;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::net::TcpListener;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

pub const HEALTH_TIMEOUT: Duration = Duration::from_secs(2);
/// Final line of a streamed answer.
pub const STREAM_SENTINEL: &str = "[DONE]";
const STREAM_FRAME_CHARS: usize = 64;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid gateway config: {0}")]
    Config(String),
    #[error(transparent)]
    Cot(#[from] CotError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub listen_addr: String,
    /// Base URL of a chat-completions endpoint; ignored when `mock_script` is set.
    pub upstream_url: Option<String>,
    pub mock_script: Option<PathBuf>,
    pub cot_config_path: Option<PathBuf>,
    pub max_inflight: usize,
    pub model_id: String,
    pub temperature: f32,
    pub ui_dir: Option<PathBuf>,
    /// Allowed browser origins; empty allows any.
    pub cors_origins: Vec<String>,
    pub client: ClientConfig,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            listen_addr: "127.0.0.1:8080".into(),
            upstream_url: None,
            mock_script: None,
            cot_config_path: None,
            max_inflight: 8,
            model_id: "fusion-chat".into(),
            temperature: ChatParams::default().temperature,
            ui_dir: None,
            cors_origins: Vec::new(),
            client: ClientConfig::default(),
        }
    }
}

impl GatewayConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct AskRequest {
    pub question: String,
    #[serde(default)]
    pub lang: Option<Lang>,
    #[serde(default = "default_cot")]
    pub cot: bool,
    #[serde(default)]
    pub stream: bool,
}

fn default_cot() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AskResponse {
    pub answer: String,
    pub cot_used: bool,
    pub message_count: usize,
    pub latency_ms: u64,
    pub lang: Lang,
}

#[derive(Clone)]
pub struct AppState {
    client: ChatClient,
    params: ChatParams,
    cot: Arc<ValidCotConfig>,
    draining: Arc<AtomicBool>,
}

impl AppState {
    pub fn new(client: ChatClient, params: ChatParams, cot: ValidCotConfig) -> Self {
        Self { client, params, cot: Arc::new(cot), draining: Arc::new(AtomicBool::new(false)) }
    }

    /// Builds the upstream client described by `config`.
    pub fn from_config(config: &GatewayConfig) -> Result<Self, GatewayError> {
        let cot = match &config.cot_config_path {
            Some(path) => load_cot_config(path)?,
            None => default_cot_config(),
        };
        let client_config = ClientConfig { max_inflight: config.max_inflight.max(1), ..config.client.clone() };
        let client = if let Some(script) = &config.mock_script {
            let script = MockScript::load(script)?;
            ChatClient::new(Arc::new(MockTransport::new(script)), client_config)
        } else if let Some(url) = &config.upstream_url {
            let timeout = Duration::from_secs(client_config.timeout_secs.max(1));
            let transport = HttpTransport::new(url.clone(), timeout).map_err(|e| GatewayError::Config(e.to_string()))?;
            ChatClient::new(Arc::new(transport), client_config)
        } else {
            return Err(GatewayError::Config("set either upstream_url or mock_script".into()));
        };
        let params = ChatParams { model_id: config.model_id.clone(), temperature: config.temperature, ..ChatParams::default() };
        Ok(Self::new(client, params, cot))
    }

    /// New requests get 503 once set.
    pub fn start_drain(&self) {
        self.draining.store(true, Ordering::SeqCst);
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn ask(State(state): State<AppState>, body: Bytes) -> Response {
    if state.draining.load(Ordering::SeqCst) {
        return error(StatusCode::SERVICE_UNAVAILABLE, "shutting down");
    }
    let req: AskRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request body: {e}")),
    };
    if req.question.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "question is empty");
    }
    let lang = match req.lang {
        Some(Lang::Other) => return error(StatusCode::BAD_REQUEST, "lang must be zh or en"),
        Some(lang) => lang,
        None => match detect_language(&req.question) {
            Ok(Lang::Zh) => Lang::Zh,
            _ => Lang::En,
        },
    };
    let messages = match assemble_cot_prompt(&req.question, lang, &state.cot, req.cot) {
        Ok(m) => m,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let started = Instant::now();
    let completion = match state.client.chat(&messages, &state.params).await {
        Ok(c) => c,
        Err(e) => {
            tracing::warn!(error = %e, "upstream failure");
            return error(StatusCode::BAD_GATEWAY, format!("upstream failure: {e}"));
        }
    };
    let response = AskResponse {
        answer: completion.text,
        cot_used: req.cot,
        message_count: messages.len(),
        latency_ms: started.elapsed().as_millis() as u64,
        lang,
    };
    if req.stream {
        stream_answer(response)
    } else {
        Json(response).into_response()
    }
}

/// Chunked plain-text frames of the answer, then a sentinel line.
fn stream_answer(r: AskResponse) -> Response {
    let chars: Vec<char> = r.answer.chars().collect();
    let mut frames: Vec<Result<String, std::convert::Infallible>> =
        chars.chunks(STREAM_FRAME_CHARS).map(|c| Ok(c.iter().collect())).collect();
    frames.push(Ok(format!("\n{STREAM_SENTINEL}\n")));
    let mut response = Response::new(Body::from_stream(futures::stream::iter(frames)));
    let headers = response.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("text/plain; charset=utf-8"));
    headers.insert("x-cot-used", HeaderValue::from_static(if r.cot_used { "true" } else { "false" }));
    headers.insert("x-message-count", HeaderValue::from(r.message_count));
    response
}

async fn healthz(State(state): State<AppState>) -> Response {
    match tokio::time::timeout(HEALTH_TIMEOUT, state.client.health()).await {
        Ok(true) => Json(json!({ "status": "ok" })).into_response(),
        Ok(false) => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "upstream unhealthy" }))).into_response(),
        Err(_) => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "upstream probe timed out" }))).into_response(),
    }
}

async fn config(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({
        "model_id": state.params.model_id,
        "cot_aspects": state.cot.aspects,
        "exemplar_count": state.cot.exemplars.len(),
        "inline_exemplars": state.cot.inline,
    }))
}

pub fn router(state: AppState, ui_dir: Option<&Path>, cors_origins: &[String]) -> Router {
    let cors = if cors_origins.is_empty() {
        CorsLayer::permissive()
    } else {
        let origins: Vec<HeaderValue> = cors_origins.iter().filter_map(|o| o.parse().ok()).collect();
        CorsLayer::new()
            .allow_origin(AllowOrigin::list(origins))
            .allow_methods(tower_http::cors::Any)
            .allow_headers(tower_http::cors::Any)
    };
    let mut app = Router::new()
        .route("/v1/ask", post(ask))
        .route("/healthz", get(healthz))
        .route("/v1/config", get(config));
    if let Some(dir) = ui_dir {
        app = app.nest_service("/ui", ServeDir::new(dir));
    }
    app.layer(cors).with_state(state)
}

/// Serves until `shutdown` resolves, then refuses new asks with 503 and waits
/// for in-flight requests to finish.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    app: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let drain = state.clone();
    axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            shutdown.await;
            drain.start_drain();
            tracing::info!("draining in-flight requests");
        })
        .await
}

/// Binds `config.listen_addr` and serves until `shutdown` resolves.
pub async fn run(
    config: &GatewayConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
    on_bound: impl FnOnce(SocketAddr),
) -> Result<(), GatewayError> {
    let state = AppState::from_config(config)?;
    let app = router(state.clone(), config.ui_dir.as_deref(), &config.cors_origins);
    let listener = TcpListener::bind(&config.listen_addr).await?;
    on_bound(listener.local_addr()?);
    serve(listener, state, app, shutdown).await?;
    Ok(())
}
