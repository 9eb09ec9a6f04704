//! In-process face-compare service for tests and local runs.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::{Multipart, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use makeup_shield_core::encoders::FaceEmbedder;
use makeup_shield_core::io::decode_png;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use crate::client::KEY_HEADER;
use crate::error::ApiError;

/// One scripted answer.
#[derive(Debug, Clone, PartialEq)]
pub enum MockReply {
    Status(u16),
    Confidence(f64),
    /// A 200 response whose body is not JSON.
    Malformed,
}

#[derive(Clone)]
pub enum MockMode {
    /// Always answers with this confidence.
    Fixed(f64),
    /// Plays `replies` in order, then answers `then`.
    Scripted { replies: Vec<MockReply>, then: f64 },
    /// `100·cos` between the embeddings of the two images, clipped to `[0, 100]`.
    Embedder(Arc<dyn FaceEmbedder>),
}

impl std::fmt::Debug for MockMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Fixed(v) => f.debug_tuple("Fixed").field(v).finish(),
            Self::Scripted { replies, then } => f
                .debug_struct("Scripted")
                .field("replies", replies)
                .field("then", then)
                .finish(),
            Self::Embedder(e) => f.debug_tuple("Embedder").field(&e.name()).finish(),
        }
    }
}

struct Shared {
    mode: MockMode,
    script: Mutex<VecDeque<MockReply>>,
    arrivals: Mutex<Vec<Instant>>,
    api_key: Option<String>,
}

/// Confidence the embedder mode reports for cosine `cos`: `100·cos`
/// clipped to `[0, 100]`.
pub fn embedder_confidence(cos: f64) -> f64 {
    100.0 * cos.clamp(0.0, 1.0)
}

fn reply(r: MockReply) -> Response {
    match r {
        MockReply::Confidence(c) => Json(serde_json::json!({ "confidence": c })).into_response(),
        MockReply::Malformed => (StatusCode::OK, "<html>not json</html>").into_response(),
        MockReply::Status(s) => {
            let code = StatusCode::from_u16(s).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            (code, format!("scripted status {s}")).into_response()
        }
    }
}

async fn read_images(mut form: Multipart) -> Result<(Vec<u8>, Vec<u8>), String> {
    let (mut a, mut b) = (None, None);
    while let Some(field) = form.next_field().await.map_err(|e| e.to_string())? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| e.to_string())?.to_vec();
        match name.as_str() {
            "image_a" => a = Some(bytes),
            "image_b" => b = Some(bytes),
            _ => {}
        }
    }
    Ok((
        a.ok_or("missing field image_a")?,
        b.ok_or("missing field image_b")?,
    ))
}

fn score_pair(emb: &dyn FaceEmbedder, a: &[u8], b: &[u8]) -> Result<f64, String> {
    let ea = emb
        .face_embed(&decode_png(a).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let eb = emb
        .face_embed(&decode_png(b).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let cos = ea.cosine(&eb).ok_or("zero embedding")?;
    Ok(embedder_confidence(cos))
}

async fn compare(
    State(shared): State<Arc<Shared>>,
    headers: HeaderMap,
    form: Multipart,
) -> Response {
    shared
        .arrivals
        .lock()
        .expect("arrival log")
        .push(Instant::now());
    if let Some(key) = &shared.api_key {
        let given = headers.get(KEY_HEADER).and_then(|v| v.to_str().ok());
        if given != Some(key.as_str()) {
            return (StatusCode::UNAUTHORIZED, "bad key").into_response();
        }
    }
    let (a, b) = match read_images(form).await {
        Ok(v) => v,
        Err(e) => return (StatusCode::BAD_REQUEST, e).into_response(),
    };
    match &shared.mode {
        MockMode::Fixed(c) => reply(MockReply::Confidence(*c)),
        MockMode::Scripted { then, .. } => {
            let next = shared.script.lock().expect("script").pop_front();
            reply(next.unwrap_or(MockReply::Confidence(*then)))
        }
        MockMode::Embedder(emb) => match score_pair(emb.as_ref(), &a, &b) {
            Ok(c) => reply(MockReply::Confidence(c)),
            Err(e) => (StatusCode::UNPROCESSABLE_ENTITY, e).into_response(),
        },
    }
}

/// A running mock; the server stops when this value is dropped.
pub struct MockServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    task: JoinHandle<()>,
}

impl MockServer {
    /// Binds an ephemeral local port.
    pub async fn start(mode: MockMode, api_key: Option<String>) -> Result<Self, ApiError> {
        Self::bind(
            "127.0.0.1:0".parse().expect("literal address"),
            mode,
            api_key,
        )
        .await
    }

    pub async fn bind(
        addr: SocketAddr,
        mode: MockMode,
        api_key: Option<String>,
    ) -> Result<Self, ApiError> {
        let script = match &mode {
            MockMode::Scripted { replies, .. } => replies.iter().cloned().collect(),
            _ => VecDeque::new(),
        };
        let shared = Arc::new(Shared {
            mode,
            script: Mutex::new(script),
            arrivals: Mutex::new(Vec::new()),
            api_key,
        });
        let app = Router::new()
            .route("/compare", post(compare))
            .with_state(shared.clone());
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let task = tokio::spawn(async move {
            if let Err(e) = axum::serve(listener, app).await {
                log::error!("mock server stopped: {e}");
            }
        });
        Ok(Self { addr, shared, task })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Arrival time of every request received so far.
    pub fn arrivals(&self) -> Vec<Instant> {
        self.shared.arrivals.lock().expect("arrival log").clone()
    }

    /// Runs until the server task ends.
    pub async fn wait(mut self) {
        let _ = (&mut self.task).await;
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}
