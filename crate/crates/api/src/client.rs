//! Face-compare client.

use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt};
use makeup_shield_core::io::encode_png;
use makeup_shield_core::ImageBuffer;
use reqwest::multipart::{Form, Part};
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;
use crate::limiter::RateLimiter;

pub const ENDPOINT_VAR: &str = "FACECOMPARE_ENDPOINT";
pub const KEY_VAR: &str = "FACECOMPARE_KEY";
/// Header carrying the credential.
pub const KEY_HEADER: &str = "x-api-key";

/// Request/response shape of one provider.
pub trait ProviderAdapter: Send + Sync {
    fn name(&self) -> &str;

    /// Path appended to the endpoint.
    fn path(&self) -> &str {
        "/compare"
    }

    fn form(&self, image_a: Vec<u8>, image_b: Vec<u8>) -> Form;

    /// Extracts the raw confidence from a response body.
    fn confidence(&self, body: &serde_json::Value) -> Result<f64, ApiError>;
}

/// `image_a` / `image_b` PNG parts in, `{"confidence": x}` out.
#[derive(Debug, Clone, Copy, Default)]
pub struct GenericAdapter;

impl ProviderAdapter for GenericAdapter {
    fn name(&self) -> &str {
        "generic"
    }

    fn form(&self, image_a: Vec<u8>, image_b: Vec<u8>) -> Form {
        let part = |bytes: Vec<u8>, file: &'static str| {
            Part::bytes(bytes)
                .file_name(file)
                .mime_str("image/png")
                .expect("static mime type")
        };
        Form::new()
            .part("image_a", part(image_a, "a.png"))
            .part("image_b", part(image_b, "b.png"))
    }

    fn confidence(&self, body: &serde_json::Value) -> Result<f64, ApiError> {
        body.get("confidence")
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| ApiError::Malformed(format!("missing numeric `confidence` in {body}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    /// Requests per second across all concurrent calls.
    pub rate_limit: f64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_factor: f64,
    pub timeout_ms: u64,
    /// In-flight requests during batch comparison.
    pub concurrency: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080".into(),
            api_key: None,
            rate_limit: 5.0,
            max_retries: 3,
            backoff_base_ms: 500,
            backoff_factor: 2.0,
            timeout_ms: 30_000,
            concurrency: 4,
        }
    }
}

impl ClientConfig {
    /// Defaults overridden by `FACECOMPARE_ENDPOINT` / `FACECOMPARE_KEY`.
    pub fn from_env() -> Self {
        let mut cfg = Self::default();
        if let Ok(e) = std::env::var(ENDPOINT_VAR) {
            cfg.endpoint = e;
        }
        if let Ok(k) = std::env::var(KEY_VAR) {
            cfg.api_key = Some(k);
        }
        cfg
    }

    fn validate(&self) -> Result<(), ApiError> {
        let bad = |m: String| Err(ApiError::Config(m));
        if !(self.rate_limit > 0.0 && self.rate_limit.is_finite()) {
            return bad(format!(
                "rate_limit must be positive, got {}",
                self.rate_limit
            ));
        }
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1".into());
        }
        if self.backoff_factor.is_nan() || self.backoff_factor < 1.0 {
            return bad(format!(
                "backoff_factor must be >= 1, got {}",
                self.backoff_factor
            ));
        }
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return bad(format!(
                "endpoint must be an http(s) URL, got `{}`",
                self.endpoint
            ));
        }
        Ok(())
    }

    /// Delay before retry number `retry` (0-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        Duration::from_secs_f64(
            self.backoff_base_ms as f64 / 1000.0 * self.backoff_factor.powi(retry as i32),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareResult {
    /// In `[0, 100]`.
    pub confidence: f64,
    /// Wall time from the first attempt to the successful response.
    pub latency_ms: f64,
    pub provider: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub n: usize,
    pub failures: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub std: Option<f64>,
}

impl Summary {
    /// Statistics over the confidences of successful items; `std` is the
    /// population standard deviation.
    pub fn from_confidences(values: &[f64], failures: usize) -> Self {
        if values.is_empty() {
            return Self {
                n: 0,
                failures,
                mean: None,
                median: None,
                std: None,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        };
        Self {
            n: values.len(),
            failures,
            mean: Some(mean),
            median: Some(median),
            std: Some(var.sqrt()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum BatchItem {
    Ok(CompareResult),
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchReport {
    pub items: Vec<BatchItem>,
    pub summary: Summary,
}

enum Attempt {
    Done(f64),
    Retry(ApiError),
}

/// Cloneable handle; clones share the rate limiter.
#[derive(Clone)]
pub struct CompareClient {
    cfg: ClientConfig,
    http: reqwest::Client,
    limiter: Arc<RateLimiter>,
    adapter: Arc<dyn ProviderAdapter>,
}

impl std::fmt::Debug for CompareClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CompareClient")
            .field("endpoint", &self.cfg.endpoint)
            .field("provider", &self.adapter.name())
            .finish_non_exhaustive()
    }
}

impl CompareClient {
    pub fn new(cfg: ClientConfig) -> Result<Self, ApiError> {
        Self::with_adapter(cfg, Arc::new(GenericAdapter))
    }

    pub fn with_adapter(
        cfg: ClientConfig,
        adapter: Arc<dyn ProviderAdapter>,
    ) -> Result<Self, ApiError> {
        cfg.validate()?;
        let http = reqwest::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()?;
        Ok(Self {
            limiter: Arc::new(RateLimiter::new(cfg.rate_limit)),
            cfg,
            http,
            adapter,
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    fn url(&self) -> String {
        format!(
            "{}{}",
            self.cfg.endpoint.trim_end_matches('/'),
            self.adapter.path()
        )
    }

    async fn attempt(&self, a: &[u8], b: &[u8]) -> Result<Attempt, ApiError> {
        self.limiter.acquire().await;
        let mut req = self
            .http
            .post(self.url())
            .multipart(self.adapter.form(a.to_vec(), b.to_vec()));
        if let Some(key) = &self.cfg.api_key {
            req = req.header(KEY_HEADER, key);
        }
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) if e.is_connect() || e.is_timeout() || e.is_request() => {
                return Ok(Attempt::Retry(ApiError::Http(e)));
            }
            Err(e) => return Err(ApiError::Http(e)),
        };
        let status = resp.status();
        if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
            return Err(ApiError::Auth {
                status: status.as_u16(),
            });
        }
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Ok(Attempt::Retry(ApiError::Status {
                status: status.as_u16(),
                body: resp.text().await.unwrap_or_default(),
            }));
        }
        if !status.is_success() {
            return Err(ApiError::Status {
                status: status.as_u16(),
                body: resp.text().await.unwrap_or_default(),
            });
        }
        let text = resp.text().await?;
        let body: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| ApiError::Malformed(format!("{e}: {text}")))?;
        let c = self.adapter.confidence(&body)?;
        if !(0.0..=100.0).contains(&c) {
            return Err(ApiError::OutOfRange(c));
        }
        Ok(Attempt::Done(c))
    }

    async fn compare_png(&self, a: &[u8], b: &[u8]) -> Result<CompareResult, ApiError> {
        let start = Instant::now();
        let mut retries = 0;
        loop {
            match self.attempt(a, b).await? {
                Attempt::Done(confidence) => {
                    return Ok(CompareResult {
                        confidence,
                        latency_ms: start.elapsed().as_secs_f64() * 1000.0,
                        provider: self.adapter.name().to_string(),
                        attempts: retries + 1,
                    })
                }
                Attempt::Retry(err) => {
                    if retries >= self.cfg.max_retries {
                        return Err(ApiError::RetriesExhausted {
                            attempts: retries + 1,
                            last: Box::new(err),
                        });
                    }
                    let wait = self.cfg.backoff(retries);
                    log::warn!(
                        "compare attempt {} failed ({err}); retrying in {wait:?}",
                        retries + 1
                    );
                    tokio::time::sleep(wait).await;
                    retries += 1;
                }
            }
        }
    }

    /// Sends one comparison, retrying transient failures.
    pub async fn compare(
        &self,
        image_a: &ImageBuffer,
        image_b: &ImageBuffer,
    ) -> Result<CompareResult, ApiError> {
        let a = encode_png(image_a)?;
        let b = encode_png(image_b)?;
        self.compare_png(&a, &b).await
    }

    /// Compares each protected image against `target`; item order follows
    /// the input.
    pub async fn batch_compare(
        &self,
        protected: &[ImageBuffer],
        target: &ImageBuffer,
    ) -> Result<BatchReport, ApiError> {
        let t = encode_png(target)?;
        let encoded = protected
            .iter()
            .map(encode_png)
            .collect::<Result<Vec<_>, _>>()?;
        let items: Vec<BatchItem> = stream::iter(encoded)
            .map(|p| {
                let t = &t;
                async move {
                    match self.compare_png(&p, t).await {
                        Ok(r) => BatchItem::Ok(r),
                        Err(e) => BatchItem::Failed {
                            error: e.to_string(),
                        },
                    }
                }
            })
            .buffered(self.cfg.concurrency)
            .collect()
            .await;
        let ok: Vec<f64> = items
            .iter()
            .filter_map(|i| match i {
                BatchItem::Ok(r) => Some(r.confidence),
                BatchItem::Failed { .. } => None,
            })
            .collect();
        let summary = Summary::from_confidences(&ok, items.len() - ok.len());
        Ok(BatchReport { items, summary })
    }
}
