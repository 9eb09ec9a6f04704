use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("invalid client configuration: {0}")]
    Config(String),
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("confidence {0} outside [0, 100]")]
    OutOfRange(f64),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<ApiError> },
    #[error(transparent)]
    Http(#[from] reqwest::Error),
    #[error(transparent)]
    Image(#[from] makeup_shield_core::Error),
    #[error("mock server: {0}")]
    Server(#[from] std::io::Error),
}
