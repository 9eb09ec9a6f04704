//! Client for remote face-compare services that answer with a confidence in
//! `[0, 100]`, and a local mock of such a service.

mod client;
mod error;
mod limiter;
pub mod mock;

pub use client::{
    BatchItem, BatchReport, ClientConfig, CompareClient, CompareResult, GenericAdapter,
    ProviderAdapter, Summary, ENDPOINT_VAR, KEY_HEADER, KEY_VAR,
};
pub use error::ApiError;
pub use limiter::RateLimiter;
