//! Uniform access to chat, multimodal and image-generation providers.
//!
//! Every agent call in the pipeline goes through [`ModelGateway::call`]. In
//! `replay` mode responses come from a [`Cassette`] keyed by
//! [`canonical_key`], and a miss is a hard error; no transport is ever
//! touched. `record` mode forwards to the live transport and appends each
//! response to the cassette.

mod cassette;
mod http;
mod request;
mod retry;
mod scripted;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cassette::{Cassette, CassetteEntry, CASSETTE_SCHEMA_VERSION};
pub use http::{network_operations, HttpTransport, ProviderEndpoints};
pub use request::{canonical_key, GatewayRequest, ImageRef, Message, Payload, RequestKind};
pub use retry::{RateLimiter, RetryPolicy};
pub use scripted::ScriptedTransport;

pub const ENV_CHAT_API_KEY: &str = "MANGAFLOW_CHAT_API_KEY";
pub const ENV_IMAGE_API_KEY: &str = "MANGAFLOW_IMAGE_API_KEY";
pub const ENV_MODE: &str = "MANGAFLOW_MODE";
pub const ENV_CASSETTE: &str = "MANGAFLOW_CASSETTE";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("gateway is disabled")]
    Disabled,
    #[error("cassette miss for request {key}")]
    ReplayMiss { key: String },
    #[error("missing credentials: set {0}")]
    MissingCredentials(&'static str),
    #[error("mode {0} requires a cassette path")]
    NoCassette(GatewayMode),
    #[error("provider error: {0}")]
    Provider(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("unexpected response: {0}")]
    UnexpectedResponse(String),
    #[error("cassette: {0}")]
    Cassette(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    Live,
    Record,
    #[default]
    Replay,
    /// Every call fails with [`GatewayError::Disabled`]; exercises fallbacks.
    Off,
}

impl fmt::Display for GatewayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GatewayMode::Live => "live",
            GatewayMode::Record => "record",
            GatewayMode::Replay => "replay",
            GatewayMode::Off => "off",
        })
    }
}

impl FromStr for GatewayMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "live" => Ok(GatewayMode::Live),
            "record" => Ok(GatewayMode::Record),
            "replay" => Ok(GatewayMode::Replay),
            "off" => Ok(GatewayMode::Off),
            other => Err(format!("unknown gateway mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GatewayResponse {
    Text(String),
    Image(Vec<u8>),
}

impl GatewayResponse {
    pub fn into_text(self) -> Result<String, GatewayError> {
        match self {
            GatewayResponse::Text(t) => Ok(t),
            GatewayResponse::Image(_) => Err(GatewayError::UnexpectedResponse(
                "expected text, got image".into(),
            )),
        }
    }

    pub fn into_image(self) -> Result<Vec<u8>, GatewayError> {
        match self {
            GatewayResponse::Image(b) => Ok(b),
            GatewayResponse::Text(_) => Err(GatewayError::UnexpectedResponse(
                "expected image, got text".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    /// Worth retrying: timeouts, connection resets, 429 and 5xx statuses.
    #[error("transient: {0}")]
    Transient(String),
    #[error("{0}")]
    Fatal(String),
}

/// The live side of the gateway.
pub trait Transport: Send + Sync {
    fn send(&self, request: &GatewayRequest) -> Result<GatewayResponse, TransportError>;
}

impl<F> Transport for F
where
    F: Fn(&GatewayRequest) -> Result<GatewayResponse, TransportError> + Send + Sync,
{
    fn send(&self, request: &GatewayRequest) -> Result<GatewayResponse, TransportError> {
        self(request)
    }
}

/// Model identifiers used by the pipeline stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelIds {
    pub chat: String,
    pub multimodal: String,
    pub image: String,
}

impl Default for ModelIds {
    fn default() -> Self {
        Self {
            chat: "gpt-4.1".into(),
            multimodal: "gpt-4.1".into(),
            image: "gpt-image-1".into(),
        }
    }
}

pub struct ModelGateway {
    mode: GatewayMode,
    cassette: Option<Mutex<Cassette>>,
    transport: Option<Arc<dyn Transport>>,
    retry: RetryPolicy,
    limiters: HashMap<RequestKind, RateLimiter>,
    models: ModelIds,
    calls: AtomicUsize,
    log: Mutex<Vec<String>>,
}

impl fmt::Debug for ModelGateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelGateway")
            .field("mode", &self.mode)
            .field("calls", &self.calls())
            .finish()
    }
}

impl ModelGateway {
    fn base(mode: GatewayMode) -> Self {
        Self {
            mode,
            cassette: None,
            transport: None,
            retry: RetryPolicy::default(),
            limiters: HashMap::new(),
            models: ModelIds::default(),
            calls: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn off() -> Self {
        Self::base(GatewayMode::Off)
    }

    pub fn replay(cassette: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let mut gw = Self::base(GatewayMode::Replay);
        gw.cassette = Some(Mutex::new(Cassette::open(cassette)?));
        Ok(gw)
    }

    pub fn record(
        cassette: impl Into<PathBuf>,
        transport: Arc<dyn Transport>,
    ) -> Result<Self, GatewayError> {
        let mut gw = Self::base(GatewayMode::Record);
        gw.cassette = Some(Mutex::new(Cassette::open(cassette)?));
        gw.transport = Some(transport);
        Ok(gw)
    }

    pub fn live(transport: Arc<dyn Transport>) -> Self {
        let mut gw = Self::base(GatewayMode::Live);
        gw.transport = Some(transport);
        gw
    }

    /// Builds a gateway for `mode`, creating the HTTP transport from the
    /// environment when the mode needs one.
    pub fn from_mode(mode: GatewayMode, cassette: Option<PathBuf>) -> Result<Self, GatewayError> {
        match mode {
            GatewayMode::Off => Ok(Self::off()),
            GatewayMode::Replay => Self::replay(cassette.ok_or(GatewayError::NoCassette(mode))?),
            GatewayMode::Live => Ok(Self::live(Arc::new(HttpTransport::from_env()?))
                .with_rate_limits(RateLimiter::per_second(2.0, 4))),
            GatewayMode::Record => Ok(Self::record(
                cassette.ok_or(GatewayError::NoCassette(mode))?,
                Arc::new(HttpTransport::from_env()?),
            )?
            .with_rate_limits(RateLimiter::per_second(2.0, 4))),
        }
    }

    pub fn with_models(mut self, models: ModelIds) -> Self {
        self.models = models;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Installs one token bucket per provider (chat/multimodal share one).
    pub fn with_rate_limits(mut self, limiter: RateLimiter) -> Self {
        self.limiters.insert(RequestKind::Chat, limiter.clone());
        self.limiters.insert(RequestKind::Image, limiter);
        self
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    pub fn models(&self) -> &ModelIds {
        &self.models
    }

    /// Number of calls issued through this gateway, including failed ones.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Request keys in call order.
    pub fn transcript(&self) -> Vec<String> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn call(&self, request: &GatewayRequest) -> Result<GatewayResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = canonical_key(request);
        self.log.lock().expect("log lock").push(key.clone());
        match self.mode {
            GatewayMode::Off => Err(GatewayError::Disabled),
            GatewayMode::Replay => {
                let cassette = self
                    .cassette
                    .as_ref()
                    .ok_or(GatewayError::NoCassette(self.mode))?
                    .lock()
                    .expect("cassette lock");
                cassette
                    .lookup(&key)?
                    .ok_or(GatewayError::ReplayMiss { key })
            }
            GatewayMode::Live => self.send_with_retry(request),
            GatewayMode::Record => {
                let response = self.send_with_retry(request)?;
                let mut cassette = self
                    .cassette
                    .as_ref()
                    .ok_or(GatewayError::NoCassette(self.mode))?
                    .lock()
                    .expect("cassette lock");
                cassette.insert(&key, request.kind(), request.canonical_value(), &response)?;
                Ok(response)
            }
        }
    }

    fn send_with_retry(&self, request: &GatewayRequest) -> Result<GatewayResponse, GatewayError> {
        let transport = self
            .transport
            .as_ref()
            .ok_or(GatewayError::MissingCredentials(ENV_CHAT_API_KEY))?;
        let provider = match request.kind() {
            RequestKind::Image => RequestKind::Image,
            _ => RequestKind::Chat,
        };
        let mut rng = rand::thread_rng();
        let mut attempt = 0;
        loop {
            if let Some(limiter) = self.limiters.get(&provider) {
                limiter.acquire();
            }
            match transport.send(request) {
                Ok(r) => return Ok(r),
                Err(TransportError::Fatal(msg)) => return Err(GatewayError::Provider(msg)),
                Err(TransportError::Transient(msg)) => {
                    if attempt >= self.retry.max_retries() {
                        return Err(GatewayError::RetriesExhausted {
                            attempts: attempt + 1,
                            last: msg,
                        });
                    }
                    log::warn!("transient provider error (attempt {}): {msg}", attempt + 1);
                    std::thread::sleep(self.retry.delay(attempt, &mut rng));
                    attempt += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;
    use std::time::Duration;

    fn echo() -> Arc<dyn Transport> {
        Arc::new(|r: &GatewayRequest| -> Result<GatewayResponse, TransportError> {
            match &r.payload {
                Payload::Image { width, .. } => Ok(GatewayResponse::Image(vec![*width as u8; 4])),
                _ => Ok(GatewayResponse::Text(format!("echo {}", canonical_key(r)))),
            }
        })
    }

    fn chat(text: &str) -> GatewayRequest {
        GatewayRequest::chat("m", vec![Message::user(text)])
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cassette.json");
        let image = GatewayRequest {
            model_id: "img".into(),
            payload: Payload::Image {
                prompt: "a cat".into(),
                negative: String::new(),
                width: 7,
                height: 8,
                seed: 3,
                references: vec![],
            },
            temperature: 0.0,
        };
        let (a, b) = {
            let rec = ModelGateway::record(&path, echo()).unwrap();
            (rec.call(&chat("hello")).unwrap(), rec.call(&image).unwrap())
        };
        let before = network_operations();
        let replay = ModelGateway::replay(&path).unwrap();
        assert_eq!(replay.call(&chat("hello")).unwrap(), a);
        assert_eq!(replay.call(&chat("  hello ")).unwrap(), a);
        assert_eq!(replay.call(&image).unwrap(), b);
        assert_eq!(network_operations(), before);
        match replay.call(&chat("other")) {
            Err(GatewayError::ReplayMiss { key }) => assert_eq!(key, canonical_key(&chat("other"))),
            other => panic!("expected miss, got {other:?}"),
        }
    }

    #[test]
    fn off_mode_fails_every_call() {
        let gw = ModelGateway::off();
        assert!(matches!(gw.call(&chat("x")), Err(GatewayError::Disabled)));
        assert_eq!(gw.calls(), 1);
    }

    #[test]
    fn retries_transient_errors_at_most_three_times() {
        let attempts = Arc::new(AtomicU32::new(0));
        let counter = attempts.clone();
        let flaky = Arc::new(move |_: &GatewayRequest| -> Result<GatewayResponse, TransportError> {
            counter.fetch_add(1, Ordering::SeqCst);
            Err(TransportError::Transient("503".into()))
        });
        let gw = ModelGateway::live(flaky).with_retry(RetryPolicy::new(3, Duration::ZERO));
        match gw.call(&chat("x")) {
            Err(GatewayError::RetriesExhausted { attempts: n, .. }) => assert_eq!(n, 4),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(attempts.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn recovers_after_transient_error() {
        let attempts = Arc::new(AtomicU32::new(0));
        let counter = attempts.clone();
        let flaky = Arc::new(move |_: &GatewayRequest| -> Result<GatewayResponse, TransportError> {
            if counter.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(TransportError::Transient("429".into()))
            } else {
                Ok(GatewayResponse::Text("ok".into()))
            }
        });
        let gw = ModelGateway::live(flaky).with_retry(RetryPolicy::new(3, Duration::ZERO));
        assert_eq!(gw.call(&chat("x")).unwrap(), GatewayResponse::Text("ok".into()));
    }

    #[test]
    fn fatal_errors_are_not_retried() {
        let attempts = Arc::new(AtomicU32::new(0));
        let counter = attempts.clone();
        let bad = Arc::new(move |_: &GatewayRequest| -> Result<GatewayResponse, TransportError> {
            counter.fetch_add(1, Ordering::SeqCst);
            Err(TransportError::Fatal("401 invalid key".into()))
        });
        let gw = ModelGateway::live(bad);
        assert!(matches!(gw.call(&chat("x")), Err(GatewayError::Provider(m)) if m.contains("401")));
        assert_eq!(attempts.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn replay_requires_cassette_path() {
        assert!(matches!(
            ModelGateway::from_mode(GatewayMode::Replay, None),
            Err(GatewayError::NoCassette(GatewayMode::Replay))
        ));
    }
}
