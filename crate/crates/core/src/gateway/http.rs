//! OpenAI-compatible HTTP transport.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Value};

use super::{
    GatewayError, GatewayRequest, GatewayResponse, ImageRef, Payload, Transport, TransportError,
    ENV_CHAT_API_KEY, ENV_IMAGE_API_KEY,
};

static NETWORK_OPS: AtomicUsize = AtomicUsize::new(0);

/// Number of HTTP requests issued by any [`HttpTransport`] in this process.
pub fn network_operations() -> usize {
    NETWORK_OPS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderEndpoints {
    pub chat_base_url: String,
    pub image_base_url: String,
}

impl Default for ProviderEndpoints {
    fn default() -> Self {
        Self {
            chat_base_url: "https://api.openai.com/v1".into(),
            image_base_url: "https://api.openai.com/v1".into(),
        }
    }
}

impl ProviderEndpoints {
    pub fn from_env() -> Self {
        let d = Self::default();
        Self {
            chat_base_url: std::env::var("MANGAFLOW_CHAT_BASE_URL").unwrap_or(d.chat_base_url),
            image_base_url: std::env::var("MANGAFLOW_IMAGE_BASE_URL").unwrap_or(d.image_base_url),
        }
    }
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
    endpoints: ProviderEndpoints,
    chat_key: String,
    image_key: String,
}

impl HttpTransport {
    pub fn new(endpoints: ProviderEndpoints, chat_key: String, image_key: String) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .expect("HTTP client builds");
        Self {
            client,
            endpoints,
            chat_key,
            image_key,
        }
    }

    pub fn from_env() -> Result<Self, GatewayError> {
        let chat_key = std::env::var(ENV_CHAT_API_KEY)
            .map_err(|_| GatewayError::MissingCredentials(ENV_CHAT_API_KEY))?;
        let image_key = std::env::var(ENV_IMAGE_API_KEY)
            .map_err(|_| GatewayError::MissingCredentials(ENV_IMAGE_API_KEY))?;
        Ok(Self::new(ProviderEndpoints::from_env(), chat_key, image_key))
    }

    fn post(&self, url: &str, key: &str, body: &Value) -> Result<Value, TransportError> {
        NETWORK_OPS.fetch_add(1, Ordering::SeqCst);
        let resp = self
            .client
            .post(url)
            .bearer_auth(key)
            .json(body)
            .send()
            .map_err(|e| {
                if e.is_timeout() || e.is_connect() || e.is_request() {
                    TransportError::Transient(e.to_string())
                } else {
                    TransportError::Fatal(e.to_string())
                }
            })?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        if !status.is_success() {
            let msg = format!("{status}: {}", provider_message(&text));
            return Err(if is_transient(status.as_u16()) {
                TransportError::Transient(msg)
            } else {
                TransportError::Fatal(msg)
            });
        }
        serde_json::from_str(&text).map_err(|e| TransportError::Fatal(format!("bad JSON: {e}")))
    }
}

fn is_transient(status: u16) -> bool {
    matches!(status, 408 | 425 | 429 | 500 | 502 | 503 | 504)
}

fn provider_message(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| v["error"]["message"].as_str().map(str::to_string))
        .unwrap_or_else(|| body.chars().take(500).collect())
}

fn data_url(image: &ImageRef) -> Result<String, TransportError> {
    let path = image
        .path
        .as_ref()
        .ok_or_else(|| TransportError::Fatal(format!("image {} has no path", image.sha256)))?;
    let bytes = std::fs::read(path)
        .map_err(|e| TransportError::Fatal(format!("{}: {e}", path.display())))?;
    Ok(format!("data:image/png;base64,{}", B64.encode(bytes)))
}

impl Transport for HttpTransport {
    fn send(&self, request: &GatewayRequest) -> Result<GatewayResponse, TransportError> {
        match &request.payload {
            Payload::Chat { messages } => {
                let body = json!({
                    "model": request.model_id,
                    "temperature": request.temperature,
                    "messages": messages,
                });
                let url = format!("{}/chat/completions", self.endpoints.chat_base_url);
                let v = self.post(&url, &self.chat_key, &body)?;
                chat_text(&v)
            }
            Payload::Multimodal { messages, images } => {
                let mut wire: Vec<Value> = messages.iter().map(|m| json!(m)).collect();
                let mut parts = vec![];
                for img in images {
                    parts.push(json!({"type": "image_url", "image_url": {"url": data_url(img)?}}));
                }
                if let Some(last) = wire.last_mut() {
                    let text = last["content"].clone();
                    parts.insert(0, json!({"type": "text", "text": text}));
                    last["content"] = Value::Array(parts);
                }
                let body = json!({
                    "model": request.model_id,
                    "temperature": request.temperature,
                    "messages": wire,
                });
                let url = format!("{}/chat/completions", self.endpoints.chat_base_url);
                let v = self.post(&url, &self.chat_key, &body)?;
                chat_text(&v)
            }
            Payload::Image {
                prompt,
                negative,
                width,
                height,
                seed,
                references,
            } => {
                let refs = references
                    .iter()
                    .map(data_url)
                    .collect::<Result<Vec<_>, _>>()?;
                let body = json!({
                    "model": request.model_id,
                    "prompt": prompt,
                    "negative_prompt": negative,
                    "size": format!("{width}x{height}"),
                    "seed": seed,
                    "n": 1,
                    "response_format": "b64_json",
                    "reference_images": refs,
                });
                let url = format!("{}/images/generations", self.endpoints.image_base_url);
                let v = self.post(&url, &self.image_key, &body)?;
                let b64 = v["data"][0]["b64_json"]
                    .as_str()
                    .ok_or_else(|| TransportError::Fatal("response has no b64_json".into()))?;
                let bytes = B64
                    .decode(b64)
                    .map_err(|e| TransportError::Fatal(format!("bad base64: {e}")))?;
                Ok(GatewayResponse::Image(bytes))
            }
        }
    }
}

fn chat_text(v: &Value) -> Result<GatewayResponse, TransportError> {
    v["choices"][0]["message"]["content"]
        .as_str()
        .map(|s| GatewayResponse::Text(s.to_string()))
        .ok_or_else(|| TransportError::Fatal("response has no message content".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transient_statuses() {
        for s in [408, 429, 500, 502, 503, 504] {
            assert!(is_transient(s));
        }
        for s in [400, 401, 403, 404, 422] {
            assert!(!is_transient(s));
        }
    }

    #[test]
    fn provider_message_prefers_error_field() {
        assert_eq!(provider_message(r#"{"error":{"message":"quota"}}"#), "quota");
        assert_eq!(provider_message("plain"), "plain");
    }
}
