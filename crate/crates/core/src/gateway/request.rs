use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestKind {
    Chat,
    Multimodal,
    Image,
}

impl RequestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RequestKind::Chat => "chat",
            RequestKind::Multimodal => "multimodal",
            RequestKind::Image => "image",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

/// An image attached to a request. Only the content digest takes part in the
/// request key; the path is where live transports read the bytes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub sha256: String,
    #[serde(skip)]
    pub path: Option<PathBuf>,
}

impl ImageRef {
    pub fn from_file(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        let bytes = std::fs::read(&path)?;
        Ok(Self {
            sha256: crate::digest::sha256_hex(&bytes),
            path: Some(path),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Payload {
    Chat {
        messages: Vec<Message>,
    },
    Multimodal {
        messages: Vec<Message>,
        images: Vec<ImageRef>,
    },
    Image {
        prompt: String,
        negative: String,
        width: u32,
        height: u32,
        seed: u64,
        references: Vec<ImageRef>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayRequest {
    pub model_id: String,
    pub payload: Payload,
    /// Sampling temperature; a transport hint, not part of the request key.
    #[serde(default)]
    pub temperature: f32,
}

impl GatewayRequest {
    pub fn chat(model_id: impl Into<String>, messages: Vec<Message>) -> Self {
        Self {
            model_id: model_id.into(),
            payload: Payload::Chat { messages },
            temperature: 0.0,
        }
    }

    pub fn multimodal(
        model_id: impl Into<String>,
        messages: Vec<Message>,
        images: Vec<ImageRef>,
    ) -> Self {
        Self {
            model_id: model_id.into(),
            payload: Payload::Multimodal { messages, images },
            temperature: 0.0,
        }
    }

    pub fn image(
        model_id: impl Into<String>,
        prompt: impl Into<String>,
        negative: impl Into<String>,
        (width, height): (u32, u32),
        seed: u64,
        references: Vec<ImageRef>,
    ) -> Self {
        Self {
            model_id: model_id.into(),
            payload: Payload::Image {
                prompt: prompt.into(),
                negative: negative.into(),
                width,
                height,
                seed,
                references,
            },
            temperature: 0.0,
        }
    }

    pub fn kind(&self) -> RequestKind {
        match self.payload {
            Payload::Chat { .. } => RequestKind::Chat,
            Payload::Multimodal { .. } => RequestKind::Multimodal,
            Payload::Image { .. } => RequestKind::Image,
        }
    }

    /// The canonical JSON form used for keying: kind, model and payload with
    /// whitespace-normalized strings. Key order is sorted by `serde_json`'s map.
    pub fn canonical_value(&self) -> Value {
        let payload = serde_json::to_value(&self.payload).expect("payload serializes");
        serde_json::json!({
            "kind": self.kind().as_str(),
            "model_id": normalize_ws(&self.model_id),
            "payload": canonicalize(payload),
        })
    }
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn canonicalize(v: Value) -> Value {
    match v {
        Value::String(s) => Value::String(normalize_ws(&s)),
        Value::Array(items) => Value::Array(items.into_iter().map(canonicalize).collect()),
        Value::Object(map) => Value::Object(
            map.into_iter()
                .map(|(k, v)| (k, canonicalize(v)))
                .collect(),
        ),
        other => other,
    }
}

/// Stable SHA-256 digest of the canonical request.
pub fn canonical_key(request: &GatewayRequest) -> String {
    let text = serde_json::to_string(&request.canonical_value()).expect("value serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> GatewayRequest {
        GatewayRequest::chat(
            "chat-model",
            vec![Message::system("You plan manga."), Message::user("A boy  enters\n a classroom.")],
        )
    }

    #[test]
    fn whitespace_does_not_change_key() {
        let mut other = sample();
        if let Payload::Chat { messages } = &mut other.payload {
            messages[1].content = "  A boy enters a\tclassroom. ".into();
        }
        assert_eq!(canonical_key(&sample()), canonical_key(&other));
    }

    #[test]
    fn field_order_does_not_change_key() {
        let a: GatewayRequest = serde_json::from_str(
            r#"{"model_id":"m","payload":{"type":"chat","messages":[{"role":"user","content":"hi"}]}}"#,
        )
        .unwrap();
        let b: GatewayRequest = serde_json::from_str(
            r#"{"payload":{"messages":[{"content":"hi","role":"user"}],"type":"chat"},"model_id":"m","temperature":0.7}"#,
        )
        .unwrap();
        assert_eq!(canonical_key(&a), canonical_key(&b));
    }

    #[test]
    fn model_changes_key() {
        let mut other = sample();
        other.model_id = "another-model".into();
        assert_ne!(canonical_key(&sample()), canonical_key(&other));
    }

    #[test]
    fn image_path_is_not_keyed() {
        let mk = |p: &str| GatewayRequest::multimodal(
            "mm",
            vec![Message::user("look")],
            vec![ImageRef {
                sha256: "ab".into(),
                path: Some(p.into()),
            }],
        );
        assert_eq!(canonical_key(&mk("/a.png")), canonical_key(&mk("/b/c.png")));
    }
}
