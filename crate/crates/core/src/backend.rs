//! Model backends: the chat and embedding traits the engine talks to, and an
//! HTTP client for the adapter wire protocol.
//!
//! Endpoints (JSON bodies, UTF-8):
//!
//! | method | path              | request                         | response                                   |
//! |--------|-------------------|---------------------------------|--------------------------------------------|
//! | POST   | `/v1/embed/text`  | `{"texts":[s]}`                 | `{"dim":D,"vectors":[[r]],"truncated":[b]}` |
//! | POST   | `/v1/embed/image` | `{"locators":[s]}`              | same as text                               |
//! | POST   | `/v1/chat`        | `{"messages":[..],"temperature":r,"max_tokens":n}` | `{"text":s}`            |
//! | GET    | `/health`         |                                 | `{"mode":s,"embed_model":s,"chat_model":s,"dim":D}` |

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::prompting::{ChatMessage, ChatRequest, Part};

/// Environment variable holding a bearer token for authenticated backends.
pub const TOKEN_ENV: &str = "COTMR_BACKEND_TOKEN";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend rejected request with status {status}: {message}")]
    Rejected { status: u16, message: String },
    #[error("backend protocol error: {0}")]
    Protocol(String),
}

/// A vision-language chat model.
pub trait ChatBackend: Send + Sync {
    /// Identifies the backend and model in traces and fingerprints.
    fn backend_id(&self) -> String;

    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedBatch {
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
    #[serde(default)]
    pub truncated: Vec<bool>,
}

/// A contrastive text/image embedder. Vectors need not be normalized; the
/// embedding store normalizes them.
pub trait EmbedBackend: Send + Sync {
    fn model_id(&self) -> String;

    fn embed_texts(&self, texts: &[String]) -> Result<EmbedBatch, BackendError>;

    fn embed_images(&self, locators: &[String]) -> Result<EmbedBatch, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub mode: String,
    pub embed_model: String,
    pub chat_model: String,
    pub dim: usize,
}

#[derive(Serialize)]
struct WireChatRequest<'a> {
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a crate::prompting::Role,
    parts: Vec<Part>,
}

#[derive(Deserialize)]
struct WireChatResponse {
    text: String,
}

/// Client for the adapter service.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    base_url: String,
    token: Option<String>,
    agent: ureq::Agent,
    /// Image id to locator, applied to chat image parts.
    locators: HashMap<String, String>,
    health: Option<Health>,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(600)))
            .build();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            agent: config.into(),
            locators: HashMap::new(),
            health: None,
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn with_locators(mut self, locators: HashMap<String, String>) -> Self {
        self.locators = locators;
        self
    }

    /// Fetches `/health` once and keeps the model ids for fingerprints.
    pub fn connect(mut self) -> Result<Self, BackendError> {
        self.health = Some(self.health()?);
        Ok(self)
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base_url)
    }

    pub fn health(&self) -> Result<Health, BackendError> {
        let mut req = self.agent.get(&self.url("/health"));
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let resp = req
            .call()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Self::decode(resp)
    }

    /// Posts a JSON body and returns `(status, raw body)` without
    /// interpreting the status.
    pub fn post_raw(&self, path: &str, body: &serde_json::Value) -> Result<(u16, String), BackendError> {
        let mut req = self.agent.post(&self.url(path));
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok((status, text))
    }

    fn post<T: serde::de::DeserializeOwned>(
        &self,
        path: &str,
        body: &serde_json::Value,
    ) -> Result<T, BackendError> {
        let (status, text) = self.post_raw(path, body)?;
        Self::interpret(status, &text)
    }

    fn decode<T: serde::de::DeserializeOwned>(
        mut resp: ureq::http::Response<ureq::Body>,
    ) -> Result<T, BackendError> {
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        Self::interpret(status, &text)
    }

    fn interpret<T: serde::de::DeserializeOwned>(status: u16, text: &str) -> Result<T, BackendError> {
        match status {
            200..=299 => serde_json::from_str(text)
                .map_err(|e| BackendError::Protocol(format!("bad response body: {e}"))),
            503 => Err(BackendError::Unavailable(format!("503: {text}"))),
            _ => Err(BackendError::Rejected {
                status,
                message: text.to_string(),
            }),
        }
    }

    fn wire_message<'a>(&self, m: &'a ChatMessage) -> WireMessage<'a> {
        let parts = m
            .parts
            .iter()
            .map(|p| match p {
                Part::Image(id) => Part::Image(self.locators.get(id).cloned().unwrap_or_else(|| id.clone())),
                Part::Text(t) => Part::Text(t.clone()),
            })
            .collect();
        WireMessage { role: &m.role, parts }
    }
}

impl ChatBackend for HttpBackend {
    fn backend_id(&self) -> String {
        match &self.health {
            Some(h) => format!("{} ({})", self.base_url, h.chat_model),
            None => self.base_url.clone(),
        }
    }

    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let wire = WireChatRequest {
            messages: request.messages.iter().map(|m| self.wire_message(m)).collect(),
            temperature: request.decoding.temperature,
            max_tokens: request.decoding.max_tokens,
        };
        let body = serde_json::to_value(&wire).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let resp: WireChatResponse = self.post("/v1/chat", &body)?;
        Ok(resp.text)
    }
}

impl EmbedBackend for HttpBackend {
    fn model_id(&self) -> String {
        match &self.health {
            Some(h) => h.embed_model.clone(),
            None => self.base_url.clone(),
        }
    }

    fn embed_texts(&self, texts: &[String]) -> Result<EmbedBatch, BackendError> {
        self.post("/v1/embed/text", &serde_json::json!({ "texts": texts }))
    }

    fn embed_images(&self, locators: &[String]) -> Result<EmbedBatch, BackendError> {
        self.post("/v1/embed/image", &serde_json::json!({ "locators": locators }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_mapping() {
        let ok: Result<Health, _> = HttpBackend::interpret(
            200,
            r#"{"mode":"mock","embed_model":"e","chat_model":"c","dim":4}"#,
        );
        assert_eq!(ok.unwrap().dim, 4);
        let unready: Result<Health, _> = HttpBackend::interpret(503, "loading");
        assert!(matches!(unready, Err(BackendError::Unavailable(_))));
        let bad: Result<Health, _> = HttpBackend::interpret(400, "nope");
        assert!(matches!(bad, Err(BackendError::Rejected { status: 400, .. })));
        let garbage: Result<Health, _> = HttpBackend::interpret(200, "{");
        assert!(matches!(garbage, Err(BackendError::Protocol(_))));
    }

    #[test]
    fn unreachable_host_is_unavailable() {
        let b = HttpBackend::new("http://127.0.0.1:1");
        assert!(matches!(b.health(), Err(BackendError::Unavailable(_))));
    }

    #[test]
    fn image_parts_use_locators() {
        let mut locs = HashMap::new();
        locs.insert("img".to_string(), "/data/img.jpg".to_string());
        let b = HttpBackend::new("http://x").with_locators(locs);
        let m = ChatMessage {
            role: crate::prompting::Role::User,
            parts: vec![Part::Image("img".into()), Part::Text("t".into())],
        };
        let json = serde_json::to_value(b.wire_message(&m)).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"role":"user","parts":[{"type":"image","data":"/data/img.jpg"},{"type":"text","data":"t"}]})
        );
    }
}
