//! Single abstraction over all model calls: chat/vision completions and
//! multi-vector embedding.
//!
//! Two backends implement the same surface. The mock backend replays
//! scripted fixtures keyed by a stable request fingerprint and is a pure
//! function of (scenario, request), which makes every offline run and the
//! whole test suite deterministic. The HTTP backend speaks the
//! chat-completions wire format against any compatible endpoint, with
//! retries on timeouts and server errors.

mod http;
mod mock;

pub use mock::{MockBackend, Scenario};

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::retrieval::MultiVectorEmbedding;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("backend unavailable after {attempts} attempts: {message}")]
    BackendUnavailable { attempts: u32, message: String },
    #[error("request rejected with status {status}: {body_excerpt}")]
    RequestRejected { status: u16, body_excerpt: String },
    #[error("no fixture for {kind} {key} in scenario '{scenario}'")]
    FixtureMissing {
        scenario: String,
        kind: &'static str,
        key: String,
    },
    #[error("fixture file error: {0}")]
    FixtureFile(String),
    #[error("backend returned malformed payload: {0}")]
    MalformedResponse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// How the model is asked to shape its reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResponseFormat {
    #[default]
    Free,
    Json,
}

/// One block of user content: text, or an image attachment identified by
/// a stable id (the id, not the bytes, participates in fingerprinting).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UserPart {
    Text { text: String },
    Image { id: String, path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_parts: Vec<UserPart>,
    pub response_format: ResponseFormat,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(system_prompt: impl Into<String>) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_parts: Vec::new(),
            response_format: ResponseFormat::Free,
            temperature: 0.0,
            seed: None,
            max_tokens: 2048,
        }
    }

    pub fn text(mut self, text: impl Into<String>) -> Self {
        self.user_parts.push(UserPart::Text { text: text.into() });
        self
    }

    pub fn image(mut self, id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        self.user_parts.push(UserPart::Image {
            id: id.into(),
            path: path.into(),
        });
        self
    }

    pub fn json(mut self) -> Self {
        self.response_format = ResponseFormat::Json;
        self
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.user_parts.is_empty() {
            return Err(GatewayError::InvalidRequest(
                "a chat request needs at least one user part".into(),
            ));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} must be finite and >= 0",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Stable fingerprint over (system prompt, user text in order, image
    /// ids in order). Decoding parameters and image bytes are excluded so
    /// fixtures survive cosmetic request-assembly changes.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"docqa-fp-v1\x00");
        hasher.update(self.system_prompt.as_bytes());
        hasher.update([0u8]);
        for part in &self.user_parts {
            match part {
                UserPart::Text { text } => {
                    hasher.update(b"T:");
                    hasher.update(text.as_bytes());
                }
                UserPart::Image { id, .. } => {
                    hasher.update(b"I:");
                    hasher.update(id.as_bytes());
                }
            }
            hasher.update([0x1f]);
        }
        let digest = hasher.finalize();
        hex_prefix(&digest, 16)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub model_id: String,
    pub latency_ms: u64,
    pub truncated: bool,
}

/// Payload for multi-vector embedding: the page image or query text plus
/// a stable identity used for fixture lookup and transcripts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedPayload {
    Text { id: String, text: String },
    Image { id: String, path: PathBuf },
}

impl EmbedPayload {
    pub fn id(&self) -> &str {
        match self {
            EmbedPayload::Text { id, .. } | EmbedPayload::Image { id, .. } => id,
        }
    }

    pub fn query(text: impl Into<String>) -> Self {
        let text = text.into();
        EmbedPayload::Text {
            id: format!("query:{text}"),
            text,
        }
    }
}

/// Stable payload id for a page image.
pub fn page_payload_id(doc_id: &str, page_no: u32) -> String {
    format!("{doc_id}/p{page_no:04}")
}

/// Stable payload id for the cropped variant of a page image.
pub fn crop_payload_id(doc_id: &str, page_no: u32) -> String {
    format!("{doc_id}/p{page_no:04}/crop")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Http,
}

/// Declarative backend selection. The API key is read from the named
/// environment variable at call time; it never lives in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub fixtures_dir: Option<PathBuf>,
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_retry_backoff_ms")]
    pub retry_backoff_ms: u64,
}

fn default_timeout_ms() -> u64 {
    120_000
}
fn default_max_retries() -> u32 {
    2
}
fn default_retry_backoff_ms() -> u64 {
    1_000
}

impl BackendConfig {
    pub fn mock(fixtures_dir: impl Into<PathBuf>, scenario: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint_url: None,
            model_name: None,
            api_key_env: None,
            fixtures_dir: Some(fixtures_dir.into()),
            scenario: Some(scenario.into()),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            retry_backoff_ms: default_retry_backoff_ms(),
        }
    }

    pub fn http(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Http,
            endpoint_url: Some(endpoint_url.into()),
            model_name: Some(model_name.into()),
            api_key_env: None,
            fixtures_dir: None,
            scenario: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            retry_backoff_ms: default_retry_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        match self.kind {
            BackendKind::Http => {
                if self.endpoint_url.is_none() || self.model_name.is_none() {
                    return Err(GatewayError::InvalidConfig(
                        "http backend requires endpoint_url and model_name".into(),
                    ));
                }
            }
            BackendKind::Mock => {
                if self.fixtures_dir.is_none() || self.scenario.is_none() {
                    return Err(GatewayError::InvalidConfig(
                        "mock backend requires fixtures_dir and scenario".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Sleep durations between attempts: `retry_backoff_ms` doubling per
    /// retry, one entry per allowed retry.
    pub fn backoff_schedule(&self) -> Vec<u64> {
        (0..self.max_retries)
            .map(|i| self.retry_backoff_ms << i)
            .collect()
    }
}

/// One logged gateway exchange.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TranscriptEntry {
    Chat {
        fingerprint: String,
        request: ChatRequest,
        response_text: String,
    },
    Embed {
        payload_id: String,
        token_count: usize,
        dim: usize,
    },
}

/// Append-only log of every outbound request and its response. Appends
/// are serialized; an optional JSONL sink mirrors the in-memory log.
#[derive(Debug, Default)]
pub struct Transcript {
    entries: Mutex<Vec<TranscriptEntry>>,
    sink: Option<Mutex<std::fs::File>>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_sink(path: &Path) -> Result<Self, GatewayError> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(Self {
            entries: Mutex::new(Vec::new()),
            sink: Some(Mutex::new(file)),
        })
    }

    fn record(&self, entry: TranscriptEntry) {
        if let Some(sink) = &self.sink {
            use std::io::Write;
            let mut file = sink.lock().expect("transcript sink poisoned");
            if let Ok(line) = serde_json::to_string(&entry) {
                let _ = writeln!(file, "{line}");
            }
        }
        self.entries
            .lock()
            .expect("transcript log poisoned")
            .push(entry);
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.entries.lock().expect("transcript log poisoned").clone()
    }
}

enum Backend {
    Mock(MockBackend),
    Http(http::HttpBackend),
}

/// Facade over one configured backend plus the run transcript.
pub struct Gateway {
    backend: Backend,
    transcript: Transcript,
}

impl Gateway {
    pub fn from_config(config: &BackendConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let backend = match config.kind {
            BackendKind::Mock => {
                let dir = config.fixtures_dir.as_ref().expect("validated");
                let scenario_id = config.scenario.as_ref().expect("validated");
                let scenario = Scenario::load(dir, scenario_id)?;
                Backend::Mock(MockBackend::new(scenario))
            }
            BackendKind::Http => Backend::Http(http::HttpBackend::new(config)?),
        };
        Ok(Self {
            backend,
            transcript: Transcript::new(),
        })
    }

    /// Gateway over an in-memory scenario; the usual constructor in tests.
    pub fn with_mock(scenario: Scenario) -> Self {
        Self {
            backend: Backend::Mock(MockBackend::new(scenario)),
            transcript: Transcript::new(),
        }
    }

    pub fn set_transcript(&mut self, transcript: Transcript) {
        self.transcript = transcript;
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let response = match &self.backend {
            Backend::Mock(mock) => mock.chat(request),
            Backend::Http(http) => http.chat(request),
        }?;
        self.transcript.record(TranscriptEntry::Chat {
            fingerprint: request.fingerprint(),
            request: request.clone(),
            response_text: response.text.clone(),
        });
        Ok(response)
    }

    pub fn embed_multivector(
        &self,
        payload: &EmbedPayload,
    ) -> Result<MultiVectorEmbedding, GatewayError> {
        let embedding = match &self.backend {
            Backend::Mock(mock) => mock.embed(payload),
            Backend::Http(http) => http.embed(payload),
        }?;
        self.transcript.record(TranscriptEntry::Embed {
            payload_id: payload.id().to_string(),
            token_count: embedding.token_count(),
            dim: embedding.dim(),
        });
        Ok(embedding)
    }
}

pub(crate) fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes
        .iter()
        .take(n)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Stable 32-byte seed derived from a labeled tuple of strings and
/// integers; the basis for every seeded shuffle and mock embedding.
pub fn stable_seed(label: &str, parts: &[&str], numbers: &[u64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(label.as_bytes());
    hasher.update([0u8]);
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0x1f]);
    }
    for n in numbers {
        hasher.update(n.to_le_bytes());
    }
    hasher.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_ignores_decoding_params_and_image_bytes() {
        let a = ChatRequest::new("sys")
            .text("hello")
            .image("img1", "/tmp/a.png");
        let mut b = a.clone();
        b.temperature = 0.0;
        b.max_tokens = 9999;
        b.seed = Some(7);
        b.user_parts[1] = UserPart::Image {
            id: "img1".into(),
            path: "/elsewhere/b.png".into(),
        };
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn fingerprint_sensitive_to_content_and_order() {
        let a = ChatRequest::new("sys").text("x").text("y");
        let b = ChatRequest::new("sys").text("y").text("x");
        let c = ChatRequest::new("sys").text("x").text("z");
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn request_validation() {
        let empty = ChatRequest::new("sys");
        assert!(empty.validate().is_err());
        let mut bad_temp = ChatRequest::new("sys").text("x");
        bad_temp.temperature = f64::NAN;
        assert!(bad_temp.validate().is_err());
    }

    #[test]
    fn http_config_requires_endpoint_and_model() {
        let mut cfg = BackendConfig::http("http://localhost:1", "m");
        assert!(cfg.validate().is_ok());
        cfg.model_name = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn backoff_doubles_per_retry() {
        let mut cfg = BackendConfig::http("http://localhost:1", "m");
        cfg.retry_backoff_ms = 1000;
        cfg.max_retries = 3;
        assert_eq!(cfg.backoff_schedule(), vec![1000, 2000, 4000]);
        cfg.max_retries = 0;
        assert!(cfg.backoff_schedule().is_empty());
    }

    #[test]
    fn stable_seed_is_stable() {
        let a = stable_seed("l", &["q1"], &[1, 42]);
        let b = stable_seed("l", &["q1"], &[1, 42]);
        let c = stable_seed("l", &["q1"], &[2, 42]);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
