//! OpenAI-compatible HTTP backend.
//!
//! Chat goes to `{endpoint}/chat/completions` with images inlined as
//! base64 data URIs. Embeddings go to `{endpoint}/embeddings`; the
//! response may carry either a flat vector (treated as one token row) or
//! a nested token matrix, covering multi-vector embedding servers.
//! Timeouts and 5xx responses are retried up to `max_retries` with the
//! configured doubling backoff; 4xx responses fail immediately.

use std::time::{Duration, Instant};

use base64::Engine;
use serde_json::{json, Value};

use super::{
    BackendConfig, ChatRequest, ChatResponse, EmbedPayload, GatewayError, ResponseFormat, UserPart,
};
use crate::retrieval::MultiVectorEmbedding;

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    max_retries: u32,
    backoff: Vec<u64>,
}

enum AttemptError {
    /// Timeout or 5xx; eligible for retry.
    Retryable(String),
    /// 4xx; the request itself is wrong.
    Rejected { status: u16, body_excerpt: String },
    Malformed(String),
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, GatewayError> {
        let endpoint = config
            .endpoint_url
            .clone()
            .expect("validated by BackendConfig::validate");
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                GatewayError::InvalidConfig(format!(
                    "api key environment variable '{var}' is not set"
                ))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| GatewayError::InvalidConfig(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model: config.model_name.clone().expect("validated"),
            api_key,
            max_retries: config.max_retries,
            backoff: config.backoff_schedule(),
        })
    }

    fn post_with_retries(&self, url: &str, body: &Value) -> Result<Value, GatewayError> {
        let attempts = self.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let sleep_ms = self.backoff[(attempt - 1) as usize];
                log::debug!("retrying {url} after {sleep_ms} ms (attempt {})", attempt + 1);
                std::thread::sleep(Duration::from_millis(sleep_ms));
            }
            match self.post_once(url, body) {
                Ok(value) => return Ok(value),
                Err(AttemptError::Retryable(message)) => last_error = message,
                Err(AttemptError::Rejected {
                    status,
                    body_excerpt,
                }) => {
                    return Err(GatewayError::RequestRejected {
                        status,
                        body_excerpt,
                    })
                }
                Err(AttemptError::Malformed(m)) => return Err(GatewayError::MalformedResponse(m)),
            }
        }
        Err(GatewayError::BackendUnavailable {
            attempts,
            message: last_error,
        })
    }

    fn post_once(&self, url: &str, body: &Value) -> Result<Value, AttemptError> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| AttemptError::Retryable(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| AttemptError::Retryable(e.to_string()))?;
        if status.is_success() {
            serde_json::from_str(&text)
                .map_err(|e| AttemptError::Malformed(format!("invalid json body: {e}")))
        } else if status.is_server_error() {
            Err(AttemptError::Retryable(format!(
                "status {status}: {}",
                excerpt(&text)
            )))
        } else {
            Err(AttemptError::Rejected {
                status: status.as_u16(),
                body_excerpt: excerpt(&text),
            })
        }
    }

    pub fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let mut content = Vec::new();
        for part in &request.user_parts {
            match part {
                UserPart::Text { text } => {
                    content.push(json!({"type": "text", "text": text}));
                }
                UserPart::Image { path, .. } => {
                    let bytes = std::fs::read(path).map_err(|e| {
                        GatewayError::InvalidRequest(format!(
                            "cannot read image {}: {e}",
                            path.display()
                        ))
                    })?;
                    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
                    content.push(json!({
                        "type": "image_url",
                        "image_url": {"url": format!("data:image/png;base64,{encoded}")}
                    }));
                }
            }
        }
        let mut body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": content}
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if request.response_format == ResponseFormat::Json {
            body["response_format"] = json!({"type": "json_object"});
        }
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }

        let started = Instant::now();
        let url = format!("{}/chat/completions", self.endpoint);
        let value = self.post_with_retries(&url, &body)?;
        let latency_ms = started.elapsed().as_millis() as u64;

        let choice = value
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| GatewayError::MalformedResponse("missing choices[0]".into()))?;
        let text = choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        let truncated = choice
            .get("finish_reason")
            .and_then(Value::as_str)
            .map(|r| r == "length")
            .unwrap_or(false);
        let model_id = value
            .get("model")
            .and_then(Value::as_str)
            .unwrap_or(&self.model)
            .to_string();
        Ok(ChatResponse {
            text,
            model_id,
            latency_ms,
            truncated,
        })
    }

    pub fn embed(&self, payload: &EmbedPayload) -> Result<MultiVectorEmbedding, GatewayError> {
        let input = match payload {
            EmbedPayload::Text { text, .. } => json!(text),
            EmbedPayload::Image { path, .. } => {
                let bytes = std::fs::read(path).map_err(|e| {
                    GatewayError::InvalidRequest(format!(
                        "cannot read image {}: {e}",
                        path.display()
                    ))
                })?;
                let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
                json!(format!("data:image/png;base64,{encoded}"))
            }
        };
        let body = json!({"model": self.model, "input": [input]});
        let url = format!("{}/embeddings", self.endpoint);
        let value = self.post_with_retries(&url, &body)?;
        let embedding = value
            .pointer("/data/0/embedding")
            .ok_or_else(|| GatewayError::MalformedResponse("missing data[0].embedding".into()))?;
        parse_embedding(embedding)
    }
}

/// Accept `[f, f, ...]` as a single row or `[[f, ...], ...]` as a token
/// matrix.
fn parse_embedding(value: &Value) -> Result<MultiVectorEmbedding, GatewayError> {
    let arr = value
        .as_array()
        .ok_or_else(|| GatewayError::MalformedResponse("embedding is not an array".into()))?;
    if arr.is_empty() {
        return Err(GatewayError::MalformedResponse("embedding is empty".into()));
    }
    let rows: Vec<Vec<f64>> = if arr[0].is_array() {
        arr.iter()
            .map(|row| {
                row.as_array()
                    .ok_or_else(|| {
                        GatewayError::MalformedResponse("ragged embedding matrix".into())
                    })?
                    .iter()
                    .map(|v| {
                        v.as_f64().ok_or_else(|| {
                            GatewayError::MalformedResponse("non-numeric embedding entry".into())
                        })
                    })
                    .collect()
            })
            .collect::<Result<_, _>>()?
    } else {
        vec![arr
            .iter()
            .map(|v| {
                v.as_f64().ok_or_else(|| {
                    GatewayError::MalformedResponse("non-numeric embedding entry".into())
                })
            })
            .collect::<Result<_, _>>()?]
    };
    MultiVectorEmbedding::from_rows(&rows, false)
        .map_err(|e| GatewayError::MalformedResponse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_embedding_flat_and_nested() {
        let flat = json!([0.1, 0.2, 0.3]);
        let e = parse_embedding(&flat).unwrap();
        assert_eq!((e.token_count(), e.dim()), (1, 3));

        let nested = json!([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]]);
        let e = parse_embedding(&nested).unwrap();
        assert_eq!((e.token_count(), e.dim()), (3, 2));

        assert!(parse_embedding(&json!([])).is_err());
        assert!(parse_embedding(&json!("nope")).is_err());
    }
}
