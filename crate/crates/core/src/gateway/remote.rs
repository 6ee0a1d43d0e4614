use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde_json::{json, Value};

use super::{
    ChatModel, EmbeddingProvider, EmbeddingVector, GatewayError, ModelEndpointConfig,
    MultimodalMessage, Segment,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// Minimal JSON-over-HTTP POST. Errors are connection-level failures only;
/// HTTP error statuses come back as replies.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        api_key: &str,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, String>;
}

pub struct UreqTransport;

impl HttpTransport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        api_key: &str,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let payload = serde_json::to_string(body).map_err(|e| e.to_string())?;
        let mut resp = agent
            .post(url)
            .header("Authorization", &format!("Bearer {api_key}"))
            .header("Content-Type", "application/json")
            .send(payload.as_bytes())
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Delay before the first retry; doubles on each further retry.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_delay: Duration::from_millis(500),
        }
    }
}

fn content_parts(messages: &[MultimodalMessage]) -> Vec<Value> {
    messages
        .iter()
        .map(|m| {
            let parts: Vec<Value> = m
                .segments()
                .iter()
                .map(|s| match s {
                    Segment::Text(t) => json!({ "type": "text", "text": t }),
                    Segment::Image(img) => json!({
                        "type": "image",
                        "media_type": img.media_type(),
                        "data": BASE64.encode(img.bytes()),
                    }),
                })
                .collect();
            json!({ "role": "user", "content": parts })
        })
        .collect()
}

/// Request body for `POST {base_url}/chat/completions`.
pub fn chat_request_body(cfg: &ModelEndpointConfig, messages: &[MultimodalMessage]) -> Value {
    json!({
        "model": cfg.model_name,
        "temperature": cfg.temperature,
        "messages": content_parts(messages),
    })
}

/// Request body for `POST {base_url}/embeddings`.
pub fn embedding_request_body(cfg: &ModelEndpointConfig, image: &[u8], description: &str) -> Value {
    let mut input = Vec::new();
    if !description.is_empty() {
        input.push(json!({ "type": "text", "text": description }));
    }
    if !image.is_empty() {
        input.push(json!({
            "type": "image",
            "media_type": super::media_type_of(image),
            "data": BASE64.encode(image),
        }));
    }
    json!({ "model": cfg.model_name, "input": input })
}

fn endpoint_url(base: &str, path: &str) -> String {
    format!("{}/{path}", base.trim_end_matches('/'))
}

fn is_transient(status: u16) -> bool {
    status == 408 || status == 429 || (500..600).contains(&status)
}

/// Shared POST-with-retries used by both remote clients.
struct Poster {
    cfg: ModelEndpointConfig,
    transport: Arc<dyn HttpTransport>,
    retry: RetryPolicy,
    retries: AtomicU64,
}

impl Poster {
    fn api_key(&self) -> Result<String, GatewayError> {
        match std::env::var(&self.cfg.api_key_env) {
            Ok(k) if !k.trim().is_empty() => Ok(k),
            _ => Err(GatewayError::AuthMissing(self.cfg.api_key_env.clone())),
        }
    }

    fn post(&self, path: &str, body: &Value) -> Result<String, GatewayError> {
        let key = self.api_key()?;
        let url = endpoint_url(&self.cfg.base_url, path);
        let timeout = Duration::from_secs_f64(self.cfg.timeout_s);
        let max_attempts = self.cfg.max_retries + 1;
        let mut last_failure = String::new();
        for attempt in 0..max_attempts {
            if attempt > 0 {
                self.retries.fetch_add(1, Ordering::Relaxed);
                std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt - 1));
            }
            match self.transport.post_json(&url, &key, body, timeout) {
                Ok(reply) if (200..300).contains(&reply.status) => return Ok(reply.body),
                Ok(reply) if is_transient(reply.status) => {
                    log::warn!("{url}: HTTP {} (attempt {})", reply.status, attempt + 1);
                    last_failure = format!("HTTP {}: {}", reply.status, reply.body);
                }
                Ok(reply) if reply.status == 401 || reply.status == 403 => {
                    return Err(GatewayError::TransportError {
                        attempts: attempt + 1,
                        message: format!("HTTP {}: credentials rejected", reply.status),
                    });
                }
                Ok(reply) => {
                    return Err(GatewayError::TransportError {
                        attempts: attempt + 1,
                        message: format!("HTTP {}: {}", reply.status, reply.body),
                    });
                }
                Err(e) => {
                    log::warn!("{url}: {e} (attempt {})", attempt + 1);
                    last_failure = e;
                }
            }
        }
        Err(GatewayError::TransportError {
            attempts: max_attempts,
            message: last_failure,
        })
    }
}

/// Chat-completion client for a remote descriptor or predictor model.
pub struct RemoteChatModel {
    poster: Poster,
}

impl RemoteChatModel {
    pub fn new(cfg: ModelEndpointConfig, transport: Arc<dyn HttpTransport>) -> Self {
        Self::with_retry(cfg, transport, RetryPolicy::default())
    }

    pub fn with_retry(
        cfg: ModelEndpointConfig,
        transport: Arc<dyn HttpTransport>,
        retry: RetryPolicy,
    ) -> Self {
        Self {
            poster: Poster {
                cfg,
                transport,
                retry,
                retries: AtomicU64::new(0),
            },
        }
    }

    /// Retries issued over this client's lifetime.
    pub fn retries(&self) -> u64 {
        self.poster.retries.load(Ordering::Relaxed)
    }
}

fn extract_chat_text(body: &str) -> Result<String, GatewayError> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| GatewayError::ModelRefusal(format!("unreadable response: {e}")))?;
    let choice = &v["choices"][0];
    if choice["finish_reason"] == "content_filter" {
        return Err(GatewayError::ModelRefusal("content filtered".into()));
    }
    let content = &choice["message"]["content"];
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join(""),
        _ => String::new(),
    };
    if text.trim().is_empty() {
        return Err(match choice["message"]["refusal"].as_str() {
            Some(r) => GatewayError::ModelRefusal(r.to_string()),
            None => GatewayError::EmptyResponse,
        });
    }
    Ok(text)
}

impl ChatModel for RemoteChatModel {
    fn model_id(&self) -> String {
        format!(
            "remote:{}@{}:t={}",
            self.poster.cfg.model_name, self.poster.cfg.base_url, self.poster.cfg.temperature
        )
    }

    fn complete(&self, messages: &[MultimodalMessage]) -> Result<String, GatewayError> {
        let body = chat_request_body(&self.poster.cfg, messages);
        let reply = self.poster.post("chat/completions", &body)?;
        extract_chat_text(&reply)
    }
}

/// Remote embedding endpoint. The dimension is whatever the provider
/// reports first; later vectors of another length are rejected.
pub struct RemoteEmbeddingProvider {
    poster: Poster,
    id: String,
    dim: AtomicUsize,
}

impl RemoteEmbeddingProvider {
    pub fn new(cfg: ModelEndpointConfig, transport: Arc<dyn HttpTransport>) -> Self {
        Self::with_retry(cfg, transport, RetryPolicy::default())
    }

    pub fn with_retry(
        cfg: ModelEndpointConfig,
        transport: Arc<dyn HttpTransport>,
        retry: RetryPolicy,
    ) -> Self {
        let id = format!("remote:{}@{}", cfg.model_name, cfg.base_url);
        Self {
            poster: Poster {
                cfg,
                transport,
                retry,
                retries: AtomicU64::new(0),
            },
            id,
            dim: AtomicUsize::new(0),
        }
    }

    /// Dimension seen so far, zero before the first call.
    pub fn dimension(&self) -> usize {
        self.dim.load(Ordering::Relaxed)
    }
}

impl EmbeddingProvider for RemoteEmbeddingProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn embed(&self, image: &[u8], description: &str) -> Result<EmbeddingVector, GatewayError> {
        let body = embedding_request_body(&self.poster.cfg, image, description);
        let reply = self.poster.post("embeddings", &body)?;
        let v: Value = serde_json::from_str(&reply)
            .map_err(|e| GatewayError::ProviderError(format!("unreadable response: {e}")))?;
        let values: Vec<f64> = v["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| GatewayError::ProviderError("response has no data[0].embedding".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| GatewayError::ProviderError("non-numeric entry".into())))
            .collect::<Result<_, _>>()?;
        let got = values.len();
        match self
            .dim
            .compare_exchange(0, got, Ordering::AcqRel, Ordering::Acquire)
        {
            Ok(_) => {}
            Err(expected) if expected == got => {}
            Err(expected) => return Err(GatewayError::DimensionMismatch { expected, got }),
        }
        EmbeddingVector::new(values, self.id.clone())
    }
}
