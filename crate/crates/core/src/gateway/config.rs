use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EndpointBackend {
    /// HTTP endpoint speaking the chat-completion wire format.
    Remote,
    /// Deterministic canned/echo responder.
    Stub,
    /// Deterministic band-aware embedding function.
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StubResponder {
    /// Canned map keyed by prompt hash; unknown prompts get the default response.
    Canned,
    /// Answers with the mean ground-truth force found in the prompt's experience blocks.
    EchoMean,
    /// Answers with the largest ground-truth force found in the prompt's experience blocks.
    EchoMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelEndpointConfig {
    pub backend: EndpointBackend,
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub temperature: f64,
    pub stub_responder: StubResponder,
    /// JSON object mapping prompt hash to response text.
    pub stub_canned_file: Option<PathBuf>,
    pub stub_default_response: String,
    pub mock_dimension: usize,
}

impl Default for ModelEndpointConfig {
    fn default() -> Self {
        Self {
            backend: EndpointBackend::Stub,
            base_url: String::new(),
            model_name: String::new(),
            api_key_env: String::new(),
            timeout_s: 60.0,
            max_retries: 3,
            temperature: 0.0,
            stub_responder: StubResponder::Canned,
            stub_canned_file: None,
            stub_default_response: String::new(),
            mock_dimension: 64,
        }
    }
}

impl ModelEndpointConfig {
    pub fn stub(responder: StubResponder, default_response: impl Into<String>) -> Self {
        Self {
            backend: EndpointBackend::Stub,
            model_name: "stub".into(),
            stub_responder: responder,
            stub_default_response: default_response.into(),
            ..Self::default()
        }
    }

    pub fn mock_embedding(dimension: usize) -> Self {
        Self {
            backend: EndpointBackend::Mock,
            model_name: "mock".into(),
            mock_dimension: dimension,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::InvalidConfig(m));
        if !(self.timeout_s.is_finite() && self.timeout_s > 0.0) {
            return bad(format!("timeout_s must be positive, got {}", self.timeout_s));
        }
        if self.max_retries > 5 {
            return bad(format!("max_retries must be at most 5, got {}", self.max_retries));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad(format!("temperature must be in [0, 2], got {}", self.temperature));
        }
        if self.backend == EndpointBackend::Remote {
            if self.base_url.is_empty() {
                return bad("remote endpoint needs base_url".into());
            }
            if self.api_key_env.is_empty() {
                return bad("remote endpoint needs api_key_env".into());
            }
        }
        Ok(())
    }
}

/// The `[endpoints]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointsConfig {
    pub descriptor: ModelEndpointConfig,
    pub predictor: ModelEndpointConfig,
    pub embedding: ModelEndpointConfig,
}

impl Default for EndpointsConfig {
    fn default() -> Self {
        Self {
            descriptor: ModelEndpointConfig::stub(
                StubResponder::Canned,
                "A compact rigid object with a smooth surface.",
            ),
            predictor: ModelEndpointConfig::stub(StubResponder::EchoMean, "FORCE_N: 2.0"),
            embedding: ModelEndpointConfig::mock_embedding(64),
        }
    }
}
