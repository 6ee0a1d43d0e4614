//! Access to the descriptor/predictor chat models and the embedding provider.
//!
//! Remote endpoints speak a chat-completion style JSON protocol (see
//! `docs/wire.md`). Deterministic stand-ins ([`StubChatModel`],
//! [`MockEmbeddingProvider`]) let the whole pipeline run without network
//! access, and [`EmbeddingCache`] keeps embeddings on disk keyed by a hash of
//! their inputs.

mod cache;
mod config;
mod message;
mod mock;
mod remote;
mod stub;

use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

pub use cache::{cache_key, CacheStatus, CachedEmbeddingProvider, EmbeddingCache};
pub use config::{EndpointBackend, EndpointsConfig, ModelEndpointConfig, StubResponder};
pub use message::{media_type_of, EmbeddingVector, ImageData, MultimodalMessage, Segment};
pub use mock::MockEmbeddingProvider;
pub use remote::{
    chat_request_body, embedding_request_body, HttpReply, HttpTransport, RemoteChatModel,
    RemoteEmbeddingProvider, RetryPolicy, UreqTransport,
};
pub use stub::{prompt_hash, StubChatModel};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("environment variable {0} holding the API key is not set")]
    AuthMissing(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    TransportError { attempts: u32, message: String },
    #[error("model refused to answer: {0}")]
    ModelRefusal(String),
    #[error("model returned an empty response")]
    EmptyResponse,
    #[error("embedding provider error: {0}")]
    ProviderError(String),
    #[error("embedding is the zero vector")]
    ZeroVector,
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("corrupt cache entry {0}")]
    CacheCorruption(PathBuf),
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error("invalid endpoint config: {0}")]
    InvalidConfig(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A text-producing multimodal model (descriptor or predictor role).
pub trait ChatModel: Send + Sync {
    /// Identity folded into run fingerprints.
    fn model_id(&self) -> String;
    fn complete(&self, messages: &[MultimodalMessage]) -> Result<String, GatewayError>;
}

/// Maps (image, description) to an embedding vector.
pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn embed(&self, image: &[u8], description: &str) -> Result<EmbeddingVector, GatewayError>;
}

impl<T: ChatModel + ?Sized> ChatModel for Arc<T> {
    fn model_id(&self) -> String {
        (**self).model_id()
    }
    fn complete(&self, messages: &[MultimodalMessage]) -> Result<String, GatewayError> {
        (**self).complete(messages)
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for Arc<T> {
    fn provider_id(&self) -> &str {
        (**self).provider_id()
    }
    fn embed(&self, image: &[u8], description: &str) -> Result<EmbeddingVector, GatewayError> {
        (**self).embed(image, description)
    }
}

/// Builds the chat model an endpoint config describes.
pub fn build_chat_model(cfg: &ModelEndpointConfig) -> Result<Arc<dyn ChatModel>, GatewayError> {
    cfg.validate()?;
    match cfg.backend {
        EndpointBackend::Remote => Ok(Arc::new(RemoteChatModel::new(
            cfg.clone(),
            Arc::new(UreqTransport),
        ))),
        EndpointBackend::Stub => Ok(Arc::new(StubChatModel::from_config(cfg)?)),
        EndpointBackend::Mock => Err(GatewayError::InvalidConfig(
            "the mock backend only provides embeddings".into(),
        )),
    }
}

/// Builds the embedding provider an endpoint config describes.
pub fn build_embedding_provider(
    cfg: &ModelEndpointConfig,
) -> Result<Arc<dyn EmbeddingProvider>, GatewayError> {
    cfg.validate()?;
    match cfg.backend {
        EndpointBackend::Remote => Ok(Arc::new(RemoteEmbeddingProvider::new(
            cfg.clone(),
            Arc::new(UreqTransport),
        ))),
        EndpointBackend::Mock | EndpointBackend::Stub => {
            Ok(Arc::new(MockEmbeddingProvider::new(cfg.mock_dimension)?))
        }
    }
}

/// One-shot completion against the endpoint described by `cfg`.
pub fn complete(cfg: &ModelEndpointConfig, messages: &[MultimodalMessage]) -> Result<String, GatewayError> {
    build_chat_model(cfg)?.complete(messages)
}

/// Embeds with `provider`, going through `cache` when one is given.
pub fn embed(
    provider: &dyn EmbeddingProvider,
    cache: Option<&EmbeddingCache>,
    image: &[u8],
    description: &str,
) -> Result<EmbeddingVector, GatewayError> {
    if image.is_empty() && description.trim().is_empty() {
        return Err(GatewayError::ProviderError(
            "need a description or an image to embed".into(),
        ));
    }
    match cache {
        Some(cache) => cache
            .get_or_compute(provider.provider_id(), image, description, || {
                provider.embed(image, description)
            })
            .map(|(v, _)| v),
        None => provider.embed(image, description),
    }
}
