use std::collections::BTreeMap;
use std::fs;
use std::sync::atomic::{AtomicUsize, Ordering};

use sha2::{Digest, Sha256};

use super::{ChatModel, GatewayError, ModelEndpointConfig, MultimodalMessage, Segment, StubResponder};
use crate::prompting::experience_forces;

/// SHA-256 over the assembled prompt, hex encoded. Every segment is tagged
/// and length-prefixed so distinct prompts cannot collide by concatenation.
pub fn prompt_hash(messages: &[MultimodalMessage]) -> String {
    let mut h = Sha256::new();
    for m in messages {
        h.update(b"M");
        for s in m.segments() {
            let (tag, bytes): (&[u8], &[u8]) = match s {
                Segment::Text(t) => (b"T", t.as_bytes()),
                Segment::Image(img) => (b"I", img.bytes()),
            };
            h.update(tag);
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        }
    }
    hex::encode(h.finalize())
}

/// Offline chat model with deterministic answers.
pub struct StubChatModel {
    responder: StubResponder,
    canned: BTreeMap<String, String>,
    default_response: String,
    calls: AtomicUsize,
}

impl StubChatModel {
    pub fn new(responder: StubResponder, default_response: impl Into<String>) -> Self {
        Self {
            responder,
            canned: BTreeMap::new(),
            default_response: default_response.into(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_canned(mut self, canned: BTreeMap<String, String>) -> Self {
        self.canned = canned;
        self
    }

    pub fn from_config(cfg: &ModelEndpointConfig) -> Result<Self, GatewayError> {
        let mut stub = Self::new(cfg.stub_responder, cfg.stub_default_response.clone());
        if let Some(path) = &cfg.stub_canned_file {
            let text = fs::read_to_string(path).map_err(|source| GatewayError::Io {
                path: path.clone(),
                source,
            })?;
            stub.canned = serde_json::from_str(&text)
                .map_err(|e| GatewayError::InvalidConfig(format!("{}: {e}", path.display())))?;
        }
        Ok(stub)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn respond(&self, messages: &[MultimodalMessage]) -> String {
        match self.responder {
            StubResponder::Canned => self
                .canned
                .get(&prompt_hash(messages))
                .cloned()
                .unwrap_or_else(|| self.default_response.clone()),
            StubResponder::EchoMean | StubResponder::EchoMax => {
                let forces = experience_forces(messages);
                if forces.is_empty() {
                    return self.default_response.clone();
                }
                let value = if self.responder == StubResponder::EchoMean {
                    forces.iter().sum::<f64>() / forces.len() as f64
                } else {
                    forces.iter().copied().fold(f64::MIN, f64::max)
                };
                format!("Based on the examples above.\nFORCE_N: {value}")
            }
        }
    }
}

impl ChatModel for StubChatModel {
    fn model_id(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.canned {
            h.update(k.as_bytes());
            h.update([0]);
            h.update(v.as_bytes());
            h.update([0]);
        }
        format!(
            "stub:{:?}:{}:{}",
            self.responder,
            hex::encode(Sha256::digest(self.default_response.as_bytes())),
            hex::encode(h.finalize())
        )
    }

    fn complete(&self, messages: &[MultimodalMessage]) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let text = self.respond(messages);
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyResponse);
        }
        Ok(text)
    }
}
