use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::GatewayError;

/// Opaque image bytes plus the media type sniffed from their signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageData {
    bytes: Arc<[u8]>,
}

impl ImageData {
    pub fn new(bytes: impl Into<Arc<[u8]>>) -> Self {
        Self {
            bytes: bytes.into(),
        }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn media_type(&self) -> &'static str {
        media_type_of(&self.bytes)
    }
}

pub fn media_type_of(bytes: &[u8]) -> &'static str {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        "image/png"
    } else if bytes.starts_with(&[0xff, 0xd8, 0xff]) {
        "image/jpeg"
    } else {
        "application/octet-stream"
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Text(String),
    Image(ImageData),
}

impl Segment {
    pub fn text(s: impl Into<String>) -> Self {
        Segment::Text(s.into())
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Segment::Text(t) => Some(t),
            Segment::Image(_) => None,
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, Segment::Image(_))
    }
}

/// An ordered run of text and image segments sent as one user turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultimodalMessage {
    segments: Vec<Segment>,
}

impl MultimodalMessage {
    pub fn new(segments: Vec<Segment>) -> Result<Self, GatewayError> {
        if segments.is_empty() {
            return Err(GatewayError::InvalidMessage("message has no segments".into()));
        }
        if segments
            .iter()
            .any(|s| matches!(s, Segment::Image(img) if img.is_empty()))
        {
            return Err(GatewayError::InvalidMessage("empty image payload".into()));
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(Segment::as_text)
    }
}

/// A d-dimensional embedding with finite entries and non-zero norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    provider_id: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, provider_id: impl Into<String>) -> Result<Self, GatewayError> {
        if values.is_empty() {
            return Err(GatewayError::ProviderError("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GatewayError::ProviderError("non-finite embedding entry".into()));
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(GatewayError::ZeroVector);
        }
        Ok(Self {
            values,
            provider_id: provider_id.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Copy scaled by `factor`; errors if that produces a zero or non-finite vector.
    pub fn scaled(&self, factor: f64) -> Result<Self, GatewayError> {
        Self::new(
            self.values.iter().map(|v| v * factor).collect(),
            self.provider_id.clone(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_vector_rejected() {
        assert!(matches!(
            EmbeddingVector::new(vec![0.0, 0.0], "p"),
            Err(GatewayError::ZeroVector)
        ));
        assert!(EmbeddingVector::new(vec![f64::NAN, 1.0], "p").is_err());
    }

    #[test]
    fn message_invariants() {
        assert!(MultimodalMessage::new(vec![]).is_err());
        assert!(MultimodalMessage::new(vec![Segment::Image(ImageData::new(Vec::new()))]).is_err());
        assert!(MultimodalMessage::new(vec![Segment::text("hi")]).is_ok());
    }

    #[test]
    fn media_types() {
        assert_eq!(media_type_of(b"\x89PNG\r\n\x1a\nrest"), "image/png");
        assert_eq!(media_type_of(&[0xff, 0xd8, 0xff, 0xe0]), "image/jpeg");
        assert_eq!(media_type_of(b"GIF89a"), "application/octet-stream");
    }
}
