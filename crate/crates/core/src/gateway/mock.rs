use std::f64::consts::FRAC_PI_2;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use sha2::{Digest, Sha256};

use super::{EmbeddingProvider, EmbeddingVector, GatewayError};

/// Angle advanced per band. 128 bands span a quarter turn, so cosine between
/// band blocks decreases monotonically with band distance.
const BAND_ANGLE: f64 = FRAC_PI_2 / 128.0;
const NOISE_WEIGHT: f64 = 0.005;
pub(crate) const MIN_DIMENSION: usize = 8;

fn band_regexes() -> &'static (Regex, Regex) {
    static RE: OnceLock<(Regex, Regex)> = OnceLock::new();
    RE.get_or_init(|| {
        (
            Regex::new(r"mass band (\d+)").unwrap(),
            Regex::new(r"grip band (\d+)").unwrap(),
        )
    })
}

fn parse_band(re: &Regex, text: &str) -> Option<u32> {
    re.captures(text).and_then(|c| c[1].parse().ok())
}

/// Deterministic stand-in for a multimodal embedding model.
///
/// Layout: `[mass block (2) | grip block (2) | bag-of-words | noise]`.
/// Descriptions carrying `mass band N` / `grip band N` tokens are encoded
/// as angles on the two band blocks and the bag-of-words block stays empty;
/// other descriptions fall back to hashed bag-of-words. The noise block is
/// seeded from a hash of the image and description.
#[derive(Debug, Clone)]
pub struct MockEmbeddingProvider {
    dimension: usize,
    id: String,
}

impl MockEmbeddingProvider {
    pub fn new(dimension: usize) -> Result<Self, GatewayError> {
        if dimension < MIN_DIMENSION {
            return Err(GatewayError::InvalidConfig(format!(
                "mock embedding dimension must be at least {MIN_DIMENSION}"
            )));
        }
        Ok(Self {
            dimension,
            id: format!("mock-v1-d{dimension}"),
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    fn bow_len(&self) -> usize {
        (self.dimension - 4) / 2
    }
}

fn unit(block: &mut [f64]) {
    let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        block.iter_mut().for_each(|v| *v /= norm);
    }
}

impl EmbeddingProvider for MockEmbeddingProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn embed(&self, image: &[u8], description: &str) -> Result<EmbeddingVector, GatewayError> {
        if image.is_empty() && description.trim().is_empty() {
            return Err(GatewayError::ProviderError("nothing to embed".into()));
        }
        let mut v = vec![0.0; self.dimension];
        let (mass_re, grip_re) = band_regexes();
        let mass = parse_band(mass_re, description);
        let grip = parse_band(grip_re, description);

        if let Some(b) = mass {
            let a = f64::from(b) * BAND_ANGLE;
            v[0] = a.cos();
            v[1] = a.sin();
        }
        if let Some(b) = grip {
            let a = f64::from(b) * BAND_ANGLE;
            v[2] = a.cos();
            v[3] = a.sin();
        }

        let bow_end = 4 + self.bow_len();
        if mass.is_none() && grip.is_none() {
            let bow = &mut v[4..bow_end];
            for token in description
                .split(|c: char| !c.is_alphanumeric())
                .filter(|t| !t.is_empty())
            {
                let h = Sha256::digest(token.to_lowercase().as_bytes());
                let idx = u64::from_le_bytes(h[..8].try_into().unwrap()) as usize % bow.len();
                let sign = if h[8] & 1 == 0 { 1.0 } else { -1.0 };
                bow[idx] += sign;
            }
            unit(bow);
        }

        let mut hasher = Sha256::new();
        hasher.update((image.len() as u64).to_le_bytes());
        hasher.update(image);
        hasher.update(description.as_bytes());
        let seed: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let noise = &mut v[bow_end..];
        noise
            .iter_mut()
            .for_each(|x| *x = rng.random_range(-1.0..1.0));
        unit(noise);
        noise.iter_mut().for_each(|x| *x *= NOISE_WEIGHT);

        EmbeddingVector::new(v, self.id.clone())
    }
}
