//! Unit-length embeddings and the deterministic token-hash stub embedder.

use serde::{Deserialize, Serialize};

use crate::error::GatewayError;

pub const STUB_DIMENSION: usize = 256;
pub const STUB_SEED: u64 = 0x5eed_0f_b0_7a11;

pub const UNIT_TOLERANCE: f64 = 1e-6;

/// An L2-normalized embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `raw` to unit length. Zero, empty and non-finite vectors
    /// have no direction and are rejected.
    pub fn normalize(raw: Vec<f64>) -> Result<Embedding, GatewayError> {
        if raw.is_empty() {
            return Err(GatewayError::InvalidArgument("empty embedding".into()));
        }
        if raw.iter().any(|x| !x.is_finite()) {
            return Err(GatewayError::InvalidArgument("non-finite embedding component".into()));
        }
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(GatewayError::InvalidArgument("zero vector has no embedding".into()));
        }
        Ok(Embedding(raw.into_iter().map(|x| x / norm).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        cosine(&self.0, &other.0)
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = String;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        let e = Embedding(v);
        if e.0.is_empty() || !e.is_unit() {
            return Err(format!("embedding is not unit length (norm {})", e.norm()));
        }
        Ok(e)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

/// `a·b / (‖a‖‖b‖)`, 0 when either side is zero or dimensions differ.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Seeded 64-bit FNV-1a.
fn seeded_fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Bag-of-hashed-tokens embedder used for offline runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StubEmbedder {
    pub dimension: usize,
    pub seed: u64,
}

impl Default for StubEmbedder {
    fn default() -> Self {
        Self {
            dimension: STUB_DIMENSION,
            seed: STUB_SEED,
        }
    }
}

impl StubEmbedder {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            ..Self::default()
        }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (seeded_fnv1a(self.seed, token.as_bytes()) % self.dimension as u64) as usize
    }

    /// Raw token counts per bucket, before normalization.
    pub fn counts(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        for token in tokenize(text) {
            v[self.bucket(&token)] += 1.0;
        }
        v
    }

    pub fn embed(&self, text: &str) -> Result<Embedding, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::InvalidArgument("empty text has no embedding".into()));
        }
        Embedding::normalize(self.counts(text)).map_err(|_| {
            GatewayError::InvalidArgument(format!("text {text:?} has no alphanumeric tokens"))
        })
    }
}
