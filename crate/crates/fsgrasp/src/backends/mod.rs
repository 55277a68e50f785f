//! Pluggable zero-shot segmentator and few-shot embedder interfaces.
//!
//! Real foundation models never run in-process: they are either mocked
//! (oracle and heuristic backends in [`mocks`]) or ingested from files of
//! precomputed outputs ([`cache`]), mirroring offline mask extraction.

pub mod cache;
pub mod mocks;

use crate::image::{BinaryMask, RgbImage, RgbdImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default embedding dimension for mocks where the dimension is free.
pub const DEFAULT_EMBED_DIM: usize = 384;
/// Soft-map threshold at which a candidate mask is discretized.
pub const MASK_THRESHOLD: f32 = 0.5;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("no cache entry for content key {key}")]
    CacheMiss { key: String },
    #[error("backend does not recognize this image (content key {key})")]
    UnknownImage { key: String },
    #[error("crop has no foreground pixels")]
    EmptyCrop,
    #[error("embedding vector has zero norm")]
    ZeroNorm,
    #[error("cache record {record}: {message}")]
    Malformed { record: usize, message: String },
    #[error("cache record {record}: dimension {found} does not match dimension {expected} of earlier records")]
    DimensionMismatch {
        record: usize,
        expected: usize,
        found: usize,
    },
    #[error("cache record {record}: duplicate key {key}")]
    DuplicateKey { record: usize, key: String },
    #[error("soft map disagrees with mask at pixel {index} under the {MASK_THRESHOLD} threshold")]
    SoftMaskDisagreement { index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Candidate mask with its pre-discretization confidence map.
#[derive(Debug, Clone)]
pub struct ScoredMask {
    pub mask: BinaryMask,
    /// Per-pixel confidence in [0, 1]; >= 0.5 exactly where `mask` is true.
    pub soft: Vec<f32>,
    pub proposal_score: f32,
}

impl ScoredMask {
    pub fn new(mask: BinaryMask, soft: Vec<f32>, proposal_score: f32) -> Result<Self, BackendError> {
        assert_eq!(soft.len(), mask.pixels().len(), "soft map size mismatch");
        for (index, (&s, &m)) in soft.iter().zip(mask.pixels()).enumerate() {
            if (s >= MASK_THRESHOLD) != m {
                return Err(BackendError::SoftMaskDisagreement { index });
            }
        }
        Ok(Self {
            mask,
            soft,
            proposal_score: proposal_score.clamp(0.0, 1.0),
        })
    }

    /// Discretize a soft map at the 0.5 threshold.
    pub fn from_soft(height: usize, width: usize, soft: Vec<f32>, proposal_score: f32) -> Self {
        let pixels: Vec<bool> = soft.iter().map(|&s| s >= MASK_THRESHOLD).collect();
        let mask = BinaryMask::new(height, width, pixels).expect("length matches");
        Self {
            mask,
            soft,
            proposal_score: proposal_score.clamp(0.0, 1.0),
        }
    }

    /// Binary backend: the soft map equals the mask.
    pub fn from_binary(mask: BinaryMask, proposal_score: f32) -> Self {
        let soft = mask.pixels().iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
        Self {
            mask,
            soft,
            proposal_score: proposal_score.clamp(0.0, 1.0),
        }
    }
}

/// Unit-norm feature vector produced by an embedder.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f32>,
}

impl Embedding {
    /// Normalizes to unit L2 norm; errors on (near-)zero input.
    pub fn new(mut values: Vec<f32>) -> Result<Self, BackendError> {
        let norm = values.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(BackendError::ZeroNorm);
        }
        for v in &mut values {
            *v = (*v as f64 / norm) as f32;
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        assert_eq!(self.dim(), other.dim(), "embedding dimension mismatch");
        let dot: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        dot.clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Segmentator,
    Embedder,
}

/// Self-description of a backend; embedders always carry their dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub kind: BackendKind,
    pub deterministic: bool,
    pub thread_safe: bool,
    pub embedding_dim: Option<usize>,
}

impl BackendDescriptor {
    pub fn segmentator(name: &str, deterministic: bool) -> Self {
        Self {
            name: name.to_string(),
            kind: BackendKind::Segmentator,
            deterministic,
            thread_safe: true,
            embedding_dim: None,
        }
    }

    pub fn embedder(name: &str, deterministic: bool, dim: usize) -> Self {
        Self {
            name: name.to_string(),
            kind: BackendKind::Embedder,
            deterministic,
            thread_safe: true,
            embedding_dim: Some(dim),
        }
    }
}

/// Proposal-generation knobs. Grid density and score floor mirror point-grid
/// prompting of mask foundation models; mocks reuse them where meaningful.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub grid: usize,
    pub score_floor: f32,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self { grid: 32, score_floor: 0.7 }
    }
}

/// A masked RGB crop of one candidate, background zeroed.
#[derive(Debug, Clone)]
pub struct MaskedCrop {
    pub pixels: RgbImage,
    /// Offset of the crop's top-left corner in the source image.
    pub origin: (usize, usize),
    /// Index of the candidate this crop was cut from.
    pub source_candidate: usize,
    /// Count of foreground (masked-in) pixels.
    pub foreground: usize,
}

pub trait Segmentator: Sync {
    fn descriptor(&self) -> BackendDescriptor;
    fn segment(&self, image: &RgbdImage, config: &SegmentConfig) -> Result<Vec<ScoredMask>, BackendError>;
}

pub trait Embedder: Sync {
    fn descriptor(&self) -> BackendDescriptor;
    fn embed(&self, crop: &MaskedCrop) -> Result<Embedding, BackendError>;
}

/// 64-hex SHA-256 of the raw RGB bytes; binds cache entries to image content
/// instead of file paths.
pub fn content_key(rgb: &RgbImage) -> String {
    let mut hasher = Sha256::new();
    hasher.update(rgb.bytes());
    hex::encode(hasher.finalize())
}
