//! File-ingestion backends over precomputed outputs.
//!
//! Masks and embeddings extracted offline (e.g. by a real foundation model on
//! a GPU box) are stored as line-delimited JSON keyed by the SHA-256 of the
//! raw RGB bytes of the image (mask cache) or of the masked crop (embedding
//! cache). Stores are immutable after ingestion.
//!
//! Mask record:
//! `{"key": <64-hex>, "size": [H, W], "counts": [..], "soft_quantized": [..]?, "score": f}`
//! with column-major uncompressed RLE starting with the zero run. One record
//! holds one mask; an image with several masks has several records sharing
//! the image key, and re-ingesting the exact same mask is the duplicate error.
//!
//! Embedding record: `{"key": <64-hex>, "dim": D, "values": [D floats]}`,
//! one per crop, strictly unique keys.

use super::{BackendDescriptor, BackendError, Embedder, Embedding, MaskedCrop, ScoredMask, SegmentConfig, Segmentator, content_key};
use crate::image::RgbdImage;
use crate::rle;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
pub struct MaskRecord {
    pub key: String,
    pub size: [usize; 2],
    pub counts: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub soft_quantized: Option<Vec<u8>>,
    pub score: f32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub key: String,
    pub dim: usize,
    pub values: Vec<f32>,
}

fn validate_key(key: &str, record: usize) -> Result<(), BackendError> {
    if key.len() != 64 || !key.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(BackendError::Malformed {
            record,
            message: format!("key {key:?} is not a 64-hex content hash"),
        });
    }
    Ok(())
}

/// Read-only store of precomputed masks, keyed by image content hash.
#[derive(Debug, Default)]
pub struct MaskCacheStore {
    entries: HashMap<String, Vec<ScoredMask>>,
    masks: usize,
}

impl MaskCacheStore {
    pub fn ingest(path: &Path) -> Result<Self, BackendError> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut store = Self::default();
        let mut seen: HashMap<String, Vec<Vec<u32>>> = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let record = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: MaskRecord = serde_json::from_str(&line).map_err(|e| BackendError::Malformed {
                record,
                message: e.to_string(),
            })?;
            validate_key(&rec.key, record)?;
            let [h, w] = rec.size;
            let mask = rle::decode(h, w, &rec.counts).map_err(|e| BackendError::Malformed {
                record,
                message: e.to_string(),
            })?;
            let prior = seen.entry(rec.key.clone()).or_default();
            if prior.contains(&rec.counts) {
                return Err(BackendError::DuplicateKey { record, key: rec.key });
            }
            prior.push(rec.counts.clone());
            let scored = match rec.soft_quantized {
                Some(q) => {
                    if q.len() != h * w {
                        return Err(BackendError::Malformed {
                            record,
                            message: format!("soft_quantized has {} values, expected {}", q.len(), h * w),
                        });
                    }
                    let soft: Vec<f32> = q.iter().map(|&v| v as f32 / 255.0).collect();
                    ScoredMask::new(mask, soft, rec.score).map_err(|e| BackendError::Malformed {
                        record,
                        message: e.to_string(),
                    })?
                }
                None => ScoredMask::from_binary(mask, rec.score),
            };
            store.entries.entry(rec.key).or_default().push(scored);
            store.masks += 1;
        }
        Ok(store)
    }

    pub fn lookup(&self, key: &str) -> Option<&[ScoredMask]> {
        self.entries.get(key).map(|v| v.as_slice())
    }

    pub fn images(&self) -> usize {
        self.entries.len()
    }

    pub fn len(&self) -> usize {
        self.masks
    }

    pub fn is_empty(&self) -> bool {
        self.masks == 0
    }
}

/// Read-only store of precomputed embeddings, keyed by crop content hash.
#[derive(Debug, Default)]
pub struct EmbeddingCacheStore {
    entries: HashMap<String, Embedding>,
    dim: Option<usize>,
}

impl EmbeddingCacheStore {
    pub fn ingest(path: &Path) -> Result<Self, BackendError> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut store = Self::default();
        for (i, line) in reader.lines().enumerate() {
            let record = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| BackendError::Malformed {
                record,
                message: e.to_string(),
            })?;
            validate_key(&rec.key, record)?;
            if rec.values.len() != rec.dim {
                return Err(BackendError::Malformed {
                    record,
                    message: format!("{} values for declared dim {}", rec.values.len(), rec.dim),
                });
            }
            match store.dim {
                None => store.dim = Some(rec.dim),
                Some(expected) if expected != rec.dim => {
                    return Err(BackendError::DimensionMismatch {
                        record,
                        expected,
                        found: rec.dim,
                    });
                }
                _ => {}
            }
            if store.entries.contains_key(&rec.key) {
                return Err(BackendError::DuplicateKey { record, key: rec.key });
            }
            let embedding = Embedding::new(rec.values).map_err(|e| BackendError::Malformed {
                record,
                message: e.to_string(),
            })?;
            store.entries.insert(rec.key, embedding);
        }
        Ok(store)
    }

    pub fn lookup(&self, key: &str) -> Option<&Embedding> {
        self.entries.get(key)
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Segmentator serving precomputed masks; misses are hard errors.
pub struct FileSegmentator {
    store: MaskCacheStore,
}

impl FileSegmentator {
    pub fn new(store: MaskCacheStore) -> Self {
        Self { store }
    }

    pub fn open(path: &Path) -> Result<Self, BackendError> {
        Ok(Self::new(MaskCacheStore::ingest(path)?))
    }
}

impl Segmentator for FileSegmentator {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::segmentator("file", true)
    }

    fn segment(&self, image: &RgbdImage, _config: &SegmentConfig) -> Result<Vec<ScoredMask>, BackendError> {
        let key = content_key(image.rgb());
        match self.store.lookup(&key) {
            Some(masks) => Ok(masks.to_vec()),
            None => Err(BackendError::CacheMiss { key }),
        }
    }
}

/// Embedder serving precomputed crop embeddings; misses are hard errors.
pub struct FileEmbedder {
    store: EmbeddingCacheStore,
}

impl FileEmbedder {
    pub fn new(store: EmbeddingCacheStore) -> Self {
        Self { store }
    }

    pub fn open(path: &Path) -> Result<Self, BackendError> {
        Ok(Self::new(EmbeddingCacheStore::ingest(path)?))
    }
}

impl Embedder for FileEmbedder {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::embedder("file", true, self.store.dim().unwrap_or(super::DEFAULT_EMBED_DIM))
    }

    fn embed(&self, crop: &MaskedCrop) -> Result<Embedding, BackendError> {
        if crop.foreground == 0 {
            return Err(BackendError::EmptyCrop);
        }
        let key = content_key(&crop.pixels);
        match self.store.lookup(&key) {
            Some(e) => Ok(e.clone()),
            None => Err(BackendError::CacheMiss { key }),
        }
    }
}
