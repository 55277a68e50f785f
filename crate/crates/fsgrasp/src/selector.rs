//! Inverted few-shot selection of the target candidate.
//!
//! Instead of classifying the query against support and background
//! prototypes, the roles are swapped: each candidate's masked crop is
//! embedded and scored by cosine similarity against the prototype built from
//! the support shots. Only masked crops and support shots ever reach the
//! embedder; the scene background is never embedded.
//!
//! The winning candidate yields the mask M_q and the semantic heatmap H_q
//! (the candidate's pre-discretization soft map, optionally scaled by the
//! selection confidence).

use crate::backends::{BackendError, Embedder, Embedding, MaskedCrop, ScoredMask};
use crate::candidates::CandidateSet;
use crate::image::{BinaryMask, RgbImage, RgbdImage, SupportSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Padding around a candidate's bounding box when cropping, clamped to the
/// image bounds.
pub const CROP_PAD: usize = 8;

#[derive(Debug, Error)]
pub enum SelectorError {
    #[error("candidate {index} has an empty mask")]
    EmptyCandidate { index: usize },
    #[error("support shots aggregate to a zero prototype vector")]
    ZeroPrototype,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// How the selected candidate's soft map becomes H_q.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapScale {
    /// Scale by (cosine + 1) / 2 so downstream stages see the confidence.
    Confidence,
    /// Pass the soft map through unchanged.
    Raw,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub heatmap_scale: HeatmapScale,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            heatmap_scale: HeatmapScale::Confidence,
        }
    }
}

/// Unit-norm mean of the support shot embeddings.
#[derive(Debug, Clone)]
pub struct Prototype {
    pub vector: Embedding,
    pub k: usize,
}

/// Outcome of selecting over a candidate set.
#[derive(Debug, Clone)]
pub enum SelectionOutcome {
    /// The candidate set was empty: the class is reported absent.
    NoTarget,
    Target(SelectionResult),
}

impl SelectionOutcome {
    pub fn target(&self) -> Option<&SelectionResult> {
        match self {
            SelectionOutcome::NoTarget => None,
            SelectionOutcome::Target(r) => Some(r),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SelectionResult {
    pub chosen_index: usize,
    /// Cosine similarity of every candidate against the prototype.
    pub scores: Vec<f64>,
    /// H_q: per-pixel values in [0, 1], nonzero only on the chosen candidate.
    pub heatmap: Vec<f32>,
    /// M_q: the chosen candidate's binary mask.
    pub mask: BinaryMask,
}

/// Crop an RGB image to the mask's bounding box plus padding, zeroing every
/// pixel outside the mask.
pub fn masked_crop(rgb: &RgbImage, mask: &BinaryMask, source_candidate: usize) -> Result<MaskedCrop, SelectorError> {
    let (x0, y0, x1, y1) = mask
        .bounding_box()
        .ok_or(SelectorError::EmptyCandidate { index: source_candidate })?;
    let cx0 = x0.saturating_sub(CROP_PAD);
    let cy0 = y0.saturating_sub(CROP_PAD);
    let cx1 = (x1 + CROP_PAD).min(rgb.width() - 1);
    let cy1 = (y1 + CROP_PAD).min(rgb.height() - 1);
    let (cw, ch) = (cx1 - cx0 + 1, cy1 - cy0 + 1);
    let mut out = RgbImage::filled(ch, cw, [0, 0, 0]);
    let mut foreground = 0usize;
    for y in 0..ch {
        for x in 0..cw {
            let (sx, sy) = (cx0 + x, cy0 + y);
            if mask.get(sx, sy) {
                out.set(x, y, rgb.get(sx, sy));
                foreground += 1;
            }
        }
    }
    Ok(MaskedCrop {
        pixels: out,
        origin: (cx0, cy0),
        source_candidate,
        foreground,
    })
}

/// One masked crop per candidate, in candidate order.
pub fn make_crops(cands: &CandidateSet, image: &RgbdImage) -> Result<Vec<MaskedCrop>, SelectorError> {
    cands
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| masked_crop(image.rgb(), &c.mask, i))
        .collect()
}

/// Embed every support shot (preprocessed exactly like candidate crops) and
/// average into a unit-norm prototype.
pub fn build_prototype(support: &SupportSet, embedder: &dyn Embedder) -> Result<Prototype, SelectorError> {
    let mut sum: Vec<f64> = Vec::new();
    for (i, shot) in support.shots().iter().enumerate() {
        let crop = masked_crop(&shot.rgb, &shot.mask, i)?;
        let e = embedder.embed(&crop)?;
        if sum.is_empty() {
            sum = vec![0.0; e.dim()];
        }
        for (s, v) in sum.iter_mut().zip(e.values()) {
            *s += *v as f64;
        }
    }
    let k = support.k();
    let mean: Vec<f32> = sum.iter().map(|s| (*s / k as f64) as f32).collect();
    let vector = Embedding::new(mean).map_err(|_| SelectorError::ZeroPrototype)?;
    Ok(Prototype { vector, k })
}

/// H_q from the chosen candidate: soft map clipped to [0, 1], scaled by
/// (score + 1) / 2 under the confidence mode.
pub fn make_heatmap(chosen: &ScoredMask, score: f64, scale: HeatmapScale) -> Vec<f32> {
    let factor = match scale {
        HeatmapScale::Confidence => ((score + 1.0) / 2.0) as f32,
        HeatmapScale::Raw => 1.0,
    };
    chosen
        .soft
        .iter()
        .map(|&s| (s.clamp(0.0, 1.0) * factor).clamp(0.0, 1.0))
        .collect()
}

/// Score every candidate crop against the support prototype and select the
/// argmax (lowest index on ties). An empty candidate set is not an error but
/// a [`SelectionOutcome::NoTarget`].
pub fn select(
    cands: &CandidateSet,
    image: &RgbdImage,
    support: &SupportSet,
    embedder: &dyn Embedder,
    config: &SelectorConfig,
) -> Result<SelectionOutcome, SelectorError> {
    if cands.is_empty() {
        return Ok(SelectionOutcome::NoTarget);
    }
    let prototype = build_prototype(support, embedder)?;
    let crops = make_crops(cands, image)?;
    let mut scores = Vec::with_capacity(crops.len());
    for crop in &crops {
        let e = embedder.embed(crop)?;
        scores.push(prototype.vector.cosine(&e));
    }
    let chosen_index = scores
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.partial_cmp(b).unwrap().then(ib.cmp(ia)))
        .map(|(i, _)| i)
        .expect("nonempty scores");
    let chosen = &cands.candidates[chosen_index];
    let heatmap = make_heatmap(chosen, scores[chosen_index], config.heatmap_scale);
    Ok(SelectionOutcome::Target(SelectionResult {
        chosen_index,
        scores,
        heatmap,
        mask: chosen.mask.clone(),
    }))
}
