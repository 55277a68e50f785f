//! From raw proposals to the filtered candidate set.
//!
//! The largest proposal is taken as the support plane. Because objects sit on
//! the plane and punch holes into its mask, the plane *support region* is the
//! morphological closing of the plane mask united with its filled convex
//! hull; a candidate survives only if at least half of its pixels fall inside
//! that region and it covers at least 0.3% of the image.

use crate::backends::ScoredMask;
use crate::image::{BinaryMask, RgbdImage};
use crate::maskops::{close_disk, filled_convex_hull, overlap_fraction};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CandidateError {
    #[error("cannot estimate a plane from zero masks")]
    NoMasks,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Greedy NMS threshold on mask IoU.
    pub nms_iou: f64,
    /// Minimum candidate area as a fraction of the image.
    pub min_area_frac: f64,
    /// Minimum fraction of candidate pixels inside the plane support region.
    pub plane_overlap: f64,
    /// Disk radius of the morphological closing of the plane mask.
    pub closing_radius: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            nms_iou: 0.9,
            min_area_frac: 0.003,
            plane_overlap: 0.5,
            closing_radius: 7,
        }
    }
}

/// Deduplicated, plane-filtered candidates for one scene.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub candidates: Vec<ScoredMask>,
    pub plane: BinaryMask,
}

impl CandidateSet {
    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    /// Plane followed by the candidates, i.e. an input that filtering maps
    /// back onto this same set (the plane stays the largest mask).
    pub fn to_masks(&self) -> Vec<ScoredMask> {
        let mut masks = Vec::with_capacity(self.candidates.len() + 1);
        masks.push(ScoredMask::from_binary(self.plane.clone(), 1.0));
        masks.extend(self.candidates.iter().cloned());
        masks
    }
}

/// Greedy non-maximal suppression by descending proposal score; any surviving
/// pair has mask IoU below the threshold. Ties keep the earlier proposal first.
pub fn dedup_masks(masks: &[ScoredMask], iou_threshold: f64) -> Vec<ScoredMask> {
    assert!(iou_threshold > 0.0 && iou_threshold <= 1.0, "NMS threshold must be in (0, 1]");
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by(|&a, &b| {
        masks[b]
            .proposal_score
            .partial_cmp(&masks[a].proposal_score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| masks[k].mask.iou(&masks[i].mask) < iou_threshold) {
            kept.push(i);
        }
    }
    // restore input order among survivors so downstream indexing is stable
    kept.sort_unstable();
    kept.into_iter().map(|i| masks[i].clone()).collect()
}

/// The largest-area mask is the plane estimate; ties break to the lowest index.
pub fn estimate_plane(masks: &[ScoredMask]) -> Result<&ScoredMask, CandidateError> {
    masks
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.mask
                .area()
                .cmp(&b.mask.area())
                .then(ib.cmp(ia)) // prefer the earlier index on equal area
        })
        .map(|(_, m)| m)
        .ok_or(CandidateError::NoMasks)
}

/// Region of the image considered "on the plane".
pub fn plane_support_region(plane: &BinaryMask, closing_radius: usize) -> BinaryMask {
    let closed = close_disk(plane, closing_radius);
    let hull = filled_convex_hull(plane);
    closed.union_with(&hull)
}

/// Remove the plane, small masks and off-plane masks from a deduplicated
/// proposal list. An empty result is valid: the selector reports no target.
pub fn filter_candidates(
    masks: &[ScoredMask],
    image: &RgbdImage,
    config: &FilterConfig,
) -> Result<CandidateSet, CandidateError> {
    let plane = estimate_plane(masks)?;
    let plane_mask = plane.mask.clone();
    let region = plane_support_region(&plane_mask, config.closing_radius);
    let min_area = config.min_area_frac * (image.height() * image.width()) as f64;
    let candidates: Vec<ScoredMask> = masks
        .iter()
        .filter(|m| m.mask != plane_mask)
        .filter(|m| (m.mask.area() as f64) >= min_area)
        .filter(|m| overlap_fraction(&m.mask, &region) >= config.plane_overlap)
        .cloned()
        .collect();
    Ok(CandidateSet {
        candidates,
        plane: plane_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ScoredMask, SegmentConfig, Segmentator};
    use crate::backends::mocks::OracleSegmentator;
    use crate::image::{BinaryMask, RgbImage};
    use crate::synthdata::{gen_scene, standard_suite_classes, GenConfig};

    fn block(h: usize, w: usize, x0: usize, y0: usize, x1: usize, y1: usize, score: f32) -> ScoredMask {
        let mask = BinaryMask::from_fn(h, w, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y));
        ScoredMask::from_binary(mask, score)
    }

    #[test]
    fn nms_drops_exact_duplicates_keeping_higher_score() {
        let a = block(16, 16, 2, 2, 8, 8, 0.9);
        let b = block(16, 16, 2, 2, 8, 8, 0.8);
        let kept = dedup_masks(&[a, b], 0.9);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].proposal_score, 0.9);
    }

    #[test]
    fn nms_keeps_disjoint_masks() {
        let a = block(16, 16, 0, 0, 4, 4, 0.9);
        let b = block(16, 16, 8, 8, 12, 12, 0.1);
        assert_eq!(dedup_masks(&[a, b], 0.5).len(), 2);
    }

    #[test]
    fn nms_greedy_trace_keeps_best_of_nested_pair() {
        // A contains B with IoU 0.95; C disjoint. Scores 0.7 / 0.9 / 0.5:
        // B wins its round and suppresses A, C survives.
        let a = block(64, 64, 10, 10, 30, 30, 0.7); // area 400
        let b = block(64, 64, 10, 10, 29, 30, 0.9); // area 380 inside A
        let c = block(64, 64, 40, 40, 50, 50, 0.5);
        assert!((a.mask.iou(&b.mask) - 0.95).abs() < 1e-9);
        let kept = dedup_masks(&[a, b.clone(), c.clone()], 0.9);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].mask, b.mask);
        assert_eq!(kept[1].mask, c.mask);
    }

    #[test]
    fn plane_is_largest_with_low_index_ties() {
        let masks = vec![
            block(64, 64, 0, 0, 20, 50, 0.5),  // 1000
            block(64, 64, 0, 0, 50, 50, 0.5),  // 2500
            block(64, 64, 0, 0, 10, 20, 0.5),  // 200
        ];
        assert_eq!(estimate_plane(&masks).unwrap().mask.area(), 2500);

        let tied = vec![block(8, 8, 0, 0, 2, 2, 0.5), block(8, 8, 4, 4, 6, 6, 0.5)];
        let plane = estimate_plane(&tied).unwrap();
        assert_eq!(plane.mask, tied[0].mask);

        assert_eq!(estimate_plane(&[]).unwrap_err(), CandidateError::NoMasks);

        let single = vec![block(8, 8, 0, 0, 2, 2, 0.5)];
        assert_eq!(estimate_plane(&single).unwrap().mask, single[0].mask);
    }

    fn image_480x640() -> RgbdImage {
        RgbdImage::new(RgbImage::filled(480, 640, [100, 100, 100]), vec![600; 480 * 640]).unwrap()
    }

    #[test]
    fn small_masks_are_discarded() {
        // 900 px < 0.003 * 307200 = 921.6
        let image = image_480x640();
        let plane = block(480, 640, 0, 0, 640, 400, 0.9);
        let small = block(480, 640, 10, 10, 40, 40, 0.8); // 900 px
        assert_eq!(small.mask.area(), 900);
        let big = block(480, 640, 100, 100, 140, 140, 0.8); // 1600 px
        let set = filter_candidates(&[plane, small, big.clone()], &image, &FilterConfig::default()).unwrap();
        assert_eq!(set.candidates.len(), 1);
        assert_eq!(set.candidates[0].mask, big.mask);
    }

    #[test]
    fn plane_never_appears_among_candidates() {
        let image = image_480x640();
        let plane = block(480, 640, 0, 0, 640, 400, 0.9);
        let obj = block(480, 640, 100, 100, 140, 140, 0.8);
        let set = filter_candidates(&[plane.clone(), obj], &image, &FilterConfig::default()).unwrap();
        assert_eq!(set.plane, plane.mask);
        assert!(set.candidates.iter().all(|c| c.mask != plane.mask));
    }

    #[test]
    fn off_plane_masks_are_discarded() {
        let image = image_480x640();
        // plane covers the left two thirds; candidate has 10% inside it
        let plane = block(480, 640, 0, 0, 400, 480, 0.9);
        let off = BinaryMask::from_fn(480, 640, |x, y| y >= 200 && y < 240 && (396..436).contains(&x));
        assert_eq!(off.area(), 40 * 40);
        let inside = off
            .true_indices()
            .filter(|i| (i % 640) < 400)
            .count();
        assert_eq!(inside, 4 * 40); // 10% of pixels on the plane side
        let off = ScoredMask::from_binary(off, 0.8);
        let on = block(480, 640, 100, 100, 140, 140, 0.8);
        let set = filter_candidates(&[plane, off, on.clone()], &image, &FilterConfig::default()).unwrap();
        assert_eq!(set.candidates.len(), 1);
        assert_eq!(set.candidates[0].mask, on.mask);
    }

    #[test]
    fn filtering_is_idempotent() {
        let classes = standard_suite_classes();
        let cfg = GenConfig::default();
        let (image, ann) = gen_scene(&classes, 3, 77, &cfg).unwrap();
        let mut oracle = OracleSegmentator::new(3, 1);
        oracle.register(&image, &ann);
        let proposals = oracle.segment(&image, &SegmentConfig::default()).unwrap();
        let fc = FilterConfig::default();
        let deduped = dedup_masks(&proposals, fc.nms_iou);
        let once = filter_candidates(&deduped, &image, &fc).unwrap();
        let twice = filter_candidates(&once.to_masks(), &image, &fc).unwrap();
        assert_eq!(once.plane, twice.plane);
        assert_eq!(once.candidates.len(), twice.candidates.len());
        for (a, b) in once.candidates.iter().zip(&twice.candidates) {
            assert_eq!(a.mask, b.mask);
        }
        assert!(once.candidates.len() <= deduped.len());
    }

    #[test]
    fn oracle_scene_filtering_keeps_exactly_the_objects() {
        let classes = standard_suite_classes();
        let cfg = GenConfig::default();
        for seed in 0..50u64 {
            let (image, ann) = gen_scene(&classes, 3, seed, &cfg).unwrap();
            let mut oracle = OracleSegmentator::new(3, seed ^ 0xabcd);
            oracle.register(&image, &ann);
            let proposals = oracle.segment(&image, &SegmentConfig::default()).unwrap();
            let fc = FilterConfig::default();
            let deduped = dedup_masks(&proposals, fc.nms_iou);
            let set = filter_candidates(&deduped, &image, &fc).unwrap();
            assert_eq!(set.candidates.len(), ann.instances.len(), "seed {seed}");
            for inst in &ann.instances {
                assert!(set.candidates.iter().any(|c| c.mask == inst.mask), "seed {seed}");
            }
        }
    }
}
