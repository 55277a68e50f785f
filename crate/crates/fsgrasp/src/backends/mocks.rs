//! Deterministic mock and oracle backends.
//!
//! These let every downstream stage run and be tested without any learned
//! weights:
//!
//! * [`OracleSegmentator`] returns ground-truth masks (plus seeded distractor
//!   blobs) for registered scenes,
//! * [`ThresholdSegmentator`] finds connected components of pixels that differ
//!   from the dominant color,
//! * [`OracleEmbedder`] maps a crop to the basis vector of its class, making a
//!   perfect classifier,
//! * [`HistogramEmbedder`] uses an 8x8x8 RGB histogram, good enough to
//!   separate distinctly-hued classes.

use super::{
    content_key, BackendDescriptor, BackendError, Embedder, Embedding, MaskedCrop, ScoredMask,
    SegmentConfig, Segmentator,
};
use crate::image::{BinaryMask, RgbdImage};
use crate::maskops::connected_components;
use crate::synthdata::{splitmix, SceneAnnotation, SynthClass};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Ground-truth proposal source: for a registered image it emits the plane
/// mask (recovered from the depth mode), every instance mask, and a seeded set
/// of distractor blobs (tiny ones anywhere, larger ones off the plane).
pub struct OracleSegmentator {
    scenes: HashMap<String, Vec<BinaryMask>>,
    pub distractors: usize,
    seed: u64,
}

impl OracleSegmentator {
    pub fn new(distractors: usize, seed: u64) -> Self {
        Self {
            scenes: HashMap::new(),
            distractors,
            seed,
        }
    }

    pub fn register(&mut self, image: &RgbdImage, annotation: &SceneAnnotation) {
        let key = content_key(image.rgb());
        let masks = annotation.instances.iter().map(|i| i.mask.clone()).collect();
        self.scenes.insert(key, masks);
    }

    pub fn register_all<'a>(&mut self, scenes: impl IntoIterator<Item = (&'a RgbdImage, &'a SceneAnnotation)>) {
        for (image, ann) in scenes {
            self.register(image, ann);
        }
    }

    /// Plane pixels: depth within 5 mm of the modal depth, excluding objects.
    fn plane_mask(image: &RgbdImage, objects: &BinaryMask) -> BinaryMask {
        let mut histogram: HashMap<u16, usize> = HashMap::new();
        for &d in image.depth() {
            *histogram.entry(d).or_default() += 1;
        }
        let mode = histogram
            .into_iter()
            .max_by_key(|&(d, count)| (count, std::cmp::Reverse(d)))
            .map(|(d, _)| d)
            .unwrap_or(0);
        let (h, w) = (image.height(), image.width());
        BinaryMask::from_fn(h, w, |x, y| {
            let d = image.depth_at(x, y);
            (d as i32 - mode as i32).abs() <= 5 && !objects.get(x, y)
        })
    }

    fn distractor_blobs(
        &self,
        image: &RgbdImage,
        plane: &BinaryMask,
        rng: &mut ChaCha8Rng,
    ) -> Vec<ScoredMask> {
        let (h, w) = (image.height(), image.width());
        let min_area = (0.003 * (h * w) as f64).ceil() as usize;
        let mut blobs = Vec::new();
        // tiny blobs anywhere: always below the area floor
        for _ in 0..self.distractors {
            let r = rng.gen_range(2usize..=3);
            let cx = rng.gen_range(r..w - r) as isize;
            let cy = rng.gen_range(r..h - r) as isize;
            let mask = disc_mask(h, w, cx, cy, r as isize, None);
            if mask.area() > 0 && mask.area() < min_area {
                blobs.push(ScoredMask::from_binary(mask, rng.gen_range(0.70..0.80)));
            }
        }
        // off-plane blobs: sized above the floor, confined to the far region
        let mode = depth_mode(image);
        let far: Vec<usize> = (0..h * w)
            .filter(|&i| {
                let d = image.depth()[i];
                let (x, y) = (i % w, i / w);
                !plane.get(x, y) && d as i32 > mode as i32 + 50
            })
            .collect();
        for _ in 0..self.distractors {
            if far.is_empty() {
                break;
            }
            let idx = far[rng.gen_range(0..far.len())];
            let (cx, cy) = ((idx % w) as isize, (idx / w) as isize);
            let r = rng.gen_range(5isize..=7);
            let mask = disc_mask(h, w, cx, cy, r, Some(&far));
            if mask.area() >= min_area {
                blobs.push(ScoredMask::from_binary(mask, rng.gen_range(0.70..0.80)));
            }
        }
        blobs
    }
}

fn depth_mode(image: &RgbdImage) -> u16 {
    let mut histogram: HashMap<u16, usize> = HashMap::new();
    for &d in image.depth() {
        *histogram.entry(d).or_default() += 1;
    }
    histogram
        .into_iter()
        .max_by_key(|&(d, count)| (count, std::cmp::Reverse(d)))
        .map(|(d, _)| d)
        .unwrap_or(0)
}

fn disc_mask(h: usize, w: usize, cx: isize, cy: isize, r: isize, restrict: Option<&[usize]>) -> BinaryMask {
    BinaryMask::from_fn(h, w, |x, y| {
        let dx = x as isize - cx;
        let dy = y as isize - cy;
        let inside = dx * dx + dy * dy <= r * r;
        match restrict {
            Some(allowed) => inside && allowed.binary_search(&(y * w + x)).is_ok(),
            None => inside,
        }
    })
}

impl Segmentator for OracleSegmentator {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::segmentator("oracle", true)
    }

    fn segment(&self, image: &RgbdImage, config: &SegmentConfig) -> Result<Vec<ScoredMask>, BackendError> {
        let key = content_key(image.rgb());
        let instance_masks = self
            .scenes
            .get(&key)
            .ok_or(BackendError::UnknownImage { key: key.clone() })?;
        let (h, w) = (image.height(), image.width());
        let mut objects = BinaryMask::empty(h, w);
        for m in instance_masks {
            objects = objects.union_with(m);
        }
        let plane = Self::plane_mask(image, &objects);
        // per-image stream keeps repeated calls identical
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ splitmix(key_to_u64(&key)));
        let mut out = Vec::new();
        out.push(ScoredMask::from_binary(plane.clone(), 1.0));
        for m in instance_masks {
            out.push(ScoredMask::from_binary(m.clone(), rng.gen_range(0.85..0.95)));
        }
        out.extend(self.distractor_blobs(image, &plane, &mut rng));
        out.retain(|m| m.proposal_score >= config.score_floor);
        Ok(out)
    }
}

fn key_to_u64(key: &str) -> u64 {
    u64::from_str_radix(&key[..16], 16).unwrap_or(0)
}

/// Color-cluster segmentator: foreground is whatever differs from the
/// dominant color; components must touch a sample-grid point to survive.
pub struct ThresholdSegmentator {
    pub color_threshold: f64,
}

impl Default for ThresholdSegmentator {
    fn default() -> Self {
        Self { color_threshold: 60.0 }
    }
}

impl ThresholdSegmentator {
    /// Per-channel median color; robust to texture noise spreading the
    /// majority surface across histogram buckets.
    fn dominant_color(image: &RgbdImage) -> [f64; 3] {
        let (h, w) = (image.height(), image.width());
        let mut channels = [vec![0u8; h * w], vec![0u8; h * w], vec![0u8; h * w]];
        for y in 0..h {
            for x in 0..w {
                let px = image.rgb().get(x, y);
                for c in 0..3 {
                    channels[c][y * w + x] = px[c];
                }
            }
        }
        let mut out = [0.0f64; 3];
        for c in 0..3 {
            channels[c].sort_unstable();
            out[c] = channels[c][h * w / 2] as f64;
        }
        out
    }
}

impl Segmentator for ThresholdSegmentator {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::segmentator("threshold", true)
    }

    fn segment(&self, image: &RgbdImage, config: &SegmentConfig) -> Result<Vec<ScoredMask>, BackendError> {
        let (h, w) = (image.height(), image.width());
        let dominant = Self::dominant_color(image);
        let mut distance = vec![0.0f64; h * w];
        let mut foreground = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let [r, g, b] = image.rgb().get(x, y);
                let d = ((r as f64 - dominant[0]).powi(2)
                    + (g as f64 - dominant[1]).powi(2)
                    + (b as f64 - dominant[2]).powi(2))
                .sqrt();
                distance[y * w + x] = d;
                foreground[y * w + x] = d > self.color_threshold;
            }
        }
        let components = connected_components(&foreground, h, w, true);
        if components.is_empty() {
            return Ok(Vec::new());
        }
        // grid of sample points: a component must contain at least one
        let grid = config.grid.max(1);
        let mut grid_points = vec![false; h * w];
        for j in 0..grid {
            for i in 0..grid {
                let x = ((i as f64 + 0.5) * w as f64 / grid as f64) as usize;
                let y = ((j as f64 + 0.5) * h as f64 / grid as f64) as usize;
                grid_points[y.min(h - 1) * w + x.min(w - 1)] = true;
            }
        }
        let mut kept = Vec::new();
        for comp in components {
            if !comp.iter().any(|&i| grid_points[i]) {
                continue;
            }
            let mean_distance = comp.iter().map(|&i| distance[i]).sum::<f64>() / comp.len() as f64;
            let score = (mean_distance / (2.0 * self.color_threshold)).clamp(0.0, 1.0) as f32;
            if score < config.score_floor {
                continue;
            }
            let mut pixels = vec![false; h * w];
            for &i in &comp {
                pixels[i] = true;
            }
            kept.push(ScoredMask::from_binary(BinaryMask::new(h, w, pixels).expect("sized"), score));
        }
        if kept.is_empty() {
            return Ok(Vec::new());
        }
        // the dominant-colored complement acts as the plane proposal
        let complement: Vec<bool> = foreground.iter().map(|f| !f).collect();
        let plane = BinaryMask::new(h, w, complement).expect("sized");
        let mut out = Vec::with_capacity(kept.len() + 1);
        if !plane.is_empty() {
            out.push(ScoredMask::from_binary(plane, 0.95));
        }
        out.extend(kept);
        Ok(out)
    }
}

/// Perfect classifier for datasets where the fill color identifies the class:
/// a crop's mean foreground color is matched to the nearest class color and
/// mapped to that class's basis vector.
pub struct OracleEmbedder {
    class_colors: Vec<(u32, [u8; 3])>,
    dim: usize,
}

impl OracleEmbedder {
    pub fn from_classes(classes: &[SynthClass]) -> Self {
        let mut class_colors: Vec<(u32, [u8; 3])> = classes.iter().map(|c| (c.class_id, c.rgb())).collect();
        class_colors.sort_by_key(|(id, _)| *id);
        let dim = super::DEFAULT_EMBED_DIM.max(class_colors.len());
        Self { class_colors, dim }
    }

    /// Basis vector for a class id, for direct use in tests.
    pub fn class_embedding(&self, class_id: u32) -> Option<Embedding> {
        let idx = self.class_colors.iter().position(|(id, _)| *id == class_id)?;
        let mut values = vec![0.0f32; self.dim];
        values[idx] = 1.0;
        Some(Embedding::new(values).expect("unit basis"))
    }
}

fn mean_foreground_color(crop: &MaskedCrop) -> Option<[f64; 3]> {
    let (h, w) = (crop.pixels.height(), crop.pixels.width());
    let (mut n, mut sum) = (0usize, [0.0f64; 3]);
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = crop.pixels.get(x, y);
            if r != 0 || g != 0 || b != 0 {
                n += 1;
                sum[0] += r as f64;
                sum[1] += g as f64;
                sum[2] += b as f64;
            }
        }
    }
    (n > 0).then(|| [sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64])
}

impl Embedder for OracleEmbedder {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::embedder("oracle", true, self.dim)
    }

    fn embed(&self, crop: &MaskedCrop) -> Result<Embedding, BackendError> {
        if crop.foreground == 0 {
            return Err(BackendError::EmptyCrop);
        }
        let mean = mean_foreground_color(crop).ok_or(BackendError::EmptyCrop)?;
        let (best_idx, _) = self
            .class_colors
            .iter()
            .enumerate()
            .map(|(i, (_, c))| {
                let d = (mean[0] - c[0] as f64).powi(2)
                    + (mean[1] - c[1] as f64).powi(2)
                    + (mean[2] - c[2] as f64).powi(2);
                (i, d)
            })
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
            .expect("class table is nonempty");
        let mut values = vec![0.0f32; self.dim];
        values[best_idx] = 1.0;
        Embedding::new(values)
    }
}

/// 8x8x8 RGB histogram over foreground pixels, L2-normalized.
pub struct HistogramEmbedder;

impl HistogramEmbedder {
    pub const DIM: usize = 512;
}

impl Embedder for HistogramEmbedder {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::embedder("histogram", true, Self::DIM)
    }

    fn embed(&self, crop: &MaskedCrop) -> Result<Embedding, BackendError> {
        if crop.foreground == 0 {
            return Err(BackendError::EmptyCrop);
        }
        let mut histogram = vec![0.0f32; Self::DIM];
        let (h, w) = (crop.pixels.height(), crop.pixels.width());
        let mut any = false;
        for y in 0..h {
            for x in 0..w {
                let [r, g, b] = crop.pixels.get(x, y);
                if r == 0 && g == 0 && b == 0 {
                    continue;
                }
                any = true;
                let bin = ((r >> 5) as usize) * 64 + ((g >> 5) as usize) * 8 + ((b >> 5) as usize);
                histogram[bin] += 1.0;
            }
        }
        if !any {
            return Err(BackendError::EmptyCrop);
        }
        Embedding::new(histogram)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::RgbImage;
    use crate::synthdata::{gen_scene, standard_suite_classes, GenConfig};

    fn crop_from_rgb(rgb: RgbImage) -> MaskedCrop {
        let foreground = (0..rgb.height() * rgb.width())
            .filter(|i| {
                let (x, y) = (i % rgb.width(), i / rgb.width());
                rgb.get(x, y) != [0, 0, 0]
            })
            .count();
        MaskedCrop {
            pixels: rgb,
            origin: (0, 0),
            source_candidate: 0,
            foreground,
        }
    }

    #[test]
    fn oracle_returns_ground_truth_plus_distractors() {
        let classes = standard_suite_classes();
        let cfg = GenConfig::default();
        let (image, ann) = gen_scene(&classes, 3, 11, &cfg).unwrap();
        let mut oracle = OracleSegmentator::new(2, 0);
        oracle.register(&image, &ann);
        let out = oracle.segment(&image, &SegmentConfig::default()).unwrap();
        // plane + 3 objects + up to 4 distractors
        assert!(out.len() >= 4 + 1, "got {}", out.len());
        assert!(out.len() <= 4 + 4);
        // ground-truth masks come back exactly
        for inst in &ann.instances {
            assert!(out.iter().any(|m| m.mask == inst.mask));
        }
        // plane is the largest mask
        let largest = out.iter().max_by_key(|m| m.mask.area()).unwrap();
        assert!(largest.mask.area() > ann.instances.iter().map(|i| i.mask.area()).max().unwrap());

        // determinism across calls
        let again = oracle.segment(&image, &SegmentConfig::default()).unwrap();
        assert_eq!(out.len(), again.len());
        for (a, b) in out.iter().zip(&again) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.proposal_score, b.proposal_score);
        }
    }

    #[test]
    fn oracle_rejects_unknown_images() {
        let oracle = OracleSegmentator::new(0, 0);
        let image = RgbdImage::new(RgbImage::filled(64, 64, [5, 5, 5]), vec![600; 64 * 64]).unwrap();
        assert!(matches!(
            oracle.segment(&image, &SegmentConfig::default()),
            Err(BackendError::UnknownImage { .. })
        ));
    }

    #[test]
    fn threshold_backend_on_blank_image_finds_nothing() {
        let image = RgbdImage::new(RgbImage::filled(64, 64, [90, 90, 90]), vec![600; 64 * 64]).unwrap();
        let seg = ThresholdSegmentator::default();
        let out = seg.segment(&image, &SegmentConfig::default()).unwrap();
        assert!(out.is_empty(), "blank image produced {} masks", out.len());
    }

    #[test]
    fn threshold_backend_finds_synthetic_objects() {
        let classes = standard_suite_classes();
        let cfg = GenConfig::default();
        let (image, ann) = gen_scene(&classes, 2, 21, &cfg).unwrap();
        let seg = ThresholdSegmentator::default();
        let out = seg.segment(&image, &SegmentConfig::default()).unwrap();
        // every object is recovered by some component with high overlap
        for inst in &ann.instances {
            let best = out
                .iter()
                .map(|m| m.mask.iou(&inst.mask))
                .fold(0.0f64, f64::max);
            assert!(best > 0.9, "object not recovered, best IoU {best}");
        }
    }

    #[test]
    fn oracle_embedder_is_a_perfect_classifier() {
        let classes = standard_suite_classes();
        let embedder = OracleEmbedder::from_classes(&classes);
        for a in &classes {
            for b in &classes {
                let ea = embedder.class_embedding(a.class_id).unwrap();
                let eb = embedder.class_embedding(b.class_id).unwrap();
                let expected = if a.class_id == b.class_id { 1.0 } else { 0.0 };
                assert_eq!(ea.cosine(&eb), expected);
            }
        }
        // a crop painted in a class color maps to that class's basis vector
        let mut rgb = RgbImage::filled(16, 16, [0, 0, 0]);
        for y in 4..12 {
            for x in 4..12 {
                rgb.set(x, y, classes[3].rgb());
            }
        }
        let crop = crop_from_rgb(rgb);
        let e = embedder.embed(&crop).unwrap();
        assert_eq!(e.cosine(&embedder.class_embedding(classes[3].class_id).unwrap()), 1.0);
    }

    #[test]
    fn histogram_embedder_puts_pure_red_in_one_bin() {
        let mut rgb = RgbImage::filled(8, 8, [0, 0, 0]);
        for y in 2..6 {
            for x in 2..6 {
                rgb.set(x, y, [255, 0, 0]);
            }
        }
        let crop = crop_from_rgb(rgb);
        let e = HistogramEmbedder.embed(&crop).unwrap();
        let red_bin = (255usize >> 5) * 64;
        for (i, v) in e.values().iter().enumerate() {
            if i == red_bin {
                assert!((v - 1.0).abs() <= 1e-6);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
        // identical crops embed identically
        let e2 = HistogramEmbedder.embed(&crop).unwrap();
        assert_eq!(e.values(), e2.values());
    }

    #[test]
    fn embedders_reject_empty_crops() {
        let crop = crop_from_rgb(RgbImage::filled(4, 4, [0, 0, 0]));
        assert!(matches!(HistogramEmbedder.embed(&crop), Err(BackendError::EmptyCrop)));
        let embedder = OracleEmbedder::from_classes(&standard_suite_classes());
        assert!(matches!(embedder.embed(&crop), Err(BackendError::EmptyCrop)));
    }
}
