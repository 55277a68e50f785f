//! Grasp <-> heatmap codec.
//!
//! Training targets: each annotated grasp stamps a small square patch of
//! quality foreground plus its quantized angle and width class labels;
//! untouched pixels carry a reserved no-grasp label. Prediction decoding:
//! softmax the two-channel quality map, threshold at 95% of the peak, take
//! the broadest 8-connected component, and read the angle/width argmax at its
//! centroid.

use crate::geometry::{Grasp, WidthUnit};
use crate::maskops::connected_components;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("value {value} outside quantizer range [{lo}, {hi})")]
    OutOfRange { value: f64, lo: f64, hi: f64 },
    #[error("bin {bin} outside [0, {bins})")]
    BadBin { bin: usize, bins: usize },
    #[error("grasp center ({x}, {y}) outside the {height}x{width} canvas")]
    CenterOutOfBounds { x: f64, y: f64, height: usize, width: usize },
    #[error("quality map is empty")]
    EmptyQuality,
    #[error("stack shapes disagree: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantUnit {
    Degrees,
    Millimeters,
    Pixels,
}

impl QuantUnit {
    pub fn width_unit(&self) -> Option<WidthUnit> {
        match self {
            QuantUnit::Millimeters => Some(WidthUnit::Mm),
            QuantUnit::Pixels => Some(WidthUnit::Px),
            QuantUnit::Degrees => None,
        }
    }
}

/// Uniform quantizer over [lo, hi) with `bins` classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
    pub unit: QuantUnit,
}

impl Quantizer {
    /// 18 angle bins of 10 degrees over [-90, 90).
    pub fn angle18() -> Self {
        Self { lo: -90.0, hi: 90.0, bins: 18, unit: QuantUnit::Degrees }
    }

    /// Metric widths: [0, 150] mm in 15 classes.
    pub fn width_graspnet() -> Self {
        Self { lo: 0.0, hi: 150.0, bins: 15, unit: QuantUnit::Millimeters }
    }

    /// Pixel widths: [0, 90] px in 15 classes.
    pub fn width_ocid() -> Self {
        Self { lo: 0.0, hi: 90.0, bins: 15, unit: QuantUnit::Pixels }
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    /// Bin index for an in-range value; values at or above `hi` are an error.
    pub fn quantize_strict(&self, value: f64) -> Result<usize, CodecError> {
        if !(self.lo..self.hi).contains(&value) {
            return Err(CodecError::OutOfRange { value, lo: self.lo, hi: self.hi });
        }
        Ok((((value - self.lo) / self.bin_width()) as usize).min(self.bins - 1))
    }

    /// Bin index with clamping to [lo, hi]; the defined behavior for widths.
    pub fn quantize_clamped(&self, value: f64) -> usize {
        let v = value.clamp(self.lo, self.hi);
        (((v - self.lo) / self.bin_width()) as usize).min(self.bins - 1)
    }

    /// Center of a bin.
    pub fn dequantize(&self, bin: usize) -> Result<f64, CodecError> {
        if bin >= self.bins {
            return Err(CodecError::BadBin { bin, bins: self.bins });
        }
        Ok(self.lo + (bin as f64 + 0.5) * self.bin_width())
    }
}

pub fn quantize_angle(theta_deg: f64) -> Result<usize, CodecError> {
    Quantizer::angle18().quantize_strict(theta_deg)
}

pub fn dequantize_angle(bin: usize) -> Result<f64, CodecError> {
    Quantizer::angle18().dequantize(bin)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub angle: Quantizer,
    pub width: Quantizer,
    /// Ground-truth patches are squares of side 2*patch_half + 1.
    pub patch_half: usize,
}

impl CodecConfig {
    pub fn ocid_style() -> Self {
        Self {
            angle: Quantizer::angle18(),
            width: Quantizer::width_ocid(),
            patch_half: 2,
        }
    }

    pub fn graspnet_style() -> Self {
        Self {
            angle: Quantizer::angle18(),
            width: Quantizer::width_graspnet(),
            patch_half: 2,
        }
    }

    pub fn for_unit(unit: WidthUnit) -> Self {
        match unit {
            WidthUnit::Mm => Self::graspnet_style(),
            WidthUnit::Px => Self::ocid_style(),
        }
    }
}

/// Ground-truth label maps. Quality: 0 background / 1 graspable. Angle and
/// width carry one extra no-grasp class (index = bins) for untouched pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetStack {
    pub height: usize,
    pub width: usize,
    pub quality: Vec<u8>,
    pub angle: Vec<u8>,
    pub width_labels: Vec<u8>,
    pub config: CodecConfig,
}

impl TargetStack {
    pub fn angle_no_grasp(&self) -> u8 {
        self.config.angle.bins as u8
    }

    pub fn width_no_grasp(&self) -> u8 {
        self.config.width.bins as u8
    }

    /// One-hot score maps for the label maps, for feeding the extractor with
    /// ground-truth-perfect predictions. `margin` is the logit gap.
    pub fn to_scores(&self, margin: f32) -> HeatmapStack {
        let n = self.height * self.width;
        let mut quality = vec![0.0f32; 2 * n];
        for (i, &q) in self.quality.iter().enumerate() {
            quality[q as usize * n + i] = margin;
        }
        let angle_classes = self.config.angle.bins + 1;
        let mut angle = vec![0.0f32; angle_classes * n];
        for (i, &a) in self.angle.iter().enumerate() {
            angle[a as usize * n + i] = margin;
        }
        let width_classes = self.config.width.bins + 1;
        let mut width_scores = vec![0.0f32; width_classes * n];
        for (i, &w) in self.width_labels.iter().enumerate() {
            width_scores[w as usize * n + i] = margin;
        }
        HeatmapStack {
            height: self.height,
            width: self.width,
            quality,
            angle,
            angle_classes,
            width_scores,
            width_classes,
            config: self.config.clone(),
        }
    }
}

/// Predicted per-pixel class scores for the three heads, channel-major
/// (`channel * H * W + y * W + x`). The angle/width channel counts may exceed
/// the quantizer bins by one (the trainable no-grasp class); decoding only
/// reads the first `bins` channels.
#[derive(Debug, Clone)]
pub struct HeatmapStack {
    pub height: usize,
    pub width: usize,
    /// 2 channels: background, foreground.
    pub quality: Vec<f32>,
    pub angle: Vec<f32>,
    pub angle_classes: usize,
    pub width_scores: Vec<f32>,
    pub width_classes: usize,
    pub config: CodecConfig,
}

impl HeatmapStack {
    pub fn validate(&self) -> Result<(), CodecError> {
        let n = self.height * self.width;
        if self.quality.len() != 2 * n {
            return Err(CodecError::ShapeMismatch(format!(
                "quality has {} values, expected {}",
                self.quality.len(),
                2 * n
            )));
        }
        if self.angle.len() != self.angle_classes * n || self.angle_classes < self.config.angle.bins {
            return Err(CodecError::ShapeMismatch(format!(
                "angle has {} values in {} channels for {} bins",
                self.angle.len(),
                self.angle_classes,
                self.config.angle.bins
            )));
        }
        if self.width_scores.len() != self.width_classes * n || self.width_classes < self.config.width.bins {
            return Err(CodecError::ShapeMismatch(format!(
                "width has {} values in {} channels for {} bins",
                self.width_scores.len(),
                self.width_classes,
                self.config.width.bins
            )));
        }
        Ok(())
    }

    /// Per-pixel softmax foreground probability of the quality head.
    pub fn quality_foreground(&self) -> Vec<f32> {
        let n = self.height * self.width;
        (0..n)
            .map(|i| {
                let bg = self.quality[i] as f64;
                let fg = self.quality[n + i] as f64;
                let m = bg.max(fg);
                let eb = (bg - m).exp();
                let ef = (fg - m).exp();
                (ef / (eb + ef)) as f32
            })
            .collect()
    }
}

/// Stamp ground-truth maps for the target object's grasps.
///
/// Overlaps resolve as: quality takes the max (graspability is never erased),
/// angle and width take the last-written annotation. Pixels never touched
/// carry the no-grasp label.
pub fn encode_targets(
    grasps: &[Grasp],
    height: usize,
    width: usize,
    config: &CodecConfig,
) -> Result<TargetStack, CodecError> {
    let n = height * width;
    let mut stack = TargetStack {
        height,
        width,
        quality: vec![0u8; n],
        angle: vec![config.angle.bins as u8; n],
        width_labels: vec![config.width.bins as u8; n],
        config: config.clone(),
    };
    let ph = config.patch_half as isize;
    for g in grasps {
        let cx = g.x.round() as isize;
        let cy = g.y.round() as isize;
        if cx < 0 || cy < 0 || cx >= width as isize || cy >= height as isize {
            return Err(CodecError::CenterOutOfBounds { x: g.x, y: g.y, height, width });
        }
        let angle_bin = config.angle.quantize_strict(g.theta)? as u8;
        let width_bin = config.width.quantize_clamped(g.width) as u8;
        for y in (cy - ph).max(0)..=(cy + ph).min(height as isize - 1) {
            for x in (cx - ph).max(0)..=(cx + ph).min(width as isize - 1) {
                let i = y as usize * width + x as usize;
                stack.quality[i] = stack.quality[i].max(1);
                stack.angle[i] = angle_bin;
                stack.width_labels[i] = width_bin;
            }
        }
    }
    Ok(stack)
}

/// Grasp decoded from a predicted stack, with extraction diagnostics.
#[derive(Debug, Clone)]
pub struct ExtractedGrasp {
    pub grasp: Grasp,
    /// Set when the quality map is flat or its peak foreground probability
    /// stays below 0.5.
    pub low_confidence: bool,
    pub peak_value: f32,
    pub component_size: usize,
    /// Number of components tied for the largest size.
    pub tie_count: usize,
}

/// Decode a grasp: threshold the softmaxed quality map at 95% of its peak,
/// pick the broadest 8-connected component (seeded uniform choice on ties),
/// and read angle/width bins at the rounded component centroid.
pub fn extract_grasp(stack: &HeatmapStack, rng_seed: u64) -> Result<ExtractedGrasp, CodecError> {
    stack.validate()?;
    let (h, w) = (stack.height, stack.width);
    let n = h * w;
    if n == 0 {
        return Err(CodecError::EmptyQuality);
    }
    let qf = stack.quality_foreground();
    let peak = qf.iter().cloned().fold(f32::MIN, f32::max);
    let floor = qf.iter().cloned().fold(f32::MAX, f32::min);
    let flat = peak - floor <= 1e-6;
    let threshold = 0.95 * peak;
    let above: Vec<bool> = qf.iter().map(|&v| v >= threshold).collect();
    let components = connected_components(&above, h, w, true);
    debug_assert!(!components.is_empty());
    let largest = components.iter().map(|c| c.len()).max().unwrap_or(0);
    let tied: Vec<&Vec<usize>> = components.iter().filter(|c| c.len() == largest).collect();
    let chosen = if tied.len() == 1 {
        tied[0]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        tied[rng.gen_range(0..tied.len())]
    };
    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    for &i in chosen {
        sx += (i % w) as f64;
        sy += (i / w) as f64;
    }
    let m = chosen.len() as f64;
    // round half-up to the nearest pixel
    let cx = ((sx / m) + 0.5).floor().clamp(0.0, (w - 1) as f64) as usize;
    let cy = ((sy / m) + 0.5).floor().clamp(0.0, (h - 1) as f64) as usize;
    let at = cy * w + cx;
    let argmax = |scores: &[f32], classes: usize, read: usize| -> usize {
        let mut best = 0usize;
        let mut best_v = f32::MIN;
        for c in 0..read.min(classes) {
            let v = scores[c * n + at];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        best
    };
    let angle_bin = argmax(&stack.angle, stack.angle_classes, stack.config.angle.bins);
    let width_bin = argmax(&stack.width_scores, stack.width_classes, stack.config.width.bins);
    let theta = stack.config.angle.dequantize(angle_bin)?;
    let width = stack.config.width.dequantize(width_bin)?;
    let unit = stack.config.width.unit.width_unit().unwrap_or(WidthUnit::Px);
    let grasp = Grasp::new(cx as f64, cy as f64, theta, width, unit)
        .expect("bin centers are inside the valid ranges");
    Ok(ExtractedGrasp {
        grasp,
        low_confidence: flat || peak < 0.5,
        peak_value: peak,
        component_size: chosen.len(),
        tie_count: tied.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn angle_quantizer_boundaries() {
        assert_eq!(quantize_angle(-90.0).unwrap(), 0);
        assert_eq!(dequantize_angle(0).unwrap(), -85.0);
        assert_eq!(quantize_angle(0.0).unwrap(), 9);
        assert_eq!(dequantize_angle(9).unwrap(), 5.0);
        assert_eq!(quantize_angle(89.9).unwrap(), 17);
        assert!(matches!(quantize_angle(90.0), Err(CodecError::OutOfRange { .. })));
        assert!(matches!(quantize_angle(-90.1), Err(CodecError::OutOfRange { .. })));
        assert!(matches!(dequantize_angle(18), Err(CodecError::BadBin { .. })));
    }

    #[test]
    fn width_quantizer_clamps() {
        let q = Quantizer::width_graspnet();
        assert_eq!(q.quantize_clamped(0.0), 0);
        assert_eq!(q.quantize_clamped(75.0), 7);
        assert_eq!(q.dequantize(7).unwrap(), 75.0);
        assert_eq!(q.quantize_clamped(150.0), 14);
        assert_eq!(q.quantize_clamped(200.0), 14);
        let ocid = Quantizer::width_ocid();
        assert_eq!(ocid.bin_width(), 6.0);
        assert_eq!(ocid.quantize_clamped(200.0), 14);
    }

    #[test]
    fn quantize_dequantize_within_half_bin() {
        let quantizers = [Quantizer::angle18(), Quantizer::width_graspnet(), Quantizer::width_ocid()];
        for q in quantizers {
            let mut v = q.lo;
            while v < q.hi {
                let bin = q.quantize_strict(v).unwrap();
                let back = q.dequantize(bin).unwrap();
                assert!((back - v).abs() <= q.bin_width() / 2.0 + 1e-9, "{v} -> {bin} -> {back}");
                assert_eq!(q.quantize_strict(back).unwrap(), bin);
                v += q.bin_width() / 50.0;
            }
        }
    }

    fn grasp_px(x: f64, y: f64, theta: f64, width: f64) -> Grasp {
        Grasp::new(x, y, theta, width, WidthUnit::Px).unwrap()
    }

    #[test]
    fn encode_single_grasp_stamps_patch() {
        let cfg = CodecConfig::graspnet_style();
        let g = Grasp::new(50.0, 60.0, 15.0, 42.0, WidthUnit::Mm).unwrap();
        let stack = encode_targets(&[g], 128, 128, &cfg).unwrap();
        let fg: Vec<usize> = stack.quality.iter().enumerate().filter(|(_, q)| **q == 1).map(|(i, _)| i).collect();
        assert_eq!(fg.len(), 25);
        for &i in &fg {
            let (x, y) = (i % 128, i / 128);
            assert!((48..=52).contains(&x) && (58..=62).contains(&y));
            assert_eq!(stack.angle[i], 10); // 15 deg -> bin 10
            assert_eq!(stack.width_labels[i], 4); // 42 mm -> bin 4
        }
        let off = 10 * 128 + 10;
        assert_eq!(stack.quality[off], 0);
        assert_eq!(stack.angle[off], stack.angle_no_grasp());
        assert_eq!(stack.width_labels[off], stack.width_no_grasp());
    }

    #[test]
    fn encode_empty_list_is_all_background() {
        let cfg = CodecConfig::ocid_style();
        let stack = encode_targets(&[], 64, 64, &cfg).unwrap();
        assert!(stack.quality.iter().all(|&q| q == 0));
        assert!(stack.angle.iter().all(|&a| a == stack.angle_no_grasp()));
    }

    #[test]
    fn encode_disjoint_patches_are_independent() {
        let cfg = CodecConfig::ocid_style();
        let a = grasp_px(20.0, 20.0, -30.0, 24.0);
        let b = grasp_px(100.0, 100.0, 40.0, 60.0);
        let stack = encode_targets(&[a, b], 128, 128, &cfg).unwrap();
        assert_eq!(stack.quality.iter().filter(|q| **q == 1).count(), 50);
        assert_eq!(stack.angle[20 * 128 + 20], 6); // -30 -> bin 6
        assert_eq!(stack.angle[100 * 128 + 100], 13); // 40 -> bin 13
        assert_eq!(stack.width_labels[20 * 128 + 20], 4); // 24 px / 6 = bin 4
        assert_eq!(stack.width_labels[100 * 128 + 100], 10);
    }

    #[test]
    fn encode_rejects_out_of_bounds_center() {
        let cfg = CodecConfig::ocid_style();
        let g = grasp_px(200.0, 20.0, 0.0, 24.0);
        assert!(matches!(
            encode_targets(&[g], 64, 64, &cfg),
            Err(CodecError::CenterOutOfBounds { .. })
        ));
    }

    #[test]
    fn extract_recovers_encoded_grasp_at_bin_centers() {
        let cfg = CodecConfig::graspnet_style();
        let g = Grasp::new(50.0, 60.0, 15.0, 42.0, WidthUnit::Mm).unwrap();
        let stack = encode_targets(&[g], 128, 128, &cfg).unwrap();
        let ex = extract_grasp(&stack.to_scores(10.0), 0).unwrap();
        assert_eq!((ex.grasp.x, ex.grasp.y), (50.0, 60.0));
        assert_eq!(ex.grasp.theta, 15.0);
        assert_eq!(ex.grasp.width, 45.0); // bin 4 center of [40, 50)
        assert_eq!(ex.grasp.width_unit, WidthUnit::Mm);
        assert!(!ex.low_confidence);
    }

    #[test]
    fn roundtrip_on_random_single_grasps() {
        use rand::SeedableRng;
        let cfg = CodecConfig::ocid_style();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..100 {
            let g = grasp_px(
                rng.gen_range(8..120) as f64,
                rng.gen_range(8..120) as f64,
                rng.gen_range(-90.0..90.0),
                rng.gen_range(0.0..90.0),
            );
            let stack = encode_targets(&[g], 128, 128, &cfg).unwrap();
            let ex = extract_grasp(&stack.to_scores(8.0), trial).unwrap();
            assert_eq!((ex.grasp.x, ex.grasp.y), (g.x, g.y), "trial {trial}");
            assert!((ex.grasp.theta - g.theta).abs() <= 5.0, "trial {trial}");
            assert!((ex.grasp.width - g.width).abs() <= 3.0, "trial {trial}"); // half of the 6 px bin
        }
    }

    /// Build a quality-only stack with chosen foreground logits.
    fn quality_stack(h: usize, w: usize, fg_logit: impl Fn(usize, usize) -> f32) -> HeatmapStack {
        let cfg = CodecConfig::ocid_style();
        let n = h * w;
        let mut quality = vec![0.0f32; 2 * n];
        for y in 0..h {
            for x in 0..w {
                quality[n + y * w + x] = fg_logit(x, y);
            }
        }
        let angle_classes = cfg.angle.bins + 1;
        let width_classes = cfg.width.bins + 1;
        HeatmapStack {
            height: h,
            width: w,
            quality,
            angle: vec![0.0; angle_classes * n],
            angle_classes,
            width_scores: vec![0.0; width_classes * n],
            width_classes,
            config: cfg,
        }
    }

    #[test]
    fn broadest_peak_wins_over_higher_narrow_peak() {
        // 9 px at foreground prob ~1.0 vs 4 px at ~0.98: both survive the 95%
        // threshold, the 9 px component is chosen.
        let one = 12.0f32; // sigmoid ~ 0.999994
        let lower = (0.98f32 / 0.02).ln(); // sigmoid = 0.98
        let stack = quality_stack(32, 32, |x, y| {
            if (4..7).contains(&x) && (4..7).contains(&y) {
                one
            } else if (20..22).contains(&x) && (20..22).contains(&y) {
                lower
            } else {
                -12.0
            }
        });
        let ex = extract_grasp(&stack, 0).unwrap();
        assert_eq!(ex.component_size, 9);
        assert_eq!((ex.grasp.x, ex.grasp.y), (5.0, 5.0));
        assert_eq!(ex.tie_count, 1);
    }

    #[test]
    fn ties_resolve_by_seed_deterministically() {
        let stack = quality_stack(32, 32, |x, y| {
            if ((4..6).contains(&x) || (20..22).contains(&x)) && (4..6).contains(&y) {
                10.0
            } else {
                -10.0
            }
        });
        let a = extract_grasp(&stack, 7).unwrap();
        let b = extract_grasp(&stack, 7).unwrap();
        assert_eq!((a.grasp.x, a.grasp.y), (b.grasp.x, b.grasp.y));
        assert_eq!(a.tie_count, 2);
        // some seed pair picks different components
        let picks: std::collections::BTreeSet<u64> = (0..16)
            .map(|s| extract_grasp(&stack, s).unwrap().grasp.x as u64)
            .collect();
        assert_eq!(picks.len(), 2, "both tied components should be reachable");
    }

    #[test]
    fn flat_map_is_one_component_flagged_low_confidence() {
        let stack = quality_stack(16, 16, |_, _| 0.0);
        let ex = extract_grasp(&stack, 0).unwrap();
        assert_eq!(ex.component_size, 256);
        assert!(ex.low_confidence);
        // centroid of the full canvas
        assert_eq!((ex.grasp.x, ex.grasp.y), (8.0, 8.0));
    }

    #[test]
    fn quality_softmax_normalizes() {
        let stack = quality_stack(8, 8, |x, y| (x as f32) - (y as f32));
        let qf = stack.quality_foreground();
        for (i, &f) in qf.iter().enumerate() {
            assert!((0.0..=1.0).contains(&f));
            let n = 64;
            let bg = stack.quality[i] as f64;
            let fg = stack.quality[n + i] as f64;
            let m = bg.max(fg);
            let p_bg = ((bg - m).exp()) / ((bg - m).exp() + (fg - m).exp());
            assert!((p_bg + f as f64 - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut stack = quality_stack(8, 8, |_, _| 0.0);
        stack.angle.pop();
        assert!(matches!(extract_grasp(&stack, 0), Err(CodecError::ShapeMismatch(_))));
    }
}
