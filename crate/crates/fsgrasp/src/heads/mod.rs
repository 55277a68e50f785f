//! Trainable grasp-synthesis heads.
//!
//! Three independent encoder-decoder networks (quality, angle, width) consume
//! the 2-channel concatenation of the semantic heatmap H_q and the normalized
//! depth. Each head is trained separately with a weighted cross-entropy that
//! down-weights the no-grasp label. The angle and width heads carry one extra
//! no-grasp output class so the loss has a defined target on background
//! pixels; decoding ignores that class.

pub mod net;

use crate::codec::{extract_grasp, CodecConfig, ExtractedGrasp, Quantizer, TargetStack};
use crate::evalsuite::{GraspSynthesizer, PipelineError};
use crate::image::{BinaryMask, RgbdImage};
use crate::synthdata::SceneAnnotation;
use net::{Adam, FeatureMap, GradientSet, UNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("expected input of {expected_channels}x{expected_h}x{expected_w}, got {got_channels}x{got_h}x{got_w}")]
    ShapeMismatch {
        expected_channels: usize,
        expected_h: usize,
        expected_w: usize,
        got_channels: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch}, step {step}; lower the learning rate")]
    NanLoss { epoch: usize, step: usize },
    #[error("checkpoint {path}: {message}")]
    BadCheckpoint { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Quality,
    Angle,
    Width,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Quality, HeadKind::Angle, HeadKind::Width];

    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Quality => "quality",
            HeadKind::Angle => "angle",
            HeadKind::Width => "width",
        }
    }

    /// Output classes: quality is fg/bg; angle and width gain a no-grasp class.
    pub fn out_classes(&self, codec: &CodecConfig) -> usize {
        match self {
            HeadKind::Quality => 2,
            HeadKind::Angle => codec.angle.bins + 1,
            HeadKind::Width => codec.width.bins + 1,
        }
    }

    /// The label carrying the background weight.
    pub fn background_label(&self, codec: &CodecConfig) -> u8 {
        match self {
            HeadKind::Quality => 0,
            HeadKind::Angle => codec.angle.bins as u8,
            HeadKind::Width => codec.width.bins as u8,
        }
    }

    /// Same as [`HeadKind::background_label`] but derived from the class
    /// count alone (the angle/width no-grasp class is always the last one).
    pub fn background_label_of(&self, out_classes: usize) -> u8 {
        match self {
            HeadKind::Quality => 0,
            HeadKind::Angle | HeadKind::Width => (out_classes - 1) as u8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub decoder_channels: Vec<usize>,
    pub input_channels: usize,
    pub out_classes: usize,
    pub seed: u64,
}

impl HeadConfig {
    pub fn new(kind: HeadKind, codec: &CodecConfig, seed: u64) -> Self {
        Self {
            kind,
            decoder_channels: vec![4, 8, 16, 32],
            input_channels: 2,
            out_classes: kind.out_classes(codec),
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the no-grasp label in the cross-entropy, in (0, 1].
    pub background_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            background_weight: 0.1,
            seed: 0,
        }
    }
}

/// Pixel-weighted cross-entropy: sum(w_i * CE_i) / sum(w_i) with weight
/// `background_weight` on the background label and 1 elsewhere. Scores are
/// channel-major (class * n + pixel). Computation in f64.
pub struct CeLoss {
    pub classes: usize,
    pub background_label: u8,
    pub background_weight: f64,
}

impl CeLoss {
    fn pixel_weight(&self, label: u8) -> f64 {
        if label == self.background_label {
            self.background_weight
        } else {
            1.0
        }
    }

    pub fn loss(&self, scores: &[f64], labels: &[u8]) -> f64 {
        self.loss_and_grad_impl(scores, labels, false).0
    }

    pub fn loss_and_grad(&self, scores: &[f64], labels: &[u8]) -> (f64, Vec<f64>) {
        let (loss, grad) = self.loss_and_grad_impl(scores, labels, true);
        (loss, grad.expect("requested gradient"))
    }

    fn loss_and_grad_impl(&self, scores: &[f64], labels: &[u8], want_grad: bool) -> (f64, Option<Vec<f64>>) {
        let n = labels.len();
        assert_eq!(scores.len(), self.classes * n, "score buffer size");
        let weight_sum: f64 = labels.iter().map(|&l| self.pixel_weight(l)).sum();
        let mut loss = 0.0;
        let mut grad = want_grad.then(|| vec![0.0f64; scores.len()]);
        let mut probs = vec![0.0f64; self.classes];
        for i in 0..n {
            let label = labels[i] as usize;
            assert!(label < self.classes, "label {label} out of range");
            let mut maxv = f64::MIN;
            for c in 0..self.classes {
                maxv = maxv.max(scores[c * n + i]);
            }
            let mut denom = 0.0;
            for c in 0..self.classes {
                let e = (scores[c * n + i] - maxv).exp();
                probs[c] = e;
                denom += e;
            }
            let w = self.pixel_weight(labels[i]);
            let logp = (probs[label] / denom).ln();
            loss -= w * logp;
            if let Some(g) = grad.as_mut() {
                for c in 0..self.classes {
                    let p = probs[c] / denom;
                    let indicator = if c == label { 1.0 } else { 0.0 };
                    g[c * n + i] = w * (p - indicator) / weight_sum;
                }
            }
        }
        (loss / weight_sum, grad)
    }
}

/// Convenience wrapper over [`CeLoss`] for logits stored as a [`FeatureMap`].
pub fn weighted_ce_loss(scores: &FeatureMap, labels: &[u8], background_label: u8, background_weight: f64) -> f64 {
    let loss = CeLoss {
        classes: scores.channels,
        background_label,
        background_weight,
    };
    let scores64: Vec<f64> = scores.data.iter().map(|v| *v as f64).collect();
    loss.loss(&scores64, labels)
}

/// One trainable head.
pub struct GraspHead {
    pub config: HeadConfig,
    net: UNet,
}

impl GraspHead {
    pub fn init(config: HeadConfig) -> Self {
        let net = UNet::init(
            config.input_channels,
            config.out_classes,
            &config.decoder_channels,
            config.seed,
        );
        Self { config, net }
    }

    pub fn downsampling_factor(&self) -> usize {
        self.net.factor()
    }

    /// FNV hash over the exact bit patterns of all parameters; two heads with
    /// equal digests computed the same weights.
    pub fn weights_digest(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for tensor in self.net.param_tensors() {
            for v in tensor {
                hash ^= v.to_bits() as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        hash
    }

    /// Dense per-pixel class scores at the input resolution. Inputs whose
    /// sides are not multiples of the downsampling factor are zero-padded
    /// internally and the output cropped back.
    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap, TrainError> {
        if input.channels != self.config.input_channels {
            return Err(self.shape_error(input));
        }
        let f = self.net.factor();
        let ph = input.height.div_ceil(f) * f;
        let pw = input.width.div_ceil(f) * f;
        if (ph, pw) == (input.height, input.width) {
            Ok(self.net.forward(input))
        } else {
            let padded = input.pad_to(ph, pw);
            Ok(self.net.forward(&padded).crop_to(input.height, input.width))
        }
    }

    fn shape_error(&self, input: &FeatureMap) -> TrainError {
        TrainError::ShapeMismatch {
            expected_channels: self.config.input_channels,
            expected_h: self.net.factor(),
            expected_w: self.net.factor(),
            got_channels: input.channels,
            got_h: input.height,
            got_w: input.width,
        }
    }

    pub fn save(&self, path: &Path, codec: &CodecConfig) -> Result<(), TrainError> {
        let tensors = self.net.param_tensors();
        let names = self.net.tensor_names();
        let manifest: Vec<serde_json::Value> = names
            .iter()
            .zip(&tensors)
            .map(|(n, t)| serde_json::json!({"name": n, "len": t.len()}))
            .collect();
        let header = serde_json::json!({
            "version": CHECKPOINT_VERSION,
            "config": self.config,
            "angle_quantizer": codec.angle,
            "width_quantizer": codec.width,
            "patch_half": codec.patch_half,
            "tensors": manifest,
        });
        let header_bytes = crate::jsonfmt::to_canonical_string(&header).into_bytes();
        let mut file = std::fs::File::create(path)?;
        file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        for t in tensors {
            let mut bytes = Vec::with_capacity(t.len() * 4);
            for v in t {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            file.write_all(&bytes)?;
        }
        Ok(())
    }

    /// Load a head and the codec configuration it was trained with.
    pub fn load(path: &Path) -> Result<(Self, CodecConfig), TrainError> {
        let bad = |message: String| TrainError::BadCheckpoint {
            path: path.display().to_string(),
            message,
        };
        let mut file = std::fs::File::open(path)?;
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)?;
        let header: serde_json::Value =
            serde_json::from_slice(&header_bytes).map_err(|e| bad(format!("header: {e}")))?;
        let version = header["version"].as_u64().unwrap_or(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let config: HeadConfig = serde_json::from_value(header["config"].clone())
            .map_err(|e| bad(format!("config: {e}")))?;
        let angle: Quantizer = serde_json::from_value(header["angle_quantizer"].clone())
            .map_err(|e| bad(format!("angle quantizer: {e}")))?;
        let width: Quantizer = serde_json::from_value(header["width_quantizer"].clone())
            .map_err(|e| bad(format!("width quantizer: {e}")))?;
        let patch_half = header["patch_half"].as_u64().unwrap_or(2) as usize;
        let codec = CodecConfig { angle, width, patch_half };
        let mut head = GraspHead::init(config);
        let expected = head.net.tensor_names();
        let manifest = header["tensors"].as_array().cloned().unwrap_or_default();
        if manifest.len() != expected.len() {
            return Err(bad(format!(
                "{} tensors in file, net has {}",
                manifest.len(),
                expected.len()
            )));
        }
        for (tensor, (entry, name)) in head
            .net
            .param_tensors_mut()
            .into_iter()
            .zip(manifest.iter().zip(&expected))
        {
            let got_name = entry["name"].as_str().unwrap_or("");
            let got_len = entry["len"].as_u64().unwrap_or(0) as usize;
            if got_name != name || got_len != tensor.len() {
                return Err(TrainError::BadCheckpoint {
                    path: path.display().to_string(),
                    message: format!(
                        "tensor {got_name} ({got_len} values) does not match {name} ({} values)",
                        tensor.len()
                    ),
                });
            }
            let mut bytes = vec![0u8; got_len * 4];
            file.read_exact(&mut bytes)?;
            for (i, chunk) in bytes.chunks_exact(4).enumerate() {
                tensor[i] = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            }
        }
        Ok((head, codec))
    }
}

/// One training example: 2xHxW input and per-pixel labels for one head.
pub struct TrainSample {
    pub input: FeatureMap,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub epoch_losses: Vec<f64>,
}

/// Train a head with Adam on the weighted cross-entropy. Deterministic in
/// (head seed, data order, config seed).
pub fn train_head(head: &mut GraspHead, data: &[TrainSample], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let factor = head.net.factor();
    for s in data {
        if s.input.channels != head.config.input_channels
            || s.input.height % factor != 0
            || s.input.width % factor != 0
        {
            return Err(head.shape_error(&s.input));
        }
        for &l in &s.labels {
            if l as usize >= head.config.out_classes {
                return Err(TrainError::LabelOutOfRange {
                    label: l,
                    classes: head.config.out_classes,
                });
            }
        }
    }
    let loss_fn = CeLoss {
        classes: head.config.out_classes,
        background_label: head.config.kind.background_label_of(head.config.out_classes),
        background_weight: cfg.background_weight,
    };
    let mut adam = Adam::for_net(cfg.learning_rate, &head.net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let net = &head.net;
            let results: Vec<(f64, GradientSet)> = batch
                .par_iter()
                .map(|&idx| {
                    let sample = &data[idx];
                    let (logits, acts) = net.forward_train(&sample.input);
                    let scores64: Vec<f64> = logits.data.iter().map(|v| *v as f64).collect();
                    let (loss, grad64) = loss_fn.loss_and_grad(&scores64, &sample.labels);
                    let grad_logits = FeatureMap {
                        channels: logits.channels,
                        height: logits.height,
                        width: logits.width,
                        data: grad64.iter().map(|v| *v as f32).collect(),
                    };
                    let grads = net.backward(&acts, &grad_logits);
                    (loss, grads)
                })
                .collect();
            let mut total = head.net.zero_gradients();
            let mut batch_loss = 0.0;
            let scale = 1.0 / batch.len() as f32;
            for (loss, grads) in &results {
                batch_loss += loss;
                total.add_scaled(grads, scale);
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(TrainError::NanLoss { epoch, step });
            }
            adam.apply(head.net.param_tensors_mut(), &total);
            epoch_loss += batch_loss * batch.len() as f64;
        }
        epoch_losses.push(epoch_loss / data.len() as f64);
    }
    Ok(TrainOutcome { epoch_losses })
}

/// Median-centered depth normalization: (d - median) / 0.3 m, clamped to
/// [-1, 1]; invalid (zero) readings take the median, i.e. normalize to 0.
pub fn normalize_depth(depth: &[u16]) -> Vec<f32> {
    let mut valid: Vec<u16> = depth.iter().copied().filter(|&d| d > 0).collect();
    if valid.is_empty() {
        return vec![0.0; depth.len()];
    }
    valid.sort_unstable();
    let median = valid[valid.len() / 2] as f32;
    depth
        .iter()
        .map(|&d| {
            if d == 0 {
                0.0
            } else {
                ((d as f32 - median) / 300.0).clamp(-1.0, 1.0)
            }
        })
        .collect()
}

/// 2xHxW head input from the semantic heatmap and the scene depth.
pub fn head_input(query: &RgbdImage, heatmap: &[f32]) -> FeatureMap {
    let (h, w) = (query.height(), query.width());
    assert_eq!(heatmap.len(), h * w, "heatmap size");
    FeatureMap::from_planes(vec![heatmap.to_vec(), normalize_depth(query.depth())], h, w)
}

/// The three trained heads plus the codec they were trained against.
pub struct TrainedHeads {
    pub quality: GraspHead,
    pub angle: GraspHead,
    pub width: GraspHead,
    pub codec: CodecConfig,
}

impl TrainedHeads {
    pub fn init(codec: CodecConfig, seed: u64) -> Self {
        Self {
            quality: GraspHead::init(HeadConfig::new(HeadKind::Quality, &codec, seed)),
            angle: GraspHead::init(HeadConfig::new(HeadKind::Angle, &codec, seed.wrapping_add(1))),
            width: GraspHead::init(HeadConfig::new(HeadKind::Width, &codec, seed.wrapping_add(2))),
            codec,
        }
    }

    pub fn head(&self, kind: HeadKind) -> &GraspHead {
        match kind {
            HeadKind::Quality => &self.quality,
            HeadKind::Angle => &self.angle,
            HeadKind::Width => &self.width,
        }
    }

    pub fn head_mut(&mut self, kind: HeadKind) -> &mut GraspHead {
        match kind {
            HeadKind::Quality => &mut self.quality,
            HeadKind::Angle => &mut self.angle,
            HeadKind::Width => &mut self.width,
        }
    }

    /// Run the three heads and assemble the predicted stack.
    pub fn predict_stack(&self, query: &RgbdImage, heatmap: &[f32]) -> Result<crate::codec::HeatmapStack, TrainError> {
        let input = head_input(query, heatmap);
        let q = self.quality.forward(&input)?;
        let a = self.angle.forward(&input)?;
        let w = self.width.forward(&input)?;
        Ok(crate::codec::HeatmapStack {
            height: query.height(),
            width: query.width(),
            quality: q.data,
            angle: a.data,
            angle_classes: self.angle.config.out_classes,
            width_scores: w.data,
            width_classes: self.width.config.out_classes,
            config: self.codec.clone(),
        })
    }

    pub fn synthesize(&self, query: &RgbdImage, heatmap: &[f32], seed: u64) -> Result<ExtractedGrasp, PipelineError> {
        let stack = self.predict_stack(query, heatmap)?;
        Ok(extract_grasp(&stack, seed)?)
    }

    pub fn save_all(&self, dir: &Path) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir)?;
        for kind in HeadKind::ALL {
            self.head(kind).save(&dir.join(format!("{}.fsgh", kind.name())), &self.codec)?;
        }
        Ok(())
    }

    pub fn load_all(dir: &Path) -> Result<Self, TrainError> {
        let (quality, codec) = GraspHead::load(&dir.join("quality.fsgh"))?;
        let (angle, codec_a) = GraspHead::load(&dir.join("angle.fsgh"))?;
        let (width, codec_w) = GraspHead::load(&dir.join("width.fsgh"))?;
        for other in [&codec_a, &codec_w] {
            if other.angle != codec.angle || other.width != codec.width {
                return Err(TrainError::BadCheckpoint {
                    path: dir.display().to_string(),
                    message: "heads were trained with different quantizers".to_string(),
                });
            }
        }
        Ok(Self { quality, angle, width, codec })
    }
}

impl GraspSynthesizer for TrainedHeads {
    fn synthesize(
        &self,
        query: &RgbdImage,
        heatmap: &[f32],
        _selected_mask: &BinaryMask,
        _annotation: Option<&SceneAnnotation>,
        seed: u64,
    ) -> Result<ExtractedGrasp, PipelineError> {
        TrainedHeads::synthesize(self, query, heatmap, seed)
    }
}

/// Per-instance training samples from annotated scenes: the input heatmap is
/// the instance's ground-truth mask (an oracle H_q) and the labels come from
/// encoding its grasps.
pub fn build_training_samples(
    scenes: &[(RgbdImage, SceneAnnotation)],
    codec: &CodecConfig,
    kind: HeadKind,
    class_filter: Option<&[u32]>,
) -> Result<Vec<TrainSample>, PipelineError> {
    let mut samples = Vec::new();
    for (image, ann) in scenes {
        for inst in &ann.instances {
            if let Some(allowed) = class_filter {
                if !allowed.contains(&inst.class_id) {
                    continue;
                }
            }
            let heatmap: Vec<f32> = inst.mask.pixels().iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
            let input = head_input(image, &heatmap);
            let targets: TargetStack = crate::codec::encode_targets(&inst.grasps, image.height(), image.width(), codec)?;
            let labels = match kind {
                HeadKind::Quality => targets.quality,
                HeadKind::Angle => targets.angle,
                HeadKind::Width => targets.width_labels,
            };
            samples.push(TrainSample { input, labels });
        }
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;

    fn codec() -> CodecConfig {
        CodecConfig::ocid_style()
    }

    #[test]
    fn forward_shape_contracts() {
        let c = codec();
        let q = GraspHead::init(HeadConfig::new(HeadKind::Quality, &c, 0));
        let a = GraspHead::init(HeadConfig::new(HeadKind::Angle, &c, 0));
        let w = GraspHead::init(HeadConfig::new(HeadKind::Width, &c, 0));
        let input = FeatureMap::zeros(2, 64, 64);
        assert_eq!(q.forward(&input).unwrap().channels, 2);
        assert_eq!(a.forward(&input).unwrap().channels, 19);
        assert_eq!(w.forward(&input).unwrap().channels, 16);
        let out = q.forward(&input).unwrap();
        assert_eq!((out.height, out.width), (64, 64));

        // non-multiple inputs are padded and cropped back
        let odd = FeatureMap::zeros(2, 50, 70);
        let out = a.forward(&odd).unwrap();
        assert_eq!((out.height, out.width), (50, 70));

        // wrong channel count errors with both shapes in the message
        let bad = FeatureMap::zeros(3, 64, 64);
        match q.forward(&bad) {
            Err(TrainError::ShapeMismatch { got_channels: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let c = codec();
        let head = GraspHead::init(HeadConfig::new(HeadKind::Quality, &c, 3));
        let mut input = FeatureMap::zeros(2, 32, 32);
        for (i, v) in input.data.iter_mut().enumerate() {
            *v = ((i % 97) as f32) / 97.0 - 0.5;
        }
        let a = head.forward(&input).unwrap();
        let b = head.forward(&input).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn ce_loss_closed_forms() {
        let loss = CeLoss { classes: 4, background_label: 0, background_weight: 0.3 };
        let n = 6;
        // uniform scores, all pixels share one label: ln(C) regardless of w_bg
        let scores = vec![0.0f64; 4 * n];
        let labels = vec![2u8; n];
        assert!((loss.loss(&scores, &labels) - 4f64.ln()).abs() < 1e-12);
        let labels_bg = vec![0u8; n];
        assert!((loss.loss(&scores, &labels_bg) - 4f64.ln()).abs() < 1e-12);

        // near one-hot on the true class: loss goes to zero
        let labels: Vec<u8> = (0..n).map(|i| (i % 4) as u8).collect();
        let mut hot = vec![0.0f64; 4 * n];
        for (i, &l) in labels.iter().enumerate() {
            hot[l as usize * n + i] = 50.0;
        }
        assert!(loss.loss(&hot, &labels) < 1e-9);

        // w_bg = 1 equals plain unweighted CE
        let unweighted = CeLoss { classes: 4, background_label: 0, background_weight: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..4 * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..4) as u8).collect();
        let plain: f64 = {
            let mut acc = 0.0;
            for i in 0..n {
                let mut denom = 0.0;
                for c in 0..4 {
                    denom += scores[c * n + i].exp();
                }
                acc -= (scores[labels[i] as usize * n + i].exp() / denom).ln();
            }
            acc / n as f64
        };
        assert!((unweighted.loss(&scores, &labels) - plain).abs() < 1e-9);
        assert!(unweighted.loss(&scores, &labels) >= 0.0);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let classes = rng.gen_range(2..6usize);
            let n = 16; // 4x4 map
            let loss = CeLoss {
                classes,
                background_label: 0,
                background_weight: rng.gen_range(0.05..1.0),
            };
            let scores: Vec<f64> = (0..classes * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..classes) as u8).collect();
            let (_, grad) = loss.loss_and_grad(&scores, &labels);
            let h = 1e-6;
            for probe in 0..6 {
                let idx = (probe * 131 + 17) % scores.len();
                let mut plus = scores.clone();
                plus[idx] += h;
                let mut minus = scores.clone();
                minus[idx] -= h;
                let fd = (loss.loss(&plus, &labels) - loss.loss(&minus, &labels)) / (2.0 * h);
                let an = grad[idx];
                let denom = an.abs().max(1e-8);
                assert!(
                    ((fd - an) / denom).abs() < 1e-4 || (fd - an).abs() < 1e-10,
                    "idx {idx}: fd={fd} analytic={an}"
                );
            }
        }
    }

    fn tiny_sample(seed: u64) -> TrainSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut input = FeatureMap::zeros(2, 32, 32);
        for v in input.data.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let mut labels = vec![0u8; 32 * 32];
        for y in 10..15 {
            for x in 10..15 {
                labels[y * 32 + x] = 1;
            }
        }
        TrainSample { input, labels }
    }

    #[test]
    fn single_sample_overfits_in_200_steps() {
        let c = codec();
        let mut head = GraspHead::init(HeadConfig::new(HeadKind::Quality, &c, 1));
        let data = vec![tiny_sample(42)];
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 1,
            learning_rate: 3e-3,
            background_weight: 0.1,
            seed: 0,
        };
        let outcome = train_head(&mut head, &data, &cfg).unwrap();
        let final_loss = *outcome.epoch_losses.last().unwrap();
        assert!(final_loss < 0.1, "final CE {final_loss}");
    }

    #[test]
    fn training_is_deterministic() {
        let c = codec();
        let data: Vec<TrainSample> = (0..6).map(|i| tiny_sample(i)).collect();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            learning_rate: 1e-3,
            background_weight: 0.1,
            seed: 9,
        };
        let run = || {
            let mut head = GraspHead::init(HeadConfig::new(HeadKind::Quality, &c, 7));
            let out = train_head(&mut head, &data, &cfg).unwrap();
            (out.epoch_losses, head.weights_digest())
        };
        let (la, wa) = run();
        let (lb, wb) = run();
        assert_eq!(la, lb);
        assert_eq!(wa, wb);
    }

    #[test]
    fn nan_loss_aborts_with_guidance() {
        let c = codec();
        let mut head = GraspHead::init(HeadConfig::new(HeadKind::Quality, &c, 1));
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 1,
            learning_rate: 1e18,
            background_weight: 0.1,
            seed: 0,
        };
        let err = train_head(&mut head, &[tiny_sample(1)], &cfg);
        match err {
            Err(TrainError::NanLoss { .. }) => {}
            other => panic!("expected NanLoss, got {other:?}"),
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let c = codec();
        let mut head = GraspHead::init(HeadConfig::new(HeadKind::Quality, &c, 1));
        assert!(matches!(
            train_head(&mut head, &[], &TrainConfig::default()),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let c = codec();
        let head = GraspHead::init(HeadConfig::new(HeadKind::Angle, &c, 13));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("angle.fsgh");
        head.save(&path, &c).unwrap();
        let (loaded, codec_back) = GraspHead::load(&path).unwrap();
        assert_eq!(codec_back.angle, c.angle);
        assert_eq!(codec_back.width, c.width);
        let mut input = FeatureMap::zeros(2, 32, 32);
        for (i, v) in input.data.iter_mut().enumerate() {
            *v = (i as f32 * 0.37).sin();
        }
        assert_eq!(head.forward(&input).unwrap().data, loaded.forward(&input).unwrap().data);
    }

    #[test]
    fn checkpoint_rejects_corrupt_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.fsgh");
        std::fs::write(&path, [9u8, 0, 0, 0, 0, 0, 0, 0, b'n', b'o', b'p', b'e', b'!', b'!', b'!', b'!', b'!']).unwrap();
        assert!(matches!(GraspHead::load(&path), Err(TrainError::BadCheckpoint { .. })));
    }

    #[test]
    fn translation_by_stride_multiples_translates_argmax() {
        let c = codec();
        let head = GraspHead::init(HeadConfig::new(HeadKind::Quality, &c, 21));
        let canvas = 160;
        let content = 24;
        let place = |ox: usize, oy: usize| -> FeatureMap {
            let mut input = FeatureMap::zeros(2, canvas, canvas);
            for y in 0..content {
                for x in 0..content {
                    let v = ((x * 7 + y * 13) % 29) as f32 / 29.0;
                    input.data[(oy + y) * canvas + ox + x] = v;
                    input.data[canvas * canvas + (oy + y) * canvas + ox + x] = 0.5 - v;
                }
            }
            input
        };
        let a = head.forward(&place(64, 64)).unwrap();
        let b = head.forward(&place(72, 80)).unwrap();
        let argmax = |m: &FeatureMap, x: usize, y: usize| -> usize {
            (0..m.channels)
                .max_by(|&p, &q| m.at(p, y, x).partial_cmp(&m.at(q, y, x)).unwrap())
                .unwrap()
        };
        // compare on the content block plus margin, well inside both canvases
        for y in 0..content + 16 {
            for x in 0..content + 16 {
                let (ax, ay) = (64 - 8 + x, 64 - 8 + y);
                let (bx, by) = (ax + 8, ay + 16);
                assert_eq!(argmax(&a, ax, ay), argmax(&b, bx, by), "at ({x},{y})");
            }
        }
    }

    #[test]
    fn depth_normalization_handles_invalid_readings() {
        let depth = vec![0u16, 600, 600, 900, 300, 600];
        let n = normalize_depth(&depth);
        assert_eq!(n[0], 0.0); // invalid -> median
        assert_eq!(n[1], 0.0); // median itself
        assert_eq!(n[3], 1.0); // +300 mm clamps to 1
        assert_eq!(n[4], -1.0);
        assert!(normalize_depth(&[0, 0]).iter().all(|v| *v == 0.0));
    }
}
