//! Episodic benchmark harness.
//!
//! An episode pairs a query scene with a support set for one test class; the
//! pipeline under test returns a mask and a grasp. The harness aggregates
//! segmentation metrics (mIoU over test classes, COCO AP / AP50 / AR@1 with a
//! single detection per image) and grasping metrics (A_sem: grasp center on
//! the target object; A_semGR: additionally IoU > 0.25 and angle error < 30
//! degrees against some ground-truth grasp of the target).
//!
//! Episodes evaluate in parallel; every episode draws from its own RNG stream
//! derived from (seed, index), and aggregation runs in index order, so a
//! report is a pure function of (dataset, pipeline, protocol).

use crate::backends::{BackendError, Embedder, SegmentConfig, Segmentator};
use crate::candidates::{dedup_masks, filter_candidates, CandidateError, FilterConfig};
use crate::codec::{encode_targets, extract_grasp, CodecConfig, CodecError, ExtractedGrasp};
use crate::geometry::{grasp_to_box, is_correct_grasp, GeometryError, Grasp, WidthUnit};
use crate::image::{BinaryMask, RgbdImage, SupportSet, SupportShot};
use crate::selector::{select, SelectionOutcome, SelectorConfig, SelectorError};
use crate::synthdata::{gen_dataset, splitmix, GenConfig, SceneAnnotation, SynthClass, SynthError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error(transparent)]
    Candidates(#[from] CandidateError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Train(#[from] crate::heads::TrainError),
    #[error("grasp synthesis needs the scene annotation, which was not provided")]
    MissingAnnotation,
    #[error("millimeter widths need an mm-per-px scale to do pixel geometry")]
    MmScaleRequired,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("split is invalid: {0:?}")]
    InvalidSplit(Vec<SplitViolation>),
    #[error("dataset has no scene containing test classes {0:?}")]
    MissingScenes(Vec<u32>),
    #[error("dataset has no support pool for test classes {0:?}")]
    MissingSupportPool(Vec<u32>),
    #[error("support pool for class {class} has {have} shots, need {need}")]
    PoolTooSmall { class: u32, have: usize, need: usize },
    #[error("episode {index}: {source}")]
    Episode {
        index: usize,
        #[source]
        source: PipelineError,
    },
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// Disjoint train/test class split.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub train_classes: Vec<u32>,
    pub test_classes: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitViolation {
    SharedClass(u32),
    EmptyTrain,
    EmptyTest,
}

impl SplitSpec {
    pub fn new(mut train: Vec<u32>, mut test: Vec<u32>) -> Self {
        train.sort_unstable();
        train.dedup();
        test.sort_unstable();
        test.dedup();
        Self {
            train_classes: train,
            test_classes: test,
        }
    }

    /// Empty result means the split is valid.
    pub fn validate(&self) -> Vec<SplitViolation> {
        let mut violations = Vec::new();
        if self.train_classes.is_empty() {
            violations.push(SplitViolation::EmptyTrain);
        }
        if self.test_classes.is_empty() {
            violations.push(SplitViolation::EmptyTest);
        }
        for &c in &self.train_classes {
            if self.test_classes.binary_search(&c).is_ok() {
                violations.push(SplitViolation::SharedClass(c));
            }
        }
        violations
    }
}

pub fn validate_split(spec: &SplitSpec) -> Vec<SplitViolation> {
    spec.validate()
}

/// One benchmark unit.
pub struct Episode<'a> {
    pub index: usize,
    pub query: &'a RgbdImage,
    pub annotation: &'a SceneAnnotation,
    pub support: SupportSet,
    pub target_class: u32,
    pub shots: usize,
    /// Per-episode RNG seed for any stochastic tie-breaks downstream.
    pub seed: u64,
}

/// What a pipeline produced for one episode. `mask: None` means the pipeline
/// reported the class absent.
#[derive(Debug, Clone)]
pub struct EpisodePrediction {
    pub mask: Option<BinaryMask>,
    /// Selection confidence in [0, 1] (used as the COCO detection score).
    pub confidence: f64,
    pub grasp: Option<Grasp>,
    pub chosen_index: Option<usize>,
}

impl EpisodePrediction {
    pub fn absent() -> Self {
        Self {
            mask: None,
            confidence: 0.0,
            grasp: None,
            chosen_index: None,
        }
    }
}

pub trait EpisodePipeline: Sync {
    fn run(&self, episode: &Episode) -> Result<EpisodePrediction, PipelineError>;
}

/// Grasp synthesis stage: from the semantic heatmap (plus depth) to a grasp.
pub trait GraspSynthesizer: Sync {
    fn synthesize(
        &self,
        query: &RgbdImage,
        heatmap: &[f32],
        selected_mask: &BinaryMask,
        annotation: Option<&SceneAnnotation>,
        seed: u64,
    ) -> Result<ExtractedGrasp, PipelineError>;
}

/// Oracle grasp source: encodes the ground-truth grasps of the instance best
/// matching the selected mask and decodes a grasp from those perfect maps.
/// Stands in for trained heads when benchmarking the selection stages alone.
pub struct GtEncodeSynthesizer {
    pub patch_half: usize,
}

impl Default for GtEncodeSynthesizer {
    fn default() -> Self {
        Self { patch_half: 2 }
    }
}

impl GraspSynthesizer for GtEncodeSynthesizer {
    fn synthesize(
        &self,
        query: &RgbdImage,
        _heatmap: &[f32],
        selected_mask: &BinaryMask,
        annotation: Option<&SceneAnnotation>,
        seed: u64,
    ) -> Result<ExtractedGrasp, PipelineError> {
        let annotation = annotation.ok_or(PipelineError::MissingAnnotation)?;
        let mut config = CodecConfig::for_unit(annotation.width_unit);
        config.patch_half = self.patch_half;
        let best = annotation
            .instances
            .iter()
            .map(|inst| (inst, selected_mask.iou(&inst.mask)))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let grasps: &[Grasp] = match best {
            Some((inst, iou)) if iou >= 0.5 => &inst.grasps,
            // selection missed every instance: perfect heads fed a wrong mask
            // would see no graspable pixels
            _ => &[],
        };
        let stack = encode_targets(grasps, query.height(), query.width(), &config)?;
        Ok(extract_grasp(&stack.to_scores(10.0), seed)?)
    }
}

/// The full pipeline: proposals, NMS, plane filtering, inverted few-shot
/// selection, then grasp synthesis.
pub struct StandardPipeline<'a> {
    pub segmentator: &'a dyn Segmentator,
    pub embedder: &'a dyn Embedder,
    pub synthesizer: &'a dyn GraspSynthesizer,
    pub seg_config: SegmentConfig,
    pub filter: FilterConfig,
    pub selector: SelectorConfig,
    /// Hand the scene annotation to the synthesizer (oracle sources only).
    pub annotation_to_synthesizer: bool,
    /// Disable for segmentation-only evaluation.
    pub synthesize_grasps: bool,
}

impl<'a> StandardPipeline<'a> {
    pub fn new(
        segmentator: &'a dyn Segmentator,
        embedder: &'a dyn Embedder,
        synthesizer: &'a dyn GraspSynthesizer,
    ) -> Self {
        Self {
            segmentator,
            embedder,
            synthesizer,
            seg_config: SegmentConfig::default(),
            filter: FilterConfig::default(),
            selector: SelectorConfig::default(),
            annotation_to_synthesizer: true,
            synthesize_grasps: true,
        }
    }
}

impl EpisodePipeline for StandardPipeline<'_> {
    fn run(&self, episode: &Episode) -> Result<EpisodePrediction, PipelineError> {
        let proposals = self.segmentator.segment(episode.query, &self.seg_config)?;
        if proposals.is_empty() {
            return Ok(EpisodePrediction::absent());
        }
        let deduped = dedup_masks(&proposals, self.filter.nms_iou);
        let set = filter_candidates(&deduped, episode.query, &self.filter)?;
        let outcome = select(&set, episode.query, &episode.support, self.embedder, &self.selector)?;
        let result = match outcome {
            SelectionOutcome::NoTarget => return Ok(EpisodePrediction::absent()),
            SelectionOutcome::Target(r) => r,
        };
        let grasp = if self.synthesize_grasps {
            let annotation = self.annotation_to_synthesizer.then_some(episode.annotation);
            let extracted = self.synthesizer.synthesize(
                episode.query,
                &result.heatmap,
                &result.mask,
                annotation,
                episode.seed,
            )?;
            Some(extracted.grasp)
        } else {
            None
        };
        Ok(EpisodePrediction {
            confidence: (result.scores[result.chosen_index] + 1.0) / 2.0,
            mask: Some(result.mask),
            grasp,
            chosen_index: Some(result.chosen_index),
        })
    }
}

/// Convert a grasp to pixel widths for geometry, using the dataset scale for
/// metric widths.
pub fn pixel_grasp(g: &Grasp, mm_per_px: Option<f64>) -> Result<Grasp, PipelineError> {
    match g.width_unit {
        WidthUnit::Px => Ok(*g),
        WidthUnit::Mm => {
            let scale = mm_per_px.ok_or(PipelineError::MmScaleRequired)?;
            Ok(Grasp::new(g.x, g.y, g.theta, g.width / scale, WidthUnit::Px)
                .map_err(PipelineError::Geometry)?)
        }
    }
}

/// IoU of the predicted mask against the union of ground-truth instances of
/// the target class.
pub fn eval_segmentation(pred: &BinaryMask, annotation: &SceneAnnotation, target_class: u32) -> f64 {
    let (h, w) = pred.size();
    let gt = annotation.class_mask(target_class, h, w);
    pred.iou(&gt)
}

/// (sem_hit, grasp_hit) for a predicted grasp.
///
/// sem_hit: the predicted center lies inside some ground-truth grasp box of
/// the target class. grasp_hit: sem_hit and the prediction is a correct grasp
/// against at least one ground-truth grasp of the target class.
pub fn eval_grasp(
    pred: &Grasp,
    annotation: &SceneAnnotation,
    target_class: u32,
    mm_per_px: Option<f64>,
) -> Result<(bool, bool), PipelineError> {
    let mut sem_hit = false;
    let mut any_correct = false;
    for inst in annotation.instances.iter().filter(|i| i.class_id == target_class) {
        for gt in &inst.grasps {
            if pred.width_unit != gt.width_unit {
                return Err(PipelineError::Geometry(GeometryError::UnitMismatch {
                    pred: pred.width_unit,
                    gt: gt.width_unit,
                }));
            }
            let gt_px = pixel_grasp(gt, mm_per_px)?;
            let pred_px = pixel_grasp(pred, mm_per_px)?;
            if grasp_to_box(&gt_px).contains(pred.x, pred.y) {
                sem_hit = true;
            }
            if is_correct_grasp(&pred_px, &gt_px).map_err(PipelineError::Geometry)? {
                any_correct = true;
            }
        }
    }
    Ok((sem_hit, sem_hit && any_correct))
}

/// One scored prediction (or nothing) against the episode's GT instances.
pub struct CocoEpisode {
    pub prediction: Option<(BinaryMask, f64)>,
    pub gt: Vec<BinaryMask>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CocoMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ar1: f64,
}

/// COCO-style metrics for a single-detection-per-image evaluator: AP averaged
/// over IoU thresholds 0.50:0.05:0.95 with 101-point interpolation, AP50, and
/// AR with at most one detection.
pub fn coco_metrics(episodes: &[CocoEpisode]) -> CocoMetrics {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let total_gt: usize = episodes.iter().map(|e| e.gt.len()).sum();
    if total_gt == 0 {
        return CocoMetrics { ap: 0.0, ap50: 0.0, ar1: 0.0 };
    }
    // detections sorted by score descending, episode index breaking ties
    let mut detections: Vec<(usize, f64)> = episodes
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.prediction.as_ref().map(|(_, s)| (i, *s)))
        .collect();
    detections.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    let mut ap_sum = 0.0;
    let mut ap50 = 0.0;
    let mut recall_sum = 0.0;
    for &t in &thresholds {
        let mut matched: Vec<Vec<bool>> = episodes.iter().map(|e| vec![false; e.gt.len()]).collect();
        let mut tp = 0usize;
        let mut tps = Vec::with_capacity(detections.len());
        for &(ep_idx, _) in &detections {
            let episode = &episodes[ep_idx];
            let pred = &episode.prediction.as_ref().expect("filtered above").0;
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in episode.gt.iter().enumerate() {
                if matched[ep_idx][gi] {
                    continue;
                }
                let iou = pred.iou(gt);
                if iou >= t && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            if let Some((gi, _)) = best {
                matched[ep_idx][gi] = true;
                tp += 1;
                tps.push(true);
            } else {
                tps.push(false);
            }
        }
        // precision-recall curve over the ranked detections
        let mut precisions = Vec::with_capacity(tps.len());
        let mut recalls = Vec::with_capacity(tps.len());
        let mut cum_tp = 0usize;
        for (k, &is_tp) in tps.iter().enumerate() {
            if is_tp {
                cum_tp += 1;
            }
            precisions.push(cum_tp as f64 / (k + 1) as f64);
            recalls.push(cum_tp as f64 / total_gt as f64);
        }
        // 101-point interpolated AP
        let mut ap_t = 0.0;
        for ri in 0..=100 {
            let r = ri as f64 / 100.0;
            let p = precisions
                .iter()
                .zip(&recalls)
                .filter(|(_, &rec)| rec >= r)
                .map(|(&p, _)| p)
                .fold(0.0f64, f64::max);
            ap_t += p;
        }
        ap_t /= 101.0;
        ap_sum += ap_t;
        if (t - 0.5).abs() < 1e-9 {
            ap50 = ap_t;
        }
        recall_sum += tp as f64 / total_gt as f64;
    }
    CocoMetrics {
        ap: ap_sum / thresholds.len() as f64,
        ap50,
        ar1: recall_sum / thresholds.len() as f64,
    }
}

/// Benchmark dataset: scenes with annotations, a class split, and per-class
/// support pools disjoint from the scenes.
pub struct EvalDataset {
    pub scenes: Vec<(RgbdImage, SceneAnnotation)>,
    pub split: SplitSpec,
    pub support_pools: BTreeMap<u32, Vec<SupportShot>>,
    pub width_unit: WidthUnit,
    pub mm_per_px: Option<f64>,
}

impl EvalDataset {
    /// Fully synthetic dataset: `n_scenes` mixed-class scenes plus pools for
    /// the test side of a class-disjoint split.
    pub fn synthetic(
        classes: &[SynthClass],
        n_scenes: usize,
        objects_per_scene: usize,
        train_fraction: f64,
        seed: u64,
        cfg: &GenConfig,
    ) -> Result<Self, SynthError> {
        let (scenes, bundle) = gen_dataset(classes, n_scenes, objects_per_scene, train_fraction, seed, cfg)?;
        Ok(Self {
            scenes,
            split: bundle.spec,
            support_pools: bundle.support_pools,
            width_unit: WidthUnit::Px,
            mm_per_px: None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Protocol {
    pub shots: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Protocol {
    pub fn new(shots: usize, iterations: usize, seed: u64) -> Self {
        Self { shots, iterations, seed }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpisodeRecord {
    pub index: usize,
    pub scene: String,
    pub target_class: u32,
    pub iou: f64,
    pub sem_hit: bool,
    pub grasp_hit: bool,
    pub confidence: f64,
    pub predicted: bool,
    pub grasped: bool,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub episodes: usize,
    pub seed: u64,
    pub shots: usize,
    pub miou: Option<f64>,
    pub per_class_iou: BTreeMap<u32, f64>,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ar1: Option<f64>,
    pub a_sem: Option<f64>,
    pub a_sem_gr: Option<f64>,
    pub records: Vec<EpisodeRecord>,
}

impl EvalReport {
    fn opt(v: Option<f64>) -> Value {
        match v {
            Some(x) => json!(x),
            None => Value::Null,
        }
    }

    /// Aggregate metrics as a JSON value with sorted keys.
    pub fn to_json(&self) -> Value {
        let per_class: BTreeMap<String, f64> = self
            .per_class_iou
            .iter()
            .map(|(k, v)| (format!("{k:04}"), *v))
            .collect();
        json!({
            "a_sem": Self::opt(self.a_sem),
            "a_sem_gr": Self::opt(self.a_sem_gr),
            "ap": Self::opt(self.ap),
            "ap50": Self::opt(self.ap50),
            "ar1": Self::opt(self.ar1),
            "episodes": self.episodes,
            "miou": Self::opt(self.miou),
            "per_class_iou": per_class,
            "seed": self.seed,
            "shots": self.shots,
        })
    }

    /// Canonical report serialization: sorted keys, 6 significant digits.
    pub fn to_canonical_json(&self) -> String {
        crate::jsonfmt::to_report_string(&self.to_json())
    }

    /// Per-episode rows as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,scene,target_class,iou,sem_hit,grasp_hit,confidence,predicted,grasped\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{:.6},{},{},{:.6},{},{}\n",
                r.index, r.scene, r.target_class, r.iou, r.sem_hit, r.grasp_hit, r.confidence, r.predicted, r.grasped
            ));
        }
        out
    }
}

/// Episode parameters drawn from the protocol's seeded stream `index`.
fn sample_episode<'a>(
    dataset: &'a EvalDataset,
    scenes_by_class: &BTreeMap<u32, Vec<usize>>,
    protocol: &Protocol,
    index: usize,
) -> Episode<'a> {
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    rng.set_stream(index as u64 + 1);
    let classes = &dataset.split.test_classes;
    let target_class = classes[rng.gen_range(0..classes.len())];
    let scene_ids = &scenes_by_class[&target_class];
    let scene_idx = scene_ids[rng.gen_range(0..scene_ids.len())];
    let (query, annotation) = &dataset.scenes[scene_idx];
    let pool = &dataset.support_pools[&target_class];
    // sample `shots` distinct pool indices
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    for i in 0..protocol.shots {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    let shots: Vec<SupportShot> = indices[..protocol.shots].iter().map(|&i| pool[i].clone()).collect();
    let support = SupportSet::new(shots, Some(target_class)).expect("pool shots are valid");
    Episode {
        index,
        query,
        annotation,
        support,
        target_class,
        shots: protocol.shots,
        seed: splitmix(protocol.seed ^ (index as u64).wrapping_mul(0x9E37_79B9)),
    }
}

/// Run the episodic benchmark. Deterministic for a fixed (dataset, pipeline,
/// protocol); episodes evaluate in parallel.
pub fn run_benchmark(
    dataset: &EvalDataset,
    pipeline: &dyn EpisodePipeline,
    protocol: &Protocol,
) -> Result<EvalReport, EvalError> {
    let violations = dataset.split.validate();
    if !violations.is_empty() {
        return Err(EvalError::InvalidSplit(violations));
    }
    let mut scenes_by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &class in &dataset.split.test_classes {
        let ids: Vec<usize> = dataset
            .scenes
            .iter()
            .enumerate()
            .filter(|(_, (_, ann))| ann.contains_class(class))
            .map(|(i, _)| i)
            .collect();
        scenes_by_class.insert(class, ids);
    }
    let missing: Vec<u32> = scenes_by_class
        .iter()
        .filter(|(_, v)| v.is_empty())
        .map(|(c, _)| *c)
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingScenes(missing));
    }
    let missing_pools: Vec<u32> = dataset
        .split
        .test_classes
        .iter()
        .filter(|c| !dataset.support_pools.contains_key(c))
        .copied()
        .collect();
    if !missing_pools.is_empty() {
        return Err(EvalError::MissingSupportPool(missing_pools));
    }
    for (&class, pool) in &dataset.support_pools {
        if dataset.split.test_classes.contains(&class) && pool.len() < protocol.shots {
            return Err(EvalError::PoolTooSmall {
                class,
                have: pool.len(),
                need: protocol.shots,
            });
        }
    }

    let outcomes: Vec<Result<(EpisodeRecord, CocoEpisode), EvalError>> = (0..protocol.iterations)
        .into_par_iter()
        .map(|index| {
            let episode = sample_episode(dataset, &scenes_by_class, protocol, index);
            let prediction = pipeline
                .run(&episode)
                .map_err(|source| EvalError::Episode { index, source })?;
            let iou = prediction
                .mask
                .as_ref()
                .map(|m| eval_segmentation(m, episode.annotation, episode.target_class))
                .unwrap_or(0.0);
            let (sem_hit, grasp_hit) = match &prediction.grasp {
                Some(g) => eval_grasp(g, episode.annotation, episode.target_class, dataset.mm_per_px)
                    .map_err(|source| EvalError::Episode { index, source })?,
                None => (false, false),
            };
            let record = EpisodeRecord {
                index,
                scene: episode.annotation.scene_id.clone(),
                target_class: episode.target_class,
                iou,
                sem_hit,
                grasp_hit,
                confidence: prediction.confidence,
                predicted: prediction.mask.is_some(),
                grasped: prediction.grasp.is_some(),
            };
            let (h, w) = (episode.query.height(), episode.query.width());
            let coco = CocoEpisode {
                prediction: prediction.mask.map(|m| (m, prediction.confidence)),
                gt: episode
                    .annotation
                    .instances
                    .iter()
                    .filter(|i| i.class_id == episode.target_class)
                    .map(|i| i.mask.clone())
                    .collect(),
            };
            debug_assert_eq!((h, w), coco.gt[0].size());
            Ok((record, coco))
        })
        .collect();

    let mut records = Vec::with_capacity(protocol.iterations);
    let mut coco_inputs = Vec::with_capacity(protocol.iterations);
    for outcome in outcomes {
        let (record, coco) = outcome?;
        records.push(record);
        coco_inputs.push(coco);
    }

    let report = if records.is_empty() {
        EvalReport {
            episodes: 0,
            seed: protocol.seed,
            shots: protocol.shots,
            miou: None,
            per_class_iou: BTreeMap::new(),
            ap: None,
            ap50: None,
            ar1: None,
            a_sem: None,
            a_sem_gr: None,
            records,
        }
    } else {
        let mut by_class: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        for r in &records {
            let e = by_class.entry(r.target_class).or_insert((0.0, 0));
            e.0 += r.iou;
            e.1 += 1;
        }
        let per_class_iou: BTreeMap<u32, f64> =
            by_class.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect();
        let miou = per_class_iou.values().sum::<f64>() / per_class_iou.len() as f64;
        let coco = coco_metrics(&coco_inputs);
        let n = records.len() as f64;
        // grasp accuracies stay undefined when the pipeline emits no grasps
        // at all (segmentation-only runs)
        let any_grasp = records.iter().any(|r| r.grasped);
        let a_sem = any_grasp.then(|| records.iter().filter(|r| r.sem_hit).count() as f64 / n);
        let a_sem_gr = any_grasp.then(|| records.iter().filter(|r| r.grasp_hit).count() as f64 / n);
        EvalReport {
            episodes: records.len(),
            seed: protocol.seed,
            shots: protocol.shots,
            miou: Some(miou),
            per_class_iou,
            ap: Some(coco.ap),
            ap50: Some(coco.ap50),
            ar1: Some(coco.ar1),
            a_sem,
            a_sem_gr,
            records,
        }
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mocks::{OracleEmbedder, OracleSegmentator};
    use crate::synthdata::standard_suite_classes;

    #[test]
    fn split_validation_examples() {
        assert!(SplitSpec::new(vec![1, 2], vec![3, 4]).validate().is_empty());
        let v = SplitSpec::new(vec![1, 2], vec![2, 3]).validate();
        assert_eq!(v, vec![SplitViolation::SharedClass(2)]);
        let v = SplitSpec::new(vec![], vec![1]).validate();
        assert_eq!(v, vec![SplitViolation::EmptyTrain]);
    }

    fn two_instance_annotation(h: usize, w: usize) -> SceneAnnotation {
        let m1 = BinaryMask::from_fn(h, w, |x, y| (10..20).contains(&x) && (10..20).contains(&y));
        let m2 = BinaryMask::from_fn(h, w, |x, y| (40..50).contains(&x) && (40..50).contains(&y));
        let grasp = |x: f64, y: f64| Grasp::new(x, y, 0.0, 20.0, WidthUnit::Px).unwrap();
        SceneAnnotation {
            scene_id: "fixture".into(),
            width_unit: WidthUnit::Px,
            instances: vec![
                crate::synthdata::Instance {
                    instance_id: 0,
                    class_id: 5,
                    mask: m1,
                    grasps: vec![grasp(15.0, 15.0)],
                },
                crate::synthdata::Instance {
                    instance_id: 1,
                    class_id: 5,
                    mask: m2,
                    grasps: vec![grasp(45.0, 45.0)],
                },
            ],
        }
    }

    #[test]
    fn segmentation_iou_examples() {
        let ann = two_instance_annotation(64, 64);
        let union = ann.class_mask(5, 64, 64);
        assert!((eval_segmentation(&union, &ann, 5) - 1.0).abs() < 1e-12);

        // exactly one of two equal-area instances: the multi-instance penalty
        let one = ann.instances[0].mask.clone();
        assert!((eval_segmentation(&one, &ann, 5) - 0.5).abs() < 1e-12);

        let empty = BinaryMask::empty(64, 64);
        assert_eq!(eval_segmentation(&empty, &ann, 5), 0.0);
    }

    #[test]
    fn grasp_eval_containment_and_correctness() {
        let ann = two_instance_annotation(64, 64);
        // center inside the first instance's grasp box, angle close
        let good = Grasp::new(15.0, 15.0, 4.0, 18.0, WidthUnit::Px).unwrap();
        let (sem, hit) = eval_grasp(&good, &ann, 5, None).unwrap();
        assert!(sem && hit);

        // centered on empty space
        let miss = Grasp::new(30.0, 30.0, 0.0, 18.0, WidthUnit::Px).unwrap();
        assert_eq!(eval_grasp(&miss, &ann, 5, None).unwrap(), (false, false));

        // inside the box but 45 degrees off every GT grasp
        let twisted = Grasp::new(15.0, 15.0, 45.0, 20.0, WidthUnit::Px).unwrap();
        let (sem, hit) = eval_grasp(&twisted, &ann, 5, None).unwrap();
        assert!(sem && !hit);

        // unit mismatch surfaces the geometry error
        let mm = Grasp::new(15.0, 15.0, 0.0, 20.0, WidthUnit::Mm).unwrap();
        assert!(matches!(
            eval_grasp(&mm, &ann, 5, None),
            Err(PipelineError::Geometry(GeometryError::UnitMismatch { .. }))
        ));
    }

    #[test]
    fn sem_hit_implies_checked_against_any_instance_of_the_class() {
        let ann = two_instance_annotation(64, 64);
        // second instance's grasp box
        let on_other = Grasp::new(45.0, 45.0, 2.0, 18.0, WidthUnit::Px).unwrap();
        let (sem, hit) = eval_grasp(&on_other, &ann, 5, None).unwrap();
        assert!(sem && hit);
    }

    fn perfect_mask(h: usize, w: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |x, y| (4..12).contains(&x) && (4..12).contains(&y))
    }

    #[test]
    fn coco_fixture_values() {
        let gt = perfect_mask(32, 32);
        // all perfect
        let all: Vec<CocoEpisode> = (0..4)
            .map(|_| CocoEpisode {
                prediction: Some((gt.clone(), 0.9)),
                gt: vec![gt.clone()],
            })
            .collect();
        let m = coco_metrics(&all);
        assert_eq!((m.ap, m.ap50, m.ar1), (1.0, 1.0, 1.0));

        // none overlap
        let off = BinaryMask::from_fn(32, 32, |x, y| (20..28).contains(&x) && (20..28).contains(&y));
        let none: Vec<CocoEpisode> = (0..4)
            .map(|_| CocoEpisode {
                prediction: Some((off.clone(), 0.9)),
                gt: vec![gt.clone()],
            })
            .collect();
        let m = coco_metrics(&none);
        assert_eq!((m.ap, m.ap50, m.ar1), (0.0, 0.0, 0.0));

        // half perfect, half absent, uniform scores: AR@1 = 0.5
        let mixed: Vec<CocoEpisode> = (0..4)
            .map(|i| CocoEpisode {
                prediction: (i % 2 == 0).then(|| (gt.clone(), 0.5)),
                gt: vec![gt.clone()],
            })
            .collect();
        let m = coco_metrics(&mixed);
        assert!((m.ar1 - 0.5).abs() < 1e-12, "ar1 = {}", m.ar1);
    }

    fn oracle_setup(dataset: &EvalDataset, distractors: usize) -> (OracleSegmentator, OracleEmbedder) {
        let mut seg = OracleSegmentator::new(distractors, 17);
        for (image, ann) in &dataset.scenes {
            seg.register(image, ann);
        }
        (seg, OracleEmbedder::from_classes(&standard_suite_classes()))
    }

    #[test]
    fn oracle_benchmark_is_perfect_and_deterministic() {
        let classes = standard_suite_classes();
        let dataset = EvalDataset::synthetic(&classes, 60, 3, 0.75, 5, &GenConfig::default()).unwrap();
        let (seg, emb) = oracle_setup(&dataset, 2);
        let synth = GtEncodeSynthesizer::default();
        let pipeline = StandardPipeline::new(&seg, &emb, &synth);
        let protocol = Protocol::new(1, 40, 3);
        let report = run_benchmark(&dataset, &pipeline, &protocol).unwrap();
        assert_eq!(report.a_sem, Some(1.0), "report: {}", report.to_canonical_json());
        assert_eq!(report.a_sem_gr, Some(1.0));
        assert!(report.miou.unwrap() > 0.5);

        let again = run_benchmark(&dataset, &pipeline, &protocol).unwrap();
        assert_eq!(report.to_canonical_json(), again.to_canonical_json());
    }

    #[test]
    fn empty_protocol_yields_undefined_metrics() {
        let classes = standard_suite_classes();
        let dataset = EvalDataset::synthetic(&classes, 40, 3, 0.75, 5, &GenConfig::default()).unwrap();
        let (seg, emb) = oracle_setup(&dataset, 0);
        let synth = GtEncodeSynthesizer::default();
        let pipeline = StandardPipeline::new(&seg, &emb, &synth);
        let report = run_benchmark(&dataset, &pipeline, &Protocol::new(1, 0, 0)).unwrap();
        assert_eq!(report.episodes, 0);
        assert_eq!(report.miou, None);
        assert_eq!(report.a_sem, None);
        let v = report.to_json();
        assert!(v.get("miou").unwrap().is_null());
    }

    #[test]
    fn missing_scene_for_test_class_is_an_error() {
        let classes = standard_suite_classes();
        let mut dataset = EvalDataset::synthetic(&classes, 30, 3, 0.75, 5, &GenConfig::default()).unwrap();
        // drop every scene containing the first test class
        let lost = dataset.split.test_classes[0];
        dataset.scenes.retain(|(_, ann)| !ann.contains_class(lost));
        let (seg, emb) = oracle_setup(&dataset, 0);
        let synth = GtEncodeSynthesizer::default();
        let pipeline = StandardPipeline::new(&seg, &emb, &synth);
        match run_benchmark(&dataset, &pipeline, &Protocol::new(1, 10, 0)) {
            Err(EvalError::MissingScenes(classes)) => assert_eq!(classes, vec![lost]),
            other => panic!("expected MissingScenes, got {other:?}"),
        }
    }

    #[test]
    fn a_sem_gr_never_exceeds_a_sem() {
        let classes = standard_suite_classes();
        let dataset = EvalDataset::synthetic(&classes, 50, 3, 0.75, 21, &GenConfig::default()).unwrap();
        let (seg, emb) = oracle_setup(&dataset, 3);
        let synth = GtEncodeSynthesizer::default();
        let pipeline = StandardPipeline::new(&seg, &emb, &synth);
        for seed in 0..3 {
            let report = run_benchmark(&dataset, &pipeline, &Protocol::new(1, 25, seed)).unwrap();
            assert!(report.a_sem_gr.unwrap() <= report.a_sem.unwrap());
        }
    }
}
