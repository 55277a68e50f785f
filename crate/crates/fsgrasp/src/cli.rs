//! Command-line front door.
//!
//! Every command resolves its configuration, writes a `run.json` echo into
//! the output directory, and emits its primary result as canonical JSON on
//! stdout with a human-readable summary on stderr. Exit codes: 0 success,
//! 1 domain error, 2 usage error. `FSG_DATA_ROOT` supplies the default
//! dataset root.

use crate::backends::cache::{EmbeddingRecord, FileEmbedder, FileSegmentator, MaskRecord};
use crate::backends::mocks::{HistogramEmbedder, OracleEmbedder, OracleSegmentator, ThresholdSegmentator};
use crate::backends::{content_key, Embedder, SegmentConfig, Segmentator};
use crate::candidates::{dedup_masks, filter_candidates, FilterConfig};
use crate::codec::CodecConfig;
use crate::evalsuite::{
    run_benchmark, GraspSynthesizer, GtEncodeSynthesizer, Protocol, StandardPipeline,
};
use crate::geometry::WidthUnit;
use crate::heads::{build_training_samples, train_head, HeadConfig, HeadKind, TrainConfig, TrainedHeads};
use crate::image::{RgbdImage, SupportSet, SupportShot};
use crate::io;
use crate::jsonfmt::{to_canonical_string, to_report_string};
use crate::rle;
use crate::selector::{select, HeatmapScale, SelectionOutcome, SelectorConfig};
use crate::synthdata::{default_classes, gen_dataset, GenConfig, SceneAnnotation, SynthClass};
use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};

pub const DATA_ROOT_ENV: &str = "FSG_DATA_ROOT";

#[derive(Parser, Debug)]
#[command(
    name = "fsgrasp",
    about = "Few-shot semantic grasping: data generation, cache precomputation, head training, inference and episodic evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with ground truth and a class split.
    GenScenes(GenScenesArgs),
    /// Run a segmentation backend over every scene and cache the masks.
    PrecomputeMasks(PrecomputeMasksArgs),
    /// Embed every candidate crop and support shot and cache the vectors.
    PrecomputeEmbeddings(PrecomputeEmbeddingsArgs),
    /// Train grasp synthesis heads on the train split.
    TrainHeads(TrainHeadsArgs),
    /// Select the support-defined target in one scene.
    InferSelect(InferSelectArgs),
    /// Full pipeline on one scene: selection plus grasp synthesis.
    InferGrasp(InferGraspArgs),
    /// Episodic few-shot segmentation benchmark (mIoU, AP, AP50, AR@1).
    EvalFss(EvalArgs),
    /// Episodic semantic grasping benchmark (adds A_sem, A_semGR).
    EvalGrasp(EvalArgs),
}

#[derive(Args, Debug)]
struct GenScenesArgs {
    /// Number of classes in the table (unique hues, shapes cycling).
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Number of scenes.
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    /// Objects per scene.
    #[arg(long, default_value_t = 3)]
    objects: usize,
    /// Canvas side in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Fraction of classes in the train split.
    #[arg(long, default_value_t = 0.75)]
    train_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BackendArgs {
    /// Segmentation backend: oracle | threshold | file:<cache.jsonl>.
    #[arg(long, default_value = "oracle")]
    backend: String,
    /// Embedding backend: oracle | histogram | file:<cache.jsonl>.
    #[arg(long, default_value = "oracle")]
    embedder: String,
    /// Proposal grid density.
    #[arg(long, default_value_t = 32)]
    grid: usize,
    /// Proposal score floor.
    #[arg(long, default_value_t = 0.7)]
    score_floor: f32,
    /// Distractor blobs per scene for the oracle backend.
    #[arg(long, default_value_t = 2)]
    distractors: usize,
    /// Greedy NMS IoU threshold.
    #[arg(long, default_value_t = 0.9)]
    nms_iou: f64,
    /// Minimum candidate area as an image fraction.
    #[arg(long, default_value_t = 0.003)]
    min_area_frac: f64,
    /// Minimum overlap fraction with the plane support region.
    #[arg(long, default_value_t = 0.5)]
    plane_overlap: f64,
    /// Heatmap scaling mode.
    #[arg(long, value_enum, default_value_t = HeatmapScaleArg::Confidence)]
    heatmap_scale: HeatmapScaleArg,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum HeatmapScaleArg {
    Confidence,
    Raw,
}

impl From<HeatmapScaleArg> for HeatmapScale {
    fn from(v: HeatmapScaleArg) -> Self {
        match v {
            HeatmapScaleArg::Confidence => HeatmapScale::Confidence,
            HeatmapScaleArg::Raw => HeatmapScale::Raw,
        }
    }
}

impl BackendArgs {
    fn seg_config(&self) -> SegmentConfig {
        SegmentConfig {
            grid: self.grid,
            score_floor: self.score_floor,
        }
    }

    fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            nms_iou: self.nms_iou,
            min_area_frac: self.min_area_frac,
            plane_overlap: self.plane_overlap,
            ..FilterConfig::default()
        }
    }

    fn selector_config(&self) -> SelectorConfig {
        SelectorConfig {
            heatmap_scale: self.heatmap_scale.into(),
        }
    }
}

#[derive(Args, Debug)]
struct PrecomputeMasksArgs {
    /// Dataset directory (defaults to $FSG_DATA_ROOT).
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cache file to write.
    #[arg(long)]
    cache: PathBuf,
    #[arg(long, default_value = "fsgrasp-run")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PrecomputeEmbeddingsArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
    /// Use a precomputed mask cache instead of running the segmentator.
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long, default_value = "fsgrasp-run")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainHeadsArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Which head to train.
    #[arg(long, value_enum, default_value_t = HeadArg::All)]
    head: HeadArg,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Cross-entropy weight of the no-grasp label.
    #[arg(long, default_value_t = 0.1)]
    background_weight: f64,
    /// Half-size of ground-truth grasp patches.
    #[arg(long, default_value_t = 2)]
    patch_half: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for head checkpoints.
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum HeadArg {
    Quality,
    Angle,
    Width,
    All,
}

#[derive(Args, Debug)]
struct InferSelectArgs {
    /// Path to the scene's annotation.json (rgb/depth live alongside it).
    #[arg(long)]
    scene: PathBuf,
    /// Directory of support shots (shot_*.rgb.png / shot_*.mask.png).
    #[arg(long)]
    support: PathBuf,
    /// Shots to use from the support directory.
    #[arg(long, default_value_t = 1)]
    shots: usize,
    /// Dataset directory for backends that need the class table or scenes.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "fsgrasp-run")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InferGraspArgs {
    #[command(flatten)]
    select: InferSelectArgs,
    /// Directory of trained head checkpoints; omit to use gt-encode.
    #[arg(long)]
    heads: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
    /// Support shots per episode (the 1-shot / 5-shot protocols).
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long, default_value_t = 200)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grasp source: gt-encode | heads:<dir>. Ignored by eval-fss.
    #[arg(long, default_value = "gt-encode")]
    grasp_source: String,
    /// Worker threads for episode evaluation (0 = rayon default).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Also write per-episode rows as CSV.
    #[arg(long, default_value_t = false)]
    csv: bool,
    #[arg(long, default_value = "fsgrasp-run")]
    out: PathBuf,
}

/// Parse argv and run. 0 = success, 1 = domain error, 2 = usage error.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenScenes(args) => cmd_gen_scenes(args),
        Command::PrecomputeMasks(args) => cmd_precompute_masks(args),
        Command::PrecomputeEmbeddings(args) => cmd_precompute_embeddings(args),
        Command::TrainHeads(args) => cmd_train_heads(args),
        Command::InferSelect(args) => cmd_infer_select(args),
        Command::InferGrasp(args) => cmd_infer_grasp(args),
        Command::EvalFss(args) => cmd_eval(args, false),
        Command::EvalGrasp(args) => cmd_eval(args, true),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn data_dir(arg: &Option<PathBuf>) -> Result<PathBuf> {
    match arg {
        Some(p) => Ok(p.clone()),
        None => std::env::var(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .map_err(|_| anyhow!("no --data given and {DATA_ROOT_ENV} is not set")),
    }
}

fn write_run_json(out: &Path, command: &str, flags: Value) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let run = json!({"command": command, "flags": flags});
    std::fs::write(out.join("run.json"), to_canonical_string(&run))?;
    Ok(())
}

fn load_manifest(data: &Path) -> Result<io::DatasetManifest> {
    let path = if data.is_dir() { data.join("manifest.json") } else { data.to_path_buf() };
    Ok(io::DatasetManifest::load(&path)?)
}

fn manifest_classes(manifest: &io::DatasetManifest) -> Result<Vec<SynthClass>> {
    let mut classes = Vec::new();
    for (&id, name) in &manifest.classes {
        classes.push(
            SynthClass::from_name(id, name)
                .ok_or_else(|| anyhow!("class {id} ({name}) is not a synthetic class; the oracle embedder needs a synthetic class table"))?,
        );
    }
    Ok(classes)
}

enum SegBackend {
    Oracle(OracleSegmentator),
    Threshold(ThresholdSegmentator),
    File(FileSegmentator),
}

impl SegBackend {
    fn as_dyn(&self) -> &dyn Segmentator {
        match self {
            SegBackend::Oracle(b) => b,
            SegBackend::Threshold(b) => b,
            SegBackend::File(b) => b,
        }
    }
}

fn make_segmentator(
    name: &str,
    scenes: &[(RgbdImage, SceneAnnotation)],
    distractors: usize,
    seed: u64,
) -> Result<SegBackend> {
    if let Some(path) = name.strip_prefix("file:") {
        return Ok(SegBackend::File(FileSegmentator::open(Path::new(path))?));
    }
    match name {
        "oracle" => {
            let mut oracle = OracleSegmentator::new(distractors, seed);
            for (image, ann) in scenes {
                oracle.register(image, ann);
            }
            Ok(SegBackend::Oracle(oracle))
        }
        "threshold" => Ok(SegBackend::Threshold(ThresholdSegmentator::default())),
        other => bail!("unknown segmentation backend {other:?} (oracle | threshold | file:<path>)"),
    }
}

enum EmbBackend {
    Oracle(OracleEmbedder),
    Histogram(HistogramEmbedder),
    File(FileEmbedder),
}

impl EmbBackend {
    fn as_dyn(&self) -> &dyn Embedder {
        match self {
            EmbBackend::Oracle(b) => b,
            EmbBackend::Histogram(b) => b,
            EmbBackend::File(b) => b,
        }
    }
}

fn make_embedder(name: &str, classes: Option<&[SynthClass]>) -> Result<EmbBackend> {
    if let Some(path) = name.strip_prefix("file:") {
        return Ok(EmbBackend::File(FileEmbedder::open(Path::new(path))?));
    }
    match name {
        "oracle" => {
            let classes = classes.ok_or_else(|| anyhow!("the oracle embedder needs a dataset class table (--data)"))?;
            Ok(EmbBackend::Oracle(OracleEmbedder::from_classes(classes)))
        }
        "histogram" => Ok(EmbBackend::Histogram(HistogramEmbedder)),
        other => bail!("unknown embedding backend {other:?} (oracle | histogram | file:<path>)"),
    }
}

fn cmd_gen_scenes(args: GenScenesArgs) -> Result<()> {
    let classes = default_classes(args.classes);
    let cfg = GenConfig {
        height: args.size,
        width: args.size,
        ..GenConfig::default()
    };
    let (scenes, bundle) = gen_dataset(&classes, args.scenes, args.objects, args.train_frac, args.seed, &cfg)?;
    let manifest_path = io::save_dataset(&args.out, &scenes, &classes, &bundle, WidthUnit::Px)?;
    write_run_json(
        &args.out,
        "gen-scenes",
        json!({
            "classes": args.classes,
            "scenes": args.scenes,
            "objects": args.objects,
            "size": args.size,
            "train_frac": args.train_frac,
            "seed": args.seed,
            "out": args.out.display().to_string(),
        }),
    )?;
    eprintln!(
        "wrote {} scenes, {} classes ({} train / {} test) to {}",
        scenes.len(),
        classes.len(),
        bundle.spec.train_classes.len(),
        bundle.spec.test_classes.len(),
        args.out.display()
    );
    println!("{}", to_canonical_string(&json!({"manifest": manifest_path.display().to_string()})));
    Ok(())
}

fn cmd_precompute_masks(args: PrecomputeMasksArgs) -> Result<()> {
    let data = data_dir(&args.data)?;
    let manifest = load_manifest(&data)?;
    let dataset = manifest.load_eval_dataset()?;
    let seg = make_segmentator(&args.backend.backend, &dataset.scenes, args.backend.distractors, args.seed)?;
    let seg_config = args.backend.seg_config();
    let mut records = Vec::new();
    for (image, _) in &dataset.scenes {
        let key = content_key(image.rgb());
        for mask in seg.as_dyn().segment(image, &seg_config)? {
            let binary = mask.soft.iter().all(|&s| s == 0.0 || s == 1.0);
            records.push(MaskRecord {
                key: key.clone(),
                size: [image.height(), image.width()],
                counts: rle::encode(&mask.mask),
                soft_quantized: (!binary)
                    .then(|| mask.soft.iter().map(|&s| (s.clamp(0.0, 1.0) * 255.0).round() as u8).collect()),
                score: mask.proposal_score,
            });
        }
    }
    io::write_mask_cache(&records, &args.cache)?;
    write_run_json(
        &args.out,
        "precompute-masks",
        json!({
            "backend": args.backend.backend,
            "cache": args.cache.display().to_string(),
            "data": data.display().to_string(),
            "distractors": args.backend.distractors,
            "grid": args.backend.grid,
            "score_floor": args.backend.score_floor,
            "seed": args.seed,
        }),
    )?;
    eprintln!("cached {} masks for {} scenes at {}", records.len(), dataset.scenes.len(), args.cache.display());
    println!("{}", to_canonical_string(&json!({"masks": records.len(), "scenes": dataset.scenes.len()})));
    Ok(())
}

fn cmd_precompute_embeddings(args: PrecomputeEmbeddingsArgs) -> Result<()> {
    let data = data_dir(&args.data)?;
    let manifest = load_manifest(&data)?;
    let dataset = manifest.load_eval_dataset()?;
    let classes = manifest_classes(&manifest).ok();
    let embedder = make_embedder(&args.backend.embedder, classes.as_deref())?;
    let seg: SegBackend = match &args.masks {
        Some(path) => SegBackend::File(FileSegmentator::open(path)?),
        None => make_segmentator(&args.backend.backend, &dataset.scenes, args.backend.distractors, args.seed)?,
    };
    let seg_config = args.backend.seg_config();
    let filter = args.backend.filter_config();
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut push = |crop: &crate::backends::MaskedCrop| -> Result<()> {
        let key = content_key(&crop.pixels);
        if seen.insert(key.clone()) {
            let e = embedder.as_dyn().embed(crop)?;
            records.push(EmbeddingRecord {
                key,
                dim: e.dim(),
                values: e.values().to_vec(),
            });
        }
        Ok(())
    };
    for (image, _) in &dataset.scenes {
        let proposals = seg.as_dyn().segment(image, &seg_config)?;
        if proposals.is_empty() {
            continue;
        }
        let deduped = dedup_masks(&proposals, filter.nms_iou);
        let set = filter_candidates(&deduped, image, &filter)?;
        for crop in crate::selector::make_crops(&set, image)? {
            push(&crop)?;
        }
    }
    for pool in dataset.support_pools.values() {
        for (i, shot) in pool.iter().enumerate() {
            let crop = crate::selector::masked_crop(&shot.rgb, &shot.mask, i)?;
            push(&crop)?;
        }
    }
    io::write_embedding_cache(&records, &args.cache)?;
    write_run_json(
        &args.out,
        "precompute-embeddings",
        json!({
            "backend": args.backend.backend,
            "cache": args.cache.display().to_string(),
            "data": data.display().to_string(),
            "embedder": args.backend.embedder,
            "masks": args.masks.as_ref().map(|p| p.display().to_string()),
            "seed": args.seed,
        }),
    )?;
    eprintln!("cached {} embeddings at {}", records.len(), args.cache.display());
    println!("{}", to_canonical_string(&json!({"embeddings": records.len()})));
    Ok(())
}

fn cmd_train_heads(args: TrainHeadsArgs) -> Result<()> {
    let data = data_dir(&args.data)?;
    let manifest = load_manifest(&data)?;
    let dataset = manifest.load_eval_dataset()?;
    let mut codec = CodecConfig::for_unit(dataset.width_unit);
    codec.patch_half = args.patch_half;
    let kinds: Vec<HeadKind> = match args.head {
        HeadArg::Quality => vec![HeadKind::Quality],
        HeadArg::Angle => vec![HeadKind::Angle],
        HeadArg::Width => vec![HeadKind::Width],
        HeadArg::All => HeadKind::ALL.to_vec(),
    };
    let train_classes = dataset.split.train_classes.clone();
    let class_filter = (!train_classes.is_empty()).then_some(train_classes.as_slice());
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        background_weight: args.background_weight,
        seed: args.seed,
    };
    std::fs::create_dir_all(&args.out)?;
    let mut losses = serde_json::Map::new();
    for kind in &kinds {
        let samples = build_training_samples(&dataset.scenes, &codec, *kind, class_filter)?;
        let mut head = crate::heads::GraspHead::init(HeadConfig::new(*kind, &codec, args.seed));
        let outcome = train_head(&mut head, &samples, &cfg)?;
        head.save(&args.out.join(format!("{}.fsgh", kind.name())), &codec)?;
        eprintln!(
            "{}: {} samples, {} epochs, loss {:.4} -> {:.4}",
            kind.name(),
            samples.len(),
            cfg.epochs,
            outcome.epoch_losses.first().unwrap_or(&f64::NAN),
            outcome.epoch_losses.last().unwrap_or(&f64::NAN)
        );
        losses.insert(kind.name().to_string(), json!(outcome.epoch_losses));
    }
    std::fs::write(args.out.join("losses.json"), to_report_string(&Value::Object(losses.clone())))?;
    write_run_json(
        &args.out,
        "train-heads",
        json!({
            "background_weight": args.background_weight,
            "batch_size": args.batch_size,
            "data": data.display().to_string(),
            "epochs": args.epochs,
            "head": kinds.iter().map(|k| k.name()).collect::<Vec<_>>(),
            "learning_rate": args.learning_rate,
            "patch_half": args.patch_half,
            "seed": args.seed,
        }),
    )?;
    println!("{}", to_report_string(&json!({"heads": kinds.iter().map(|k| k.name()).collect::<Vec<_>>(), "losses": losses})));
    Ok(())
}

fn load_support_dir(dir: &Path, shots: usize) -> Result<SupportSet> {
    let mut rgb_files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading support dir {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".rgb.png"))
        .collect();
    rgb_files.sort();
    if rgb_files.is_empty() {
        bail!("no shot_*.rgb.png files under {}", dir.display());
    }
    let take = shots.min(rgb_files.len());
    let mut loaded = Vec::with_capacity(take);
    for rgb_path in rgb_files.into_iter().take(take) {
        let mask_path = PathBuf::from(rgb_path.to_string_lossy().replace(".rgb.png", ".mask.png"));
        let rgb = io::load_rgb_png(&rgb_path)?;
        let mask = io::load_mask_png(&mask_path)?;
        loaded.push(SupportShot::new(rgb, mask).map_err(|e| anyhow!("{}: {e}", rgb_path.display()))?);
    }
    Ok(SupportSet::new(loaded, None).map_err(|e| anyhow!("support set: {e}"))?)
}

fn load_scene_by_annotation(path: &Path) -> Result<(RgbdImage, SceneAnnotation)> {
    let dir = path.parent().ok_or_else(|| anyhow!("annotation path has no parent"))?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text)?;
    let annotation = io::annotation_from_json(&value)?;
    let rgb = io::load_rgb_png(&dir.join("rgb.png"))?;
    let (depth, _, _) = io::load_depth_png(&dir.join("depth.png"))?;
    let image = RgbdImage::new(rgb, depth).map_err(|e| anyhow!("{}: {e}", dir.display()))?;
    Ok((image, annotation))
}

struct SelectionRun {
    record: Value,
    heatmap: Vec<f32>,
    mask: Option<crate::image::BinaryMask>,
}

fn run_selection(args: &InferSelectArgs) -> Result<(SelectionRun, RgbdImage, SceneAnnotation)> {
    let (image, annotation) = load_scene_by_annotation(&args.scene)?;
    let support = load_support_dir(&args.support, args.shots)?;
    let classes = match &args.data {
        Some(data) => manifest_classes(&load_manifest(data)?).ok(),
        None => None,
    };
    let scene_pair = [(image.clone(), annotation.clone())];
    let seg = make_segmentator(&args.backend.backend, &scene_pair, args.backend.distractors, args.seed)?;
    let embedder = make_embedder(&args.backend.embedder, classes.as_deref())?;
    let proposals = seg.as_dyn().segment(&image, &args.backend.seg_config())?;
    let deduped = dedup_masks(&proposals, args.backend.nms_iou);
    let set = filter_candidates(&deduped, &image, &args.backend.filter_config())?;
    let outcome = select(&set, &image, &support, embedder.as_dyn(), &args.backend.selector_config())?;
    let (h, w) = (image.height(), image.width());
    let run = match outcome {
        SelectionOutcome::NoTarget => SelectionRun {
            record: json!({
                "chosen_index": Value::Null,
                "scores": Vec::<f64>::new(),
                "mask_rle": Value::Null,
                "heatmap_png16": Value::Null,
            }),
            heatmap: vec![0.0; h * w],
            mask: None,
        },
        SelectionOutcome::Target(r) => {
            let heatmap_path = args.out.join("heatmap.png");
            std::fs::create_dir_all(&args.out)?;
            io::save_heatmap_png16(&heatmap_path, &r.heatmap, h, w)?;
            SelectionRun {
                record: json!({
                    "chosen_index": r.chosen_index,
                    "scores": r.scores,
                    "mask_rle": {"size": [h, w], "counts": rle::encode(&r.mask)},
                    "heatmap_png16": heatmap_path.display().to_string(),
                }),
                heatmap: r.heatmap,
                mask: Some(r.mask),
            }
        }
    };
    Ok((run, image, annotation))
}

fn cmd_infer_select(args: InferSelectArgs) -> Result<()> {
    let (run, _, _) = run_selection(&args)?;
    write_run_json(
        &args.out,
        "infer-select",
        json!({
            "backend": args.backend.backend,
            "embedder": args.backend.embedder,
            "scene": args.scene.display().to_string(),
            "seed": args.seed,
            "shots": args.shots,
            "support": args.support.display().to_string(),
        }),
    )?;
    std::fs::write(args.out.join("selection.json"), to_report_string(&run.record))?;
    eprintln!("selection written to {}", args.out.join("selection.json").display());
    println!("{}", to_report_string(&run.record));
    Ok(())
}

fn cmd_infer_grasp(args: InferGraspArgs) -> Result<()> {
    let heads = match &args.heads {
        Some(dir) => Some(TrainedHeads::load_all(dir)?),
        None => None,
    };
    let (run, image, annotation) = run_selection(&args.select)?;
    let grasp_record = match &run.mask {
        None => json!({"grasp": Value::Null, "selection": run.record}),
        Some(mask) => {
            let extracted = match &heads {
                Some(heads) => {
                    if heads.codec.width.unit.width_unit() != Some(annotation.width_unit) {
                        bail!(
                            "width unit mismatch: heads were trained for {:?} but the scene is annotated in {}",
                            heads.codec.width.unit,
                            annotation.width_unit
                        );
                    }
                    GraspSynthesizer::synthesize(heads, &image, &run.heatmap, mask, None, args.select.seed)
                        .map_err(|e| anyhow!("{e}"))?
                }
                None => GtEncodeSynthesizer::default()
                    .synthesize(&image, &run.heatmap, mask, Some(&annotation), args.select.seed)
                    .map_err(|e| anyhow!("{e}"))?,
            };
            json!({
                "grasp": {
                    "x": extracted.grasp.x,
                    "y": extracted.grasp.y,
                    "theta_deg": extracted.grasp.theta,
                    "width": extracted.grasp.width,
                    "width_unit": extracted.grasp.width_unit,
                    "low_confidence": extracted.low_confidence,
                    "peak": extracted.peak_value,
                },
                "selection": run.record,
            })
        }
    };
    write_run_json(
        &args.select.out,
        "infer-grasp",
        json!({
            "backend": args.select.backend.backend,
            "embedder": args.select.backend.embedder,
            "heads": args.heads.as_ref().map(|p| p.display().to_string()),
            "scene": args.select.scene.display().to_string(),
            "seed": args.select.seed,
            "shots": args.select.shots,
        }),
    )?;
    std::fs::write(args.select.out.join("grasp.json"), to_report_string(&grasp_record))?;
    eprintln!("grasp written to {}", args.select.out.join("grasp.json").display());
    println!("{}", to_report_string(&grasp_record));
    Ok(())
}

fn cmd_eval(args: EvalArgs, with_grasps: bool) -> Result<()> {
    let data = data_dir(&args.data)?;
    let manifest = load_manifest(&data)?;
    let dataset = manifest.load_eval_dataset()?;
    let classes = manifest_classes(&manifest).ok();
    let seg = make_segmentator(&args.backend.backend, &dataset.scenes, args.backend.distractors, args.seed)?;
    let embedder = make_embedder(&args.backend.embedder, classes.as_deref())?;

    let gt_synth = GtEncodeSynthesizer::default();
    let heads: Option<TrainedHeads>;
    let synthesizer: &dyn GraspSynthesizer = if with_grasps {
        if args.grasp_source == "gt-encode" {
            heads = None;
            &gt_synth
        } else if let Some(dir) = args.grasp_source.strip_prefix("heads:") {
            heads = Some(TrainedHeads::load_all(Path::new(dir))?);
            let h = heads.as_ref().unwrap();
            if h.codec.width.unit.width_unit() != Some(dataset.width_unit) {
                bail!(
                    "width unit mismatch: heads were trained for {:?} widths but the dataset is annotated in {}; retrain or pick a matching dataset",
                    h.codec.width.unit,
                    dataset.width_unit
                );
            }
            h
        } else {
            bail!("unknown --grasp-source {:?} (gt-encode | heads:<dir>)", args.grasp_source);
        }
    } else {
        heads = None;
        &gt_synth
    };

    let mut pipeline = StandardPipeline::new(seg.as_dyn(), embedder.as_dyn(), synthesizer);
    pipeline.seg_config = args.backend.seg_config();
    pipeline.filter = args.backend.filter_config();
    pipeline.selector = args.backend.selector_config();
    pipeline.annotation_to_synthesizer = args.grasp_source == "gt-encode";
    pipeline.synthesize_grasps = with_grasps;

    let protocol = Protocol::new(args.shots, args.iterations, args.seed);
    let report = if args.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(args.workers).build()?;
        pool.install(|| run_benchmark(&dataset, &pipeline, &protocol))?
    } else {
        run_benchmark(&dataset, &pipeline, &protocol)?
    };

    let command = if with_grasps { "eval-grasp" } else { "eval-fss" };
    write_run_json(
        &args.out,
        command,
        json!({
            "backend": args.backend.backend,
            "data": data.display().to_string(),
            "embedder": args.backend.embedder,
            "grasp_source": if with_grasps { Some(args.grasp_source.clone()) } else { None },
            "iterations": args.iterations,
            "seed": args.seed,
            "shots": args.shots,
            "workers": args.workers,
        }),
    )?;
    let canonical = report.to_canonical_json();
    std::fs::write(args.out.join("report.json"), &canonical)?;
    if args.csv {
        std::fs::write(args.out.join("episodes.csv"), report.to_csv())?;
    }
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    eprintln!(
        "{command}: {} episodes, {}-shot | mIoU {} AP {} AP50 {} AR1 {} | A_sem {} A_semGR {}",
        report.episodes,
        report.shots,
        fmt(report.miou),
        fmt(report.ap),
        fmt(report.ap50),
        fmt(report.ar1),
        fmt(report.a_sem),
        fmt(report.a_sem_gr),
    );
    println!("{canonical}");
    drop(heads);
    Ok(())
}
