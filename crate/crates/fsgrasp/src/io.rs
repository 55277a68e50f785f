//! On-disk formats and dataset adapters.
//!
//! Native layout (everything canonical JSON, paths relative to the manifest):
//!
//! ```text
//! out/
//!   manifest.json                  dataset index: classes, scenes, split ref
//!   split.json                     {"test_classes": [..], "train_classes": [..]}
//!   scenes/<id>/rgb.png            8-bit RGB
//!   scenes/<id>/depth.png          16-bit grayscale, millimeters
//!   scenes/<id>/annotation.json    instances with RLE masks and grasp lists
//!   support/<class>/shot_<k>.rgb.png / .mask.png
//! ```
//!
//! Annotation schema:
//! `{"scene_id": str, "instances": [{"instance_id": int, "class_id": int,
//! "mask_rle": {"size": [H, W], "counts": [..]}, "grasps": [[x, y, theta_deg,
//! width], ..]}], "width_unit": "mm"|"px"}`.
//!
//! External adapters reduce graspnet-like (mm widths, per-scene meta.json +
//! 16-bit instance label image) and ocid-like (px widths, per-frame label
//! image + grasp text files) directory shapes to the native schema.

use crate::backends::cache::{EmbeddingRecord, MaskRecord};
use crate::evalsuite::{EvalDataset, SplitSpec};
use crate::geometry::{Grasp, WidthUnit};
use crate::image::{BinaryMask, RgbImage, RgbdImage, SupportShot};
use crate::jsonfmt::to_canonical_string;
use crate::rle;
use crate::synthdata::{Instance, SceneAnnotation, SplitBundle, SynthClass};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {message}")]
    BadImage { path: PathBuf, message: String },
    #[error("scene {scene}: {message}")]
    BadAnnotation { scene: String, message: String },
    #[error("duplicate scene id {0}")]
    DuplicateSceneId(String),
    #[error("duplicate cache key at entry {index}")]
    DuplicateCacheKey { index: usize },
    #[error("unrecognized {kind} layout under {root}:\n{report}")]
    UnrecognizedLayout {
        kind: String,
        root: PathBuf,
        report: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

// ---------------------------------------------------------------------------
// image files

pub fn save_rgb_png(path: &Path, rgb: &RgbImage) -> Result<(), DataError> {
    let buf = image::RgbImage::from_raw(rgb.width() as u32, rgb.height() as u32, rgb.bytes().to_vec())
        .expect("buffer matches dimensions");
    buf.save(path).map_err(|e| DataError::BadImage {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_rgb_png(path: &Path) -> Result<RgbImage, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::BadImage {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    RgbImage::new(img.height() as usize, img.width() as usize, img.into_raw()).map_err(|e| {
        DataError::BadImage {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    })
}

pub fn save_depth_png(path: &Path, depth: &[u16], height: usize, width: usize) -> Result<(), DataError> {
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(width as u32, height as u32, depth.to_vec())
        .expect("buffer matches dimensions");
    buf.save(path).map_err(|e| DataError::BadImage {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_depth_png(path: &Path) -> Result<(Vec<u16>, usize, usize), DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::BadImage {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw(), h, w))
}

/// Save a [0, 1] map as 16-bit grayscale (values scaled by 65535).
pub fn save_heatmap_png16(path: &Path, map: &[f32], height: usize, width: usize) -> Result<(), DataError> {
    let data: Vec<u16> = map
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    save_depth_png(path, &data, height, width)
}

pub fn load_heatmap_png16(path: &Path) -> Result<(Vec<f32>, usize, usize), DataError> {
    let (raw, h, w) = load_depth_png(path)?;
    Ok((raw.iter().map(|&v| v as f32 / 65535.0).collect(), h, w))
}

pub fn save_mask_png(path: &Path, mask: &BinaryMask) -> Result<(), DataError> {
    let data: Vec<u8> = mask.pixels().iter().map(|&p| if p { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, data)
        .expect("buffer matches dimensions");
    buf.save(path).map_err(|e| DataError::BadImage {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_mask_png(path: &Path) -> Result<BinaryMask, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::BadImage {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<bool> = img.into_raw().iter().map(|&v| v >= 128).collect();
    BinaryMask::new(h, w, pixels).map_err(|e| DataError::BadImage {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// annotations

pub fn annotation_to_json(ann: &SceneAnnotation) -> Value {
    let instances: Vec<Value> = ann
        .instances
        .iter()
        .map(|inst| {
            let (h, w) = inst.mask.size();
            json!({
                "instance_id": inst.instance_id,
                "class_id": inst.class_id,
                "mask_rle": {"size": [h, w], "counts": rle::encode(&inst.mask)},
                "grasps": inst.grasps.iter().map(|g| json!([g.x, g.y, g.theta, g.width])).collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({
        "scene_id": ann.scene_id,
        "instances": instances,
        "width_unit": ann.width_unit,
    })
}

/// Parse and validate an annotation. Grasp angles are normalized into
/// [-90, 90); out-of-bounds grasp centers and RLE size mismatches are errors
/// naming the scene.
pub fn annotation_from_json(value: &Value) -> Result<SceneAnnotation, DataError> {
    let scene_id = value["scene_id"].as_str().unwrap_or("<unnamed>").to_string();
    let bad = |message: String| DataError::BadAnnotation {
        scene: scene_id.clone(),
        message,
    };
    let width_unit: WidthUnit = serde_json::from_value(value["width_unit"].clone())
        .map_err(|e| bad(format!("width_unit: {e}")))?;
    let raw_instances = value["instances"].as_array().ok_or_else(|| bad("instances is not an array".into()))?;
    let mut instances = Vec::with_capacity(raw_instances.len());
    for (i, inst) in raw_instances.iter().enumerate() {
        let instance_id = inst["instance_id"].as_u64().ok_or_else(|| bad(format!("instance {i}: missing instance_id")))? as u32;
        let class_id = inst["class_id"].as_u64().ok_or_else(|| bad(format!("instance {i}: missing class_id")))? as u32;
        let size = inst["mask_rle"]["size"]
            .as_array()
            .ok_or_else(|| bad(format!("instance {i}: missing mask size")))?;
        let h = size[0].as_u64().unwrap_or(0) as usize;
        let w = size.get(1).and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let counts: Vec<u32> = serde_json::from_value(inst["mask_rle"]["counts"].clone())
            .map_err(|e| bad(format!("instance {i}: counts: {e}")))?;
        let mask = rle::decode(h, w, &counts).map_err(|e| bad(format!("instance {i}: {e}")))?;
        let raw_grasps = inst["grasps"].as_array().ok_or_else(|| bad(format!("instance {i}: grasps missing")))?;
        let mut grasps = Vec::with_capacity(raw_grasps.len());
        for (gi, g) in raw_grasps.iter().enumerate() {
            let nums: Vec<f64> = serde_json::from_value(g.clone())
                .map_err(|e| bad(format!("instance {i} grasp {gi}: {e}")))?;
            if nums.len() != 4 {
                return Err(bad(format!("instance {i} grasp {gi}: expected 4 values")));
            }
            let grasp = Grasp::new_normalized(nums[0], nums[1], nums[2], nums[3], width_unit)
                .map_err(|e| bad(format!("instance {i} grasp {gi}: {e}")))?;
            if grasp.x < 0.0 || grasp.y < 0.0 || grasp.x >= w as f64 || grasp.y >= h as f64 {
                return Err(bad(format!(
                    "instance {i} grasp {gi}: center ({}, {}) outside {h}x{w}",
                    grasp.x, grasp.y
                )));
            }
            grasps.push(grasp);
        }
        instances.push(Instance {
            instance_id,
            class_id,
            mask,
            grasps,
        });
    }
    Ok(SceneAnnotation {
        scene_id,
        instances,
        width_unit,
    })
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub rgb: String,
    pub depth: String,
    pub annotation: String,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    /// Directory the relative paths resolve against.
    pub base: PathBuf,
    pub scenes: Vec<SceneEntry>,
    pub classes: BTreeMap<u32, String>,
    pub split: Option<SplitSpec>,
    pub width_unit: WidthUnit,
    pub mm_per_px: Option<f64>,
}

impl DatasetManifest {
    fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn scene_ids(&self) -> Vec<&str> {
        self.scenes.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|_| DataError::MissingFile(path.to_path_buf()))?;
        let value: Value = serde_json::from_str(&text).map_err(|source| DataError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let scenes: Vec<SceneEntry> = serde_json::from_value(value["scenes"].clone()).map_err(|source| DataError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let classes: BTreeMap<String, String> =
            serde_json::from_value(value["classes"].clone()).unwrap_or_default();
        let classes: BTreeMap<u32, String> = classes
            .into_iter()
            .filter_map(|(k, v)| k.parse::<u32>().ok().map(|k| (k, v)))
            .collect();
        let width_unit: WidthUnit = serde_json::from_value(value["width_unit"].clone()).map_err(|source| {
            DataError::Json {
                path: path.to_path_buf(),
                source,
            }
        })?;
        let mm_per_px = value["mm_per_px"].as_f64();
        let split = match value["split"].as_str() {
            Some(rel) => {
                let split_path = base.join(rel);
                let text = std::fs::read_to_string(&split_path).map_err(|_| DataError::MissingFile(split_path.clone()))?;
                Some(serde_json::from_str(&text).map_err(|source| DataError::Json {
                    path: split_path,
                    source,
                })?)
            }
            None => None,
        };
        let manifest = Self {
            base,
            scenes,
            classes,
            split,
            width_unit,
            mm_per_px,
        };
        let mut seen = HashSet::new();
        for entry in &manifest.scenes {
            if !seen.insert(entry.id.clone()) {
                return Err(DataError::DuplicateSceneId(entry.id.clone()));
            }
            for rel in [&entry.rgb, &entry.depth, &entry.annotation] {
                let p = manifest.resolve(rel);
                if !p.exists() {
                    return Err(DataError::MissingFile(p));
                }
            }
        }
        Ok(manifest)
    }

    pub fn load_scene(&self, scene_id: &str) -> Result<(RgbdImage, SceneAnnotation), DataError> {
        let entry = self
            .scenes
            .iter()
            .find(|s| s.id == scene_id)
            .ok_or_else(|| DataError::MissingFile(self.base.join(scene_id)))?;
        let rgb = load_rgb_png(&self.resolve(&entry.rgb))?;
        let (depth, dh, dw) = load_depth_png(&self.resolve(&entry.depth))?;
        if (dh, dw) != (rgb.height(), rgb.width()) {
            return Err(DataError::BadAnnotation {
                scene: scene_id.to_string(),
                message: format!("depth is {dh}x{dw} but rgb is {}x{}", rgb.height(), rgb.width()),
            });
        }
        let image = RgbdImage::new(rgb, depth).map_err(|e| DataError::BadAnnotation {
            scene: scene_id.to_string(),
            message: e.to_string(),
        })?;
        let ann_path = self.resolve(&entry.annotation);
        let text = std::fs::read_to_string(&ann_path).map_err(|_| DataError::MissingFile(ann_path.clone()))?;
        let value: Value = serde_json::from_str(&text).map_err(|source| DataError::Json {
            path: ann_path,
            source,
        })?;
        let annotation = annotation_from_json(&value)?;
        Ok((image, annotation))
    }

    /// Load every scene plus split and support pools into a benchmark dataset.
    pub fn load_eval_dataset(&self) -> Result<EvalDataset, DataError> {
        let mut scenes = Vec::with_capacity(self.scenes.len());
        for entry in &self.scenes {
            scenes.push(self.load_scene(&entry.id)?);
        }
        let split = self.split.clone().unwrap_or_else(|| SplitSpec::new(vec![], vec![]));
        let support_pools = self.load_support_pools()?;
        Ok(EvalDataset {
            scenes,
            split,
            support_pools,
            width_unit: self.width_unit,
            mm_per_px: self.mm_per_px,
        })
    }

    /// Support pools under `support/<class_id>/shot_<k>.rgb.png` + mask.
    pub fn load_support_pools(&self) -> Result<BTreeMap<u32, Vec<SupportShot>>, DataError> {
        let mut pools = BTreeMap::new();
        let dir = self.base.join("support");
        if !dir.exists() {
            return Ok(pools);
        }
        let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        for class_dir in class_dirs {
            let Some(class_id) = class_dir
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.parse::<u32>().ok())
            else {
                continue;
            };
            let mut shots = Vec::new();
            let mut rgb_files: Vec<PathBuf> = std::fs::read_dir(&class_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.to_string_lossy().ends_with(".rgb.png"))
                .collect();
            rgb_files.sort();
            for rgb_path in rgb_files {
                let mask_path = PathBuf::from(rgb_path.to_string_lossy().replace(".rgb.png", ".mask.png"));
                if !mask_path.exists() {
                    return Err(DataError::MissingFile(mask_path));
                }
                let rgb = load_rgb_png(&rgb_path)?;
                let mask = load_mask_png(&mask_path)?;
                let shot = SupportShot::new(rgb, mask).map_err(|e| DataError::BadImage {
                    path: rgb_path.clone(),
                    message: e.to_string(),
                })?;
                shots.push(shot);
            }
            pools.insert(class_id, shots);
        }
        Ok(pools)
    }
}

/// Write a scene directory (rgb, depth, annotation). Returns the entry for
/// the manifest, with paths relative to `base`.
pub fn save_scene(base: &Path, image: &RgbdImage, annotation: &SceneAnnotation) -> Result<SceneEntry, DataError> {
    let dir = base.join("scenes").join(&annotation.scene_id);
    std::fs::create_dir_all(&dir)?;
    save_rgb_png(&dir.join("rgb.png"), image.rgb())?;
    save_depth_png(&dir.join("depth.png"), image.depth(), image.height(), image.width())?;
    std::fs::write(
        dir.join("annotation.json"),
        to_canonical_string(&annotation_to_json(annotation)),
    )?;
    let rel = |name: &str| format!("scenes/{}/{}", annotation.scene_id, name);
    Ok(SceneEntry {
        id: annotation.scene_id.clone(),
        rgb: rel("rgb.png"),
        depth: rel("depth.png"),
        annotation: rel("annotation.json"),
    })
}

/// Write a full native dataset: scenes, split, support pools, manifest.
pub fn save_dataset(
    base: &Path,
    scenes: &[(RgbdImage, SceneAnnotation)],
    classes: &[SynthClass],
    bundle: &SplitBundle,
    width_unit: WidthUnit,
) -> Result<PathBuf, DataError> {
    std::fs::create_dir_all(base)?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (image, ann) in scenes {
        entries.push(save_scene(base, image, ann)?);
    }
    std::fs::write(
        base.join("split.json"),
        to_canonical_string(&serde_json::to_value(&bundle.spec).expect("serializable")),
    )?;
    for (class_id, shots) in &bundle.support_pools {
        let dir = base.join("support").join(class_id.to_string());
        std::fs::create_dir_all(&dir)?;
        for (k, shot) in shots.iter().enumerate() {
            save_rgb_png(&dir.join(format!("shot_{k:02}.rgb.png")), &shot.rgb)?;
            save_mask_png(&dir.join(format!("shot_{k:02}.mask.png")), &shot.mask)?;
        }
    }
    let class_table: BTreeMap<String, String> = classes
        .iter()
        .map(|c| (c.class_id.to_string(), c.name()))
        .collect();
    let manifest = json!({
        "classes": class_table,
        "mm_per_px": Value::Null,
        "scenes": serde_json::to_value(&entries).expect("serializable"),
        "split": "split.json",
        "width_unit": width_unit,
    });
    let path = base.join("manifest.json");
    std::fs::write(&path, to_canonical_string(&manifest))?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// external dataset adapters

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExternalKind {
    GraspnetLike,
    OcidLike,
}

impl ExternalKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "graspnet_like" => Some(Self::GraspnetLike),
            "ocid_like" => Some(Self::OcidLike),
            _ => None,
        }
    }
}

fn masks_from_label_image(path: &Path) -> Result<Vec<(u32, BinaryMask)>, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::BadImage {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut ids: Vec<u16> = raw.iter().copied().filter(|&v| v != 0).collect();
    ids.sort_unstable();
    ids.dedup();
    Ok(ids
        .into_iter()
        .map(|id| {
            let pixels: Vec<bool> = raw.iter().map(|&v| v == id).collect();
            (id as u32, BinaryMask::new(h, w, pixels).expect("sized"))
        })
        .collect())
}

/// Reduce an external directory layout to the native schema. Native
/// annotations and the manifest are written under `out`; image files are
/// referenced in place via absolute paths.
pub fn adapt_external(kind: ExternalKind, root: &Path, out: &Path) -> Result<DatasetManifest, DataError> {
    match kind {
        ExternalKind::GraspnetLike => adapt_graspnet_like(root, out),
        ExternalKind::OcidLike => adapt_ocid_like(root, out),
    }
}

#[derive(Debug, Deserialize)]
struct GraspnetMetaInstance {
    instance_id: u32,
    class_id: u32,
    grasps: Vec<[f64; 4]>,
}

#[derive(Debug, Deserialize)]
struct GraspnetMeta {
    instances: Vec<GraspnetMetaInstance>,
}

fn layout_err(kind: &str, root: &Path, report: String) -> DataError {
    DataError::UnrecognizedLayout {
        kind: kind.to_string(),
        root: root.to_path_buf(),
        report,
    }
}

fn adapt_graspnet_like(root: &Path, out: &Path) -> Result<DatasetManifest, DataError> {
    let scenes_dir = root.join("scenes");
    if !scenes_dir.is_dir() {
        return Err(layout_err(
            "graspnet_like",
            root,
            format!("expected a scenes/ directory at {}", scenes_dir.display()),
        ));
    }
    let dataset_json = root.join("dataset.json");
    let mm_per_px = if dataset_json.exists() {
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&dataset_json)?).map_err(|source| {
            DataError::Json {
                path: dataset_json.clone(),
                source,
            }
        })?;
        v["mm_per_px"].as_f64()
    } else {
        None
    };
    let mut scene_dirs: Vec<PathBuf> = std::fs::read_dir(&scenes_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    scene_dirs.sort();
    if scene_dirs.is_empty() {
        return Err(layout_err("graspnet_like", root, "scenes/ directory is empty".to_string()));
    }
    std::fs::create_dir_all(out.join("annotations"))?;
    let mut entries = Vec::new();
    let mut class_ids = HashSet::new();
    for dir in scene_dirs {
        let id = dir.file_name().unwrap().to_string_lossy().to_string();
        for name in ["rgb.png", "depth.png", "label.png", "meta.json"] {
            if !dir.join(name).exists() {
                return Err(layout_err(
                    "graspnet_like",
                    root,
                    format!("scene {id}: missing {name}"),
                ));
            }
        }
        let meta: GraspnetMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)
            .map_err(|source| DataError::Json {
                path: dir.join("meta.json"),
                source,
            })?;
        let masks = masks_from_label_image(&dir.join("label.png"))?;
        let mut instances = Vec::new();
        for m in &meta.instances {
            let Some((_, mask)) = masks.iter().find(|(label, _)| *label == m.instance_id) else {
                return Err(DataError::BadAnnotation {
                    scene: id.clone(),
                    message: format!("instance {} not present in label.png", m.instance_id),
                });
            };
            let grasps: Result<Vec<Grasp>, _> = m
                .grasps
                .iter()
                .map(|[x, y, theta, wmm]| Grasp::new_normalized(*x, *y, *theta, *wmm, WidthUnit::Mm))
                .collect();
            instances.push(Instance {
                instance_id: m.instance_id,
                class_id: m.class_id,
                mask: mask.clone(),
                grasps: grasps.map_err(|e| DataError::BadAnnotation {
                    scene: id.clone(),
                    message: e.to_string(),
                })?,
            });
            class_ids.insert(m.class_id);
        }
        let annotation = SceneAnnotation {
            scene_id: id.clone(),
            instances,
            width_unit: WidthUnit::Mm,
        };
        let ann_rel = format!("annotations/{id}.json");
        std::fs::write(out.join(&ann_rel), to_canonical_string(&annotation_to_json(&annotation)))?;
        entries.push(SceneEntry {
            id,
            rgb: dir.join("rgb.png").to_string_lossy().to_string(),
            depth: dir.join("depth.png").to_string_lossy().to_string(),
            annotation: ann_rel,
        });
    }
    write_adapted_manifest(out, entries, class_ids, WidthUnit::Mm, mm_per_px)
}

fn adapt_ocid_like(root: &Path, out: &Path) -> Result<DatasetManifest, DataError> {
    let mut sequences: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("rgb").is_dir())
        .collect();
    sequences.sort();
    if sequences.is_empty() {
        return Err(layout_err(
            "ocid_like",
            root,
            "no sequence directory with an rgb/ subdirectory found".to_string(),
        ));
    }
    std::fs::create_dir_all(out.join("annotations"))?;
    let mut entries = Vec::new();
    let mut class_ids = HashSet::new();
    for seq in sequences {
        let seq_name = seq.file_name().unwrap().to_string_lossy().to_string();
        let mut frames: Vec<PathBuf> = std::fs::read_dir(seq.join("rgb"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        frames.sort();
        for rgb_path in frames {
            let frame = rgb_path.file_stem().unwrap().to_string_lossy().to_string();
            let depth_path = seq.join("depth").join(format!("{frame}.png"));
            let label_path = seq.join("label").join(format!("{frame}.png"));
            let grasp_path = seq.join("grasps").join(format!("{frame}.txt"));
            for p in [&depth_path, &label_path, &grasp_path] {
                if !p.exists() {
                    return Err(layout_err(
                        "ocid_like",
                        root,
                        format!("frame {seq_name}/{frame}: missing {}", p.display()),
                    ));
                }
            }
            let masks = masks_from_label_image(&label_path)?;
            // grasp lines: x y theta width class_id
            let mut per_instance: BTreeMap<u32, (u32, Vec<Grasp>)> = BTreeMap::new();
            for (li, line) in std::fs::read_to_string(&grasp_path)?.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let fields: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| DataError::BadAnnotation {
                        scene: format!("{seq_name}/{frame}"),
                        message: format!("grasp line {}: {e}", li + 1),
                    })?;
                if fields.len() != 5 {
                    return Err(DataError::BadAnnotation {
                        scene: format!("{seq_name}/{frame}"),
                        message: format!("grasp line {}: expected 5 fields", li + 1),
                    });
                }
                let grasp = Grasp::new_normalized(fields[0], fields[1], fields[2], fields[3], WidthUnit::Px)
                    .map_err(|e| DataError::BadAnnotation {
                        scene: format!("{seq_name}/{frame}"),
                        message: format!("grasp line {}: {e}", li + 1),
                    })?;
                let class_id = fields[4] as u32;
                // assign to the instance whose mask contains the center
                let owner = masks.iter().find(|(_, m)| {
                    let (x, y) = (grasp.x.round() as usize, grasp.y.round() as usize);
                    x < m.width() && y < m.height() && m.get(x, y)
                });
                if let Some((label, _)) = owner {
                    per_instance.entry(*label).or_insert((class_id, Vec::new())).1.push(grasp);
                    class_ids.insert(class_id);
                }
            }
            // instances without grasp annotations are dropped
            let instances: Vec<Instance> = masks
                .into_iter()
                .filter_map(|(label, mask)| {
                    per_instance.remove(&label).map(|(class_id, grasps)| Instance {
                        instance_id: label,
                        class_id,
                        mask,
                        grasps,
                    })
                })
                .collect();
            let scene_id = format!("{seq_name}_{frame}");
            let annotation = SceneAnnotation {
                scene_id: scene_id.clone(),
                instances,
                width_unit: WidthUnit::Px,
            };
            let ann_rel = format!("annotations/{scene_id}.json");
            std::fs::write(out.join(&ann_rel), to_canonical_string(&annotation_to_json(&annotation)))?;
            entries.push(SceneEntry {
                id: scene_id,
                rgb: rgb_path.to_string_lossy().to_string(),
                depth: depth_path.to_string_lossy().to_string(),
                annotation: ann_rel,
            });
        }
    }
    write_adapted_manifest(out, entries, class_ids, WidthUnit::Px, None)
}

fn write_adapted_manifest(
    out: &Path,
    entries: Vec<SceneEntry>,
    class_ids: HashSet<u32>,
    width_unit: WidthUnit,
    mm_per_px: Option<f64>,
) -> Result<DatasetManifest, DataError> {
    let class_table: BTreeMap<String, String> = class_ids
        .iter()
        .map(|c| (c.to_string(), format!("class_{c}")))
        .collect();
    let manifest = json!({
        "classes": class_table,
        "mm_per_px": mm_per_px,
        "scenes": serde_json::to_value(&entries).expect("serializable"),
        "width_unit": width_unit,
    });
    let path = out.join("manifest.json");
    std::fs::write(&path, to_canonical_string(&manifest))?;
    DatasetManifest::load(&path)
}

// ---------------------------------------------------------------------------
// cache writing

fn atomic_write_lines(path: &Path, lines: &[String]) -> Result<(), DataError> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
    for line in lines {
        writeln!(tmp, "{line}")?;
    }
    tmp.flush()?;
    tmp.persist(path).map_err(|e| DataError::Io(e.error))?;
    Ok(())
}

/// Write a mask cache. Duplicate (key, counts) pairs are rejected before any
/// byte is written; the write is atomic (temp file + rename).
pub fn write_mask_cache(entries: &[MaskRecord], path: &Path) -> Result<(), DataError> {
    let mut seen: HashSet<(&str, &[u32])> = HashSet::new();
    for (index, e) in entries.iter().enumerate() {
        if !seen.insert((e.key.as_str(), e.counts.as_slice())) {
            return Err(DataError::DuplicateCacheKey { index });
        }
    }
    let lines: Vec<String> = entries
        .iter()
        .map(|e| serde_json::to_string(e).expect("serializable record"))
        .collect();
    atomic_write_lines(path, &lines)
}

/// Write an embedding cache; keys must be unique.
pub fn write_embedding_cache(entries: &[EmbeddingRecord], path: &Path) -> Result<(), DataError> {
    let mut seen: HashSet<&str> = HashSet::new();
    for (index, e) in entries.iter().enumerate() {
        if !seen.insert(e.key.as_str()) {
            return Err(DataError::DuplicateCacheKey { index });
        }
    }
    let lines: Vec<String> = entries
        .iter()
        .map(|e| serde_json::to_string(e).expect("serializable record"))
        .collect();
    atomic_write_lines(path, &lines)
}
