//! Procedural tabletop scenes with exact ground truth.
//!
//! Each scene is a textured table region on a darker background, with flat
//! colored objects (bars, discs, L and T shapes) placed without overlap.
//! Depth encodes the layering: background ~800 mm, table ~600 mm, objects
//! 20-50 mm above the table. Grasps are constructed analytically across the
//! minor axis of each limb, so every stage of the pipeline can be trained and
//! tested without external datasets.

use crate::evalsuite::SplitSpec;
use crate::geometry::{normalize_angle, Grasp, WidthUnit};
use crate::image::{BinaryMask, RgbImage, RgbdImage, SupportShot};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("failed to place object {object_index} after {attempts} attempts; try fewer or smaller objects")]
    PlacementFailed { object_index: usize, attempts: usize },
    #[error("canvas {height}x{width} is below the 128x128 minimum")]
    CanvasTooSmall { height: usize, width: usize },
    #[error("need at least {need} classes, got {got}")]
    TooFewClasses { need: usize, got: usize },
    #[error("train fraction {0} leaves one side of the split empty")]
    EmptySplitSide(f64),
}

/// One annotated object instance in a scene.
#[derive(Debug, Clone)]
pub struct Instance {
    pub instance_id: u32,
    pub class_id: u32,
    pub mask: BinaryMask,
    pub grasps: Vec<Grasp>,
}

/// Ground truth for a scene: disjoint instance masks, each with at least one
/// grasp whose center lies inside the mask.
#[derive(Debug, Clone)]
pub struct SceneAnnotation {
    pub scene_id: String,
    pub instances: Vec<Instance>,
    pub width_unit: WidthUnit,
}

impl SceneAnnotation {
    pub fn class_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.instances.iter().map(|i| i.class_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn contains_class(&self, class_id: u32) -> bool {
        self.instances.iter().any(|i| i.class_id == class_id)
    }

    /// Union of the masks of all instances of a class.
    pub fn class_mask(&self, class_id: u32, height: usize, width: usize) -> BinaryMask {
        let mut union = BinaryMask::empty(height, width);
        for inst in self.instances.iter().filter(|i| i.class_id == class_id) {
            union = union.union_with(&inst.mask);
        }
        union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Bar,
    Disc,
    L,
    T,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Bar, Shape::Disc, Shape::L, Shape::T];

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Bar => "bar",
            Shape::Disc => "disc",
            Shape::L => "ell",
            Shape::T => "tee",
        }
    }
}

/// A synthetic class is a unique (shape, hue) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthClass {
    pub class_id: u32,
    pub shape: Shape,
    /// Hue bucket in degrees, [0, 360).
    pub hue_deg: f32,
    /// Object scale factor range relative to the shape's base dimensions.
    pub size_range: (f64, f64),
}

impl SynthClass {
    pub fn name(&self) -> String {
        format!("{}_h{:03}", self.shape.name(), self.hue_deg.round() as u32 % 360)
    }

    /// Reconstruct a class from its table name ("disc_h120"), as written to
    /// dataset manifests.
    pub fn from_name(class_id: u32, name: &str) -> Option<Self> {
        let (shape_name, hue_part) = name.rsplit_once("_h")?;
        let shape = Shape::ALL.into_iter().find(|s| s.name() == shape_name)?;
        let hue_deg: f32 = hue_part.parse::<u32>().ok()? as f32;
        Some(Self {
            class_id,
            shape,
            hue_deg,
            size_range: (0.9, 1.3),
        })
    }

    /// Flat fill color of objects of this class.
    pub fn rgb(&self) -> [u8; 3] {
        hsv_to_rgb(self.hue_deg, 0.85, 0.90)
    }
}

pub fn hsv_to_rgb(h_deg: f32, s: f32, v: f32) -> [u8; 3] {
    let h = h_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

/// Class table with one unique hue per class and shapes cycling, so the color
/// alone identifies the class (a property the oracle embedder relies on).
pub fn default_classes(n: usize) -> Vec<SynthClass> {
    (0..n)
        .map(|i| SynthClass {
            class_id: i as u32,
            shape: Shape::ALL[i % 4],
            hue_deg: (i as f32 * 360.0 / n as f32) % 360.0,
            size_range: (0.9, 1.3),
        })
        .collect()
}

/// The standard 8-class suite used across the test and benchmark fixtures:
/// hues 45 degrees apart, one of each shape twice over.
pub fn standard_suite_classes() -> Vec<SynthClass> {
    default_classes(8)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    /// Table inset from the canvas border, at the 128-px reference scale.
    pub table_margin: usize,
    pub plane_depth_mm: u16,
    pub background_depth_mm: u16,
    /// Upper bound for ground-truth grasp widths (quantizer range).
    pub width_max: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            table_margin: 16,
            plane_depth_mm: 600,
            background_depth_mm: 800,
            width_max: 90.0,
        }
    }
}

impl GenConfig {
    fn canvas_scale(&self) -> f64 {
        self.height.min(self.width) as f64 / 128.0
    }

    /// Table rectangle as (x0, y0, x1, y1), half-open.
    pub fn table_rect(&self) -> (usize, usize, usize, usize) {
        let m = (self.table_margin as f64 * self.canvas_scale()).round() as usize;
        (m, m, self.width - m, self.height - m)
    }
}

struct PlacedShape {
    class_idx: usize,
    cx: f64,
    cy: f64,
    phi_deg: f64,
}

/// Shape extents in the object frame, before rotation. All dimensions get
/// multiplied by the instance scale.
struct Dims {
    a_len: f64,
    a_thick: f64,
    b_len: f64,
    b_thick: f64,
    radius: f64,
}

fn base_dims(shape: Shape) -> Dims {
    match shape {
        Shape::Bar => Dims { a_len: 36.0, a_thick: 11.0, b_len: 0.0, b_thick: 0.0, radius: 0.0 },
        Shape::Disc => Dims { a_len: 0.0, a_thick: 0.0, b_len: 0.0, b_thick: 0.0, radius: 12.0 },
        Shape::L => Dims { a_len: 34.0, a_thick: 10.0, b_len: 26.0, b_thick: 10.0, radius: 0.0 },
        Shape::T => Dims { a_len: 30.0, a_thick: 10.0, b_len: 22.0, b_thick: 10.0, radius: 0.0 },
    }
}

/// Point-in-shape test in the object frame centered at the shape's bbox center.
fn inside_shape(shape: Shape, d: &Dims, ox: f64, oy: f64) -> bool {
    match shape {
        Shape::Bar => ox.abs() <= d.a_len / 2.0 && oy.abs() <= d.a_thick / 2.0,
        Shape::Disc => ox * ox + oy * oy <= d.radius * d.radius,
        Shape::L => {
            let x = ox + d.a_len / 2.0;
            let y = oy + d.b_len / 2.0;
            let limb_a = (0.0..=d.a_len).contains(&x) && (0.0..=d.a_thick).contains(&y);
            let limb_b = (0.0..=d.b_thick).contains(&x) && (0.0..=d.b_len).contains(&y);
            limb_a || limb_b
        }
        Shape::T => {
            let total_h = d.a_thick + d.b_len;
            let x = ox + d.a_len / 2.0;
            let y = oy + total_h / 2.0;
            let bar = (0.0..=d.a_len).contains(&x) && (0.0..=d.a_thick).contains(&y);
            let stem_x0 = (d.a_len - d.b_thick) / 2.0;
            let stem = (stem_x0..=stem_x0 + d.b_thick).contains(&x) && (d.a_thick..=total_h).contains(&y);
            bar || stem
        }
    }
}

fn shape_extent(shape: Shape, d: &Dims) -> f64 {
    match shape {
        Shape::Bar => (d.a_len.powi(2) + d.a_thick.powi(2)).sqrt() / 2.0,
        Shape::Disc => d.radius,
        Shape::L => (d.a_len.powi(2) + d.b_len.powi(2)).sqrt() / 2.0,
        Shape::T => (d.a_len.powi(2) + (d.a_thick + d.b_len).powi(2)).sqrt() / 2.0,
    }
}

/// Ground-truth grasps in the object frame: (ox, oy, theta_obj_deg, width).
/// Width is the local minor extent plus a 10 px clearance.
fn object_frame_grasps(shape: Shape, d: &Dims) -> Vec<(f64, f64, f64, f64)> {
    let spine = |from: f64, to: f64| {
        let mut points = Vec::new();
        let span = to - from;
        let n = (span / 4.0).floor().max(0.0) as usize;
        if n == 0 {
            points.push((from + to) / 2.0);
        } else {
            for i in 0..=n {
                points.push(from + span * i as f64 / n as f64);
            }
        }
        points
    };
    let mut out = Vec::new();
    match shape {
        Shape::Bar => {
            for x in spine(-0.3 * d.a_len, 0.3 * d.a_len) {
                out.push((x, 0.0, 90.0, d.a_thick + 10.0));
            }
        }
        Shape::Disc => {
            for k in 0..8 {
                out.push((0.0, 0.0, -90.0 + 22.5 * k as f64, 2.0 * d.radius + 10.0));
            }
        }
        Shape::L => {
            let (sx, sy) = (d.a_len / 2.0, d.b_len / 2.0);
            // limb A runs along x; keep clear of the corner overlap
            for x in spine(d.b_thick + 3.0, d.a_len - 3.0) {
                out.push((x - sx, d.a_thick / 2.0 - sy, 90.0, d.a_thick + 10.0));
            }
            // limb B runs along y
            for y in spine(d.a_thick + 3.0, d.b_len - 3.0) {
                out.push((d.b_thick / 2.0 - sx, y - sy, 0.0, d.b_thick + 10.0));
            }
        }
        Shape::T => {
            let total_h = d.a_thick + d.b_len;
            let (sx, sy) = (d.a_len / 2.0, total_h / 2.0);
            let stem_x0 = (d.a_len - d.b_thick) / 2.0;
            // bar segments left and right of the stem
            for x in spine(3.0, stem_x0 - 2.0) {
                out.push((x - sx, d.a_thick / 2.0 - sy, 90.0, d.a_thick + 10.0));
            }
            for x in spine(stem_x0 + d.b_thick + 2.0, d.a_len - 3.0) {
                out.push((x - sx, d.a_thick / 2.0 - sy, 90.0, d.a_thick + 10.0));
            }
            // stem
            for y in spine(d.a_thick + 3.0, total_h - 3.0) {
                out.push((d.a_len / 2.0 - sx, y - sy, 0.0, d.b_thick + 10.0));
            }
        }
    }
    out
}

fn rasterize(placed: &PlacedShape, shape: Shape, d: &Dims, cfg: &GenConfig) -> BinaryMask {
    let rad = placed.phi_deg.to_radians();
    let (c, s) = (rad.cos(), rad.sin());
    let extent = shape_extent(shape, d).ceil() as isize + 1;
    let cx = placed.cx.round() as isize;
    let cy = placed.cy.round() as isize;
    let mut pixels = vec![false; cfg.height * cfg.width];
    for y in (cy - extent).max(0)..(cy + extent + 1).min(cfg.height as isize) {
        for x in (cx - extent).max(0)..(cx + extent + 1).min(cfg.width as isize) {
            let dx = x as f64 - placed.cx;
            let dy = y as f64 - placed.cy;
            // inverse rotation into the object frame
            let ox = c * dx + s * dy;
            let oy = -s * dx + c * dy;
            if inside_shape(shape, d, ox, oy) {
                pixels[y as usize * cfg.width + x as usize] = true;
            }
        }
    }
    BinaryMask::new(cfg.height, cfg.width, pixels).expect("sized buffer")
}

/// Generate one scene. Deterministic in (classes, n_objects, seed, cfg).
pub fn gen_scene(
    classes: &[SynthClass],
    n_objects: usize,
    seed: u64,
    cfg: &GenConfig,
) -> Result<(RgbdImage, SceneAnnotation), SynthError> {
    if cfg.height < 128 || cfg.width < 128 {
        return Err(SynthError::CanvasTooSmall { height: cfg.height, width: cfg.width });
    }
    if classes.is_empty() {
        return Err(SynthError::TooFewClasses { need: 1, got: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tx0, ty0, tx1, ty1) = cfg.table_rect();
    let canvas_scale = cfg.canvas_scale();
    let min_area = (0.003 * cfg.height as f64 * cfg.width as f64).ceil() as usize;

    let mut placed_masks: Vec<BinaryMask> = Vec::new();
    let mut instances: Vec<Instance> = Vec::new();
    let mut heights: Vec<u16> = Vec::new();

    for object_index in 0..n_objects {
        let mut ok = false;
        for _attempt in 0..100 {
            let class_idx = rng.gen_range(0..classes.len());
            let class = &classes[class_idx];
            let scale = rng.gen_range(class.size_range.0..class.size_range.1) * canvas_scale;
            let base = base_dims(class.shape);
            let dims = Dims {
                a_len: base.a_len * scale,
                a_thick: base.a_thick * scale,
                b_len: base.b_len * scale,
                b_thick: base.b_thick * scale,
                radius: base.radius * scale,
            };
            let extent = shape_extent(class.shape, &dims);
            let margin = extent + 3.0;
            if tx0 as f64 + margin >= tx1 as f64 - margin || ty0 as f64 + margin >= ty1 as f64 - margin {
                continue;
            }
            let placed = PlacedShape {
                class_idx,
                cx: rng.gen_range(tx0 as f64 + margin..tx1 as f64 - margin),
                cy: rng.gen_range(ty0 as f64 + margin..ty1 as f64 - margin),
                phi_deg: rng.gen_range(0.0..180.0),
            };
            let mask = rasterize(&placed, class.shape, &dims, cfg);
            if mask.area() < min_area {
                continue;
            }
            if placed_masks.iter().any(|m| m.intersection_area(&mask) > 0) {
                continue;
            }
            let rad = placed.phi_deg.to_radians();
            let (c, s) = (rad.cos(), rad.sin());
            let grasps: Vec<Grasp> = object_frame_grasps(class.shape, &dims)
                .into_iter()
                .map(|(ox, oy, theta_obj, width)| {
                    let gx = placed.cx + c * ox - s * oy;
                    let gy = placed.cy + s * ox + c * oy;
                    let theta = normalize_angle(theta_obj + placed.phi_deg);
                    let width = width.min(cfg.width_max);
                    Grasp::new(gx, gy, theta, width, WidthUnit::Px).expect("constructed in range")
                })
                .collect();
            let height_mm = rng.gen_range(20u16..=50u16);
            instances.push(Instance {
                instance_id: object_index as u32,
                class_id: classes[placed.class_idx].class_id,
                mask: mask.clone(),
                grasps,
            });
            placed_masks.push(mask);
            heights.push(height_mm);
            ok = true;
            break;
        }
        if !ok {
            return Err(SynthError::PlacementFailed { object_index, attempts: 100 });
        }
    }

    // paint color and depth
    let mut rgb = RgbImage::filled(cfg.height, cfg.width, [0, 0, 0]);
    let mut depth = vec![0u16; cfg.height * cfg.width];
    let table_color = [128i16, 126, 120];
    let bg_color = [42i16, 42, 48];
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let on_table = x >= tx0 && x < tx1 && y >= ty0 && y < ty1;
            let (base, amp, base_depth) = if on_table {
                (table_color, 8i16, cfg.plane_depth_mm)
            } else {
                (bg_color, 4i16, cfg.background_depth_mm)
            };
            let noise = rng.gen_range(-amp..=amp);
            let px = [
                (base[0] + noise).clamp(0, 255) as u8,
                (base[1] + noise).clamp(0, 255) as u8,
                (base[2] + noise).clamp(0, 255) as u8,
            ];
            rgb.set(x, y, px);
            depth[y * cfg.width + x] = base_depth.saturating_add_signed(rng.gen_range(-2i16..=2i16));
        }
    }
    for (inst, height_mm) in instances.iter().zip(&heights) {
        let color = classes
            .iter()
            .find(|c| c.class_id == inst.class_id)
            .expect("placed class exists")
            .rgb();
        let obj_depth = cfg.plane_depth_mm - height_mm;
        for idx in inst.mask.true_indices() {
            let (x, y) = (idx % cfg.width, idx / cfg.width);
            rgb.set(x, y, color);
            depth[idx] = obj_depth;
        }
    }

    let image = RgbdImage::new(rgb, depth).expect("valid canvas");
    let annotation = SceneAnnotation {
        scene_id: format!("scene-{seed:016x}"),
        instances,
        width_unit: WidthUnit::Px,
    };
    Ok((image, annotation))
}

/// Single-object support shot for a class: a small table scene with one
/// centered instance; returns the RGB image and the object mask.
pub fn gen_support_shot(class: &SynthClass, seed: u64) -> SupportShot {
    let cfg = GenConfig {
        height: 128,
        width: 128,
        ..GenConfig::default()
    };
    let classes = vec![class.clone()];
    // placement of a single object cannot fail on an empty table
    let (image, ann) = gen_scene(&classes, 1, seed, &cfg).expect("single object placement");
    SupportShot::new(image.rgb().clone(), ann.instances[0].mask.clone()).expect("sizes match")
}

/// Class-disjoint split plus a support pool of `pool_size` shots per test class.
#[derive(Debug, Clone)]
pub struct SplitBundle {
    pub spec: SplitSpec,
    pub support_pools: BTreeMap<u32, Vec<SupportShot>>,
}

pub const SUPPORT_POOL_SIZE: usize = 8;

pub fn gen_split(classes: &[SynthClass], train_fraction: f64, seed: u64) -> Result<SplitBundle, SynthError> {
    if classes.len() < 2 {
        return Err(SynthError::TooFewClasses { need: 2, got: classes.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<u32> = classes.iter().map(|c| c.class_id).collect();
    // Fisher-Yates for a seed-stable permutation
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let n_train = (classes.len() as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train >= classes.len() {
        return Err(SynthError::EmptySplitSide(train_fraction));
    }
    let train: Vec<u32> = ids[..n_train].to_vec();
    let test: Vec<u32> = ids[n_train..].to_vec();
    let mut support_pools = BTreeMap::new();
    for &class_id in &test {
        let class = classes.iter().find(|c| c.class_id == class_id).expect("id from table");
        let shots: Vec<SupportShot> = (0..SUPPORT_POOL_SIZE)
            .map(|k| gen_support_shot(class, splitmix(seed ^ 0x5557_0000) ^ splitmix(class_id as u64) ^ k as u64))
            .collect();
        support_pools.insert(class_id, shots);
    }
    Ok(SplitBundle {
        spec: SplitSpec::new(train, test),
        support_pools,
    })
}

/// Scenes over the whole class table plus a class-disjoint split with
/// support pools, everything derived from one master seed.
pub fn gen_dataset(
    classes: &[SynthClass],
    n_scenes: usize,
    objects_per_scene: usize,
    train_fraction: f64,
    seed: u64,
    cfg: &GenConfig,
) -> Result<(Vec<(RgbdImage, SceneAnnotation)>, SplitBundle), SynthError> {
    let scenes: Result<Vec<_>, _> = (0..n_scenes)
        .map(|i| gen_scene(classes, objects_per_scene, splitmix(seed).wrapping_add(i as u64), cfg))
        .collect();
    let bundle = gen_split(classes, train_fraction, splitmix(seed ^ 0x51_1d))?;
    Ok((scenes?, bundle))
}

/// Cheap 64-bit mix for deriving independent sub-seeds.
pub fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
