//! 4-DoF grasp geometry: oriented rectangles, exact IoU, angle distance and
//! the grasp-correctness predicate.
//!
//! A grasp `(x, y, theta, w)` maps to an oriented rectangle centered at
//! `(x, y)` with its long side `w` along the `theta` direction and short side
//! `w / 2`. IoU between two such rectangles is computed exactly by convex
//! polygon clipping; a rasterization oracle exists only in the test suite.
//!
//! All operations are pure functions over immutable values.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("grasp angle {0} is outside [-90, 90)")]
    AngleOutOfRange(f64),
    #[error("grasp width {0} is negative")]
    NegativeWidth(f64),
    #[error("grasp coordinate is not finite")]
    NonFinite,
    #[error("width unit mismatch: predicted {pred:?} vs ground truth {gt:?}; convert widths to a common unit first")]
    UnitMismatch { pred: WidthUnit, gt: WidthUnit },
}

/// Unit of the gripper opening width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WidthUnit {
    Mm,
    Px,
}

impl std::fmt::Display for WidthUnit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WidthUnit::Mm => write!(f, "mm"),
            WidthUnit::Px => write!(f, "px"),
        }
    }
}

/// Planar 4-DoF grasp: center, in-plane rotation and gripper opening.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grasp {
    pub x: f64,
    pub y: f64,
    /// Degrees in [-90, 90).
    pub theta: f64,
    pub width: f64,
    pub width_unit: WidthUnit,
}

impl Grasp {
    pub fn new(x: f64, y: f64, theta: f64, width: f64, width_unit: WidthUnit) -> Result<Self, GeometryError> {
        if !(x.is_finite() && y.is_finite() && theta.is_finite() && width.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if !(-90.0..90.0).contains(&theta) {
            return Err(GeometryError::AngleOutOfRange(theta));
        }
        if width < 0.0 {
            return Err(GeometryError::NegativeWidth(width));
        }
        Ok(Self { x, y, theta, width, width_unit })
    }

    /// Like [`Grasp::new`] but folds any finite angle into [-90, 90) using the
    /// 180-degree periodicity of grasp rectangles (135 becomes -45).
    pub fn new_normalized(x: f64, y: f64, theta: f64, width: f64, width_unit: WidthUnit) -> Result<Self, GeometryError> {
        if !theta.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        Self::new(x, y, normalize_angle(theta), width, width_unit)
    }
}

/// Fold an angle in degrees into [-90, 90) modulo 180.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut t = (theta + 90.0).rem_euclid(180.0) - 90.0;
    // rem_euclid can return the open bound through rounding
    if t >= 90.0 {
        t = -90.0;
    }
    t
}

/// Oriented rectangle stored as four corners, counter-clockwise by signed area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspBox {
    pub corners: [[f64; 2]; 4],
}

impl GraspBox {
    pub fn area(&self) -> f64 {
        polygon_area(&self.corners)
    }

    pub fn center(&self) -> (f64, f64) {
        let (mut cx, mut cy) = (0.0, 0.0);
        for c in &self.corners {
            cx += c[0];
            cy += c[1];
        }
        (cx / 4.0, cy / 4.0)
    }

    /// True when the point lies inside or on the boundary.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        const EPS: f64 = 1e-9;
        for i in 0..4 {
            let a = self.corners[i];
            let b = self.corners[(i + 1) % 4];
            let cross = (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
            if cross < -EPS {
                return false;
            }
        }
        true
    }
}

/// Oriented rectangle of a grasp: long side `w` along `theta`, short side `w/2`.
///
/// Width must already be in pixels; callers convert millimeter widths with the
/// scene's mm-per-pixel scale before doing geometry. A zero width yields a
/// degenerate zero-area box (IoU with anything is 0).
pub fn grasp_to_box(g: &Grasp) -> GraspBox {
    let rad = g.theta.to_radians();
    let (ux, uy) = (rad.cos(), rad.sin());
    let (vx, vy) = (-rad.sin(), rad.cos());
    let hl = g.width / 2.0;
    let hs = g.width / 4.0;
    let corner = |su: f64, sv: f64| {
        [
            g.x + su * hl * ux + sv * hs * vx,
            g.y + su * hl * uy + sv * hs * vy,
        ]
    };
    GraspBox {
        corners: [
            corner(1.0, 1.0),
            corner(-1.0, 1.0),
            corner(-1.0, -1.0),
            corner(1.0, -1.0),
        ],
    }
}

fn polygon_area(points: &[[f64; 2]]) -> f64 {
    let n = points.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = points[i];
        let b = points[(i + 1) % n];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    (acc / 2.0).abs()
}

/// Sutherland-Hodgman clip of a convex `subject` polygon against a convex
/// `clip` polygon given in counter-clockwise order.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        for j in 0..input.len() {
            let cur = input[j];
            let next = input[(j + 1) % input.len()];
            let s_cur = side(cur);
            let s_next = side(next);
            if s_cur >= 0.0 {
                output.push(cur);
            }
            if (s_cur > 0.0 && s_next < 0.0) || (s_cur < 0.0 && s_next > 0.0) {
                let t = s_cur / (s_cur - s_next);
                output.push([cur[0] + t * (next[0] - cur[0]), cur[1] + t * (next[1] - cur[1])]);
            }
        }
    }
    output
}

/// Exact intersection-over-union of two oriented boxes.
///
/// Total function: degenerate (zero-area) inputs give 0. Arguments are
/// canonicalized before clipping so the result is bitwise symmetric.
pub fn oriented_iou(a: &GraspBox, b: &GraspBox) -> f64 {
    let key = |bx: &GraspBox| bx.corners;
    let (p, q) = if key(a) <= key(b) { (a, b) } else { (b, a) };
    let area_p = p.area();
    let area_q = q.area();
    if area_p <= 0.0 || area_q <= 0.0 {
        return 0.0;
    }
    let inter_poly = clip_convex(&p.corners, &q.corners);
    let inter = polygon_area(&inter_poly).min(area_p).min(area_q);
    let union = area_p + area_q - inter;
    inter / union
}

/// Angle comparison policy for [`is_correct_grasp_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngleWrap {
    /// min(|d|, 180 - |d|): grasp rectangles repeat every 180 degrees.
    On,
    /// Plain |d| on the raw angle values.
    Off,
}

/// Distance between two grasp angles on the 180-degree-periodic circle,
/// in [0, 90].
pub fn angle_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    d.min(180.0 - d)
}

pub fn angle_distance_with(a: f64, b: f64, wrap: AngleWrap) -> f64 {
    match wrap {
        AngleWrap::On => angle_distance(a, b),
        AngleWrap::Off => (a - b).abs(),
    }
}

pub const IOU_THRESHOLD: f64 = 0.25;
pub const ANGLE_THRESHOLD_DEG: f64 = 30.0;

/// A prediction is correct iff box IoU exceeds 0.25 and the angle difference
/// is below 30 degrees. Errors when the two grasps carry different width
/// units; geometry stays unit-agnostic and callers must convert first.
pub fn is_correct_grasp(pred: &Grasp, gt: &Grasp) -> Result<bool, GeometryError> {
    is_correct_grasp_with(pred, gt, AngleWrap::On)
}

pub fn is_correct_grasp_with(pred: &Grasp, gt: &Grasp, wrap: AngleWrap) -> Result<bool, GeometryError> {
    if pred.width_unit != gt.width_unit {
        return Err(GeometryError::UnitMismatch {
            pred: pred.width_unit,
            gt: gt.width_unit,
        });
    }
    let iou = oriented_iou(&grasp_to_box(pred), &grasp_to_box(gt));
    let dtheta = angle_distance_with(pred.theta, gt.theta, wrap);
    Ok(iou > IOU_THRESHOLD && dtheta < ANGLE_THRESHOLD_DEG)
}
