//! Shared test oracles, independent of the library's implementation paths.

use fsgrasp::geometry::GraspBox;

/// Point-in-convex-quad by consistent winding sign; independent of the
/// library's half-plane containment.
pub fn point_in_quad(corners: &[[f64; 2]; 4], x: f64, y: f64) -> bool {
    let mut sign = 0i8;
    for i in 0..4 {
        let a = corners[i];
        let b = corners[(i + 1) % 4];
        let cross = (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
        if cross.abs() < 1e-12 {
            continue;
        }
        let s = if cross > 0.0 { 1 } else { -1 };
        if sign == 0 {
            sign = s;
        } else if sign != s {
            return false;
        }
    }
    true
}

/// Rasterized IoU at a fixed sampling step: count sample-point membership
/// over the union bounding box. The brute-force oracle for `oriented_iou`.
pub fn raster_iou(a: &GraspBox, b: &GraspBox, step: f64) -> f64 {
    let xs = a.corners.iter().chain(&b.corners).map(|c| c[0]);
    let ys = a.corners.iter().chain(&b.corners).map(|c| c[1]);
    let x0 = xs.clone().fold(f64::MAX, f64::min) - step;
    let x1 = xs.fold(f64::MIN, f64::max) + step;
    let y0 = ys.clone().fold(f64::MAX, f64::min) - step;
    let y1 = ys.fold(f64::MIN, f64::max) + step;
    let nx = ((x1 - x0) / step).ceil() as usize;
    let ny = ((y1 - y0) / step).ceil() as usize;
    let (mut in_a, mut in_b, mut in_both) = (0u64, 0u64, 0u64);
    for iy in 0..ny {
        let y = y0 + (iy as f64 + 0.5) * step;
        for ix in 0..nx {
            let x = x0 + (ix as f64 + 0.5) * step;
            let pa = point_in_quad(&a.corners, x, y);
            let pb = point_in_quad(&b.corners, x, y);
            in_a += pa as u64;
            in_b += pb as u64;
            in_both += (pa && pb) as u64;
        }
    }
    let union = in_a + in_b - in_both;
    if union == 0 {
        0.0
    } else {
        in_both as f64 / union as f64
    }
}
