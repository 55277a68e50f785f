//! Pixel-level mask utilities: connected components, morphology, convex hull
//! filling. Used by candidate filtering, the mock segmentators and peak
//! extraction.

use crate::image::BinaryMask;

/// Connected components of the true pixels, each as a list of row-major
/// indices in scan order. Component order follows the first pixel encountered.
pub fn connected_components(pixels: &[bool], height: usize, width: usize, eight: bool) -> Vec<Vec<usize>> {
    let mut seen = vec![false; pixels.len()];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..pixels.len() {
        if !pixels[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            comp.push(idx);
            let x = (idx % width) as isize;
            let y = (idx / width) as isize;
            let neighbors: &[(isize, isize)] = if eight {
                &[(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]
            } else {
                &[(0, -1), (-1, 0), (1, 0), (0, 1)]
            };
            for (dx, dy) in neighbors {
                let nx = x + dx;
                let ny = y + dy;
                if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                    continue;
                }
                let n = ny as usize * width + nx as usize;
                if pixels[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }
    components
}

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let r2 = (radius * radius) as isize;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r2 {
                offsets.push((dx, dy));
            }
        }
    }
    offsets
}

pub fn dilate_disk(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (h, w) = mask.size();
    let offsets = disk_offsets(radius);
    let mut out = vec![false; h * w];
    for idx in mask.true_indices() {
        let x = (idx % w) as isize;
        let y = (idx / w) as isize;
        for (dx, dy) in &offsets {
            let nx = x + dx;
            let ny = y + dy;
            if nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize {
                out[ny as usize * w + nx as usize] = true;
            }
        }
    }
    BinaryMask::new(h, w, out).expect("same size")
}

pub fn erode_disk(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (h, w) = mask.size();
    let offsets = disk_offsets(radius);
    BinaryMask::from_fn(h, w, |x, y| {
        offsets.iter().all(|(dx, dy)| {
            let nx = x as isize + dx;
            let ny = y as isize + dy;
            nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize && mask.get(nx as usize, ny as usize)
        })
    })
}

/// Morphological closing with a disk structuring element.
pub fn close_disk(mask: &BinaryMask, radius: usize) -> BinaryMask {
    erode_disk(&dilate_disk(mask, radius), radius)
}

/// Filled convex hull of the true pixels. Empty input gives an empty mask.
pub fn filled_convex_hull(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.size();
    let points: Vec<(i64, i64)> = mask
        .true_indices()
        .map(|idx| ((idx % w) as i64, (idx / w) as i64))
        .collect();
    if points.is_empty() {
        return BinaryMask::empty(h, w);
    }
    let hull = convex_hull(points);
    if hull.len() == 1 {
        return BinaryMask::from_fn(h, w, |x, y| (x as i64, y as i64) == hull[0]);
    }
    // point-in-convex-polygon test with boundary treated as inside
    BinaryMask::from_fn(h, w, |x, y| {
        let (px, py) = (x as i64, y as i64);
        let n = hull.len();
        for i in 0..n {
            let (ax, ay) = hull[i];
            let (bx, by) = hull[(i + 1) % n];
            let cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
            if cross < 0 {
                return false;
            }
        }
        true
    })
}

/// Andrew monotone chain, counter-clockwise output.
fn convex_hull(mut points: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    points.sort_unstable();
    points.dedup();
    if points.len() <= 2 {
        return points;
    }
    let cross = |o: (i64, i64), a: (i64, i64), b: (i64, i64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(points.len() * 2);
    for &p in &points {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in points.iter().rev() {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Fraction of `mask` pixels lying inside `region` (0 when mask is empty).
pub fn overlap_fraction(mask: &BinaryMask, region: &BinaryMask) -> f64 {
    if mask.area() == 0 {
        return 0.0;
    }
    mask.intersection_area(region) as f64 / mask.area() as f64
}
