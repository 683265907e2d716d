//! Independent brute-force reference implementations used by the test and
//! acceptance suites. Nothing here calls into the modules it checks: IoU is
//! counted on a supersampled pixel grid, argmax by exhaustive scan, mask
//! overlap by a double loop.

use ndarray::{Array2, Array3};

/// Point-in-convex-polygon by sign of cross products.
fn inside(poly: &[(f64, f64); 4], x: f64, y: f64) -> bool {
    let mut sign = 0i8;
    for i in 0..4 {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % 4];
        let cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1);
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

/// Intersection over union of two convex quadrilaterals, counted on a
/// supersampled grid (`scale` samples per unit length).
pub fn rasterized_rect_iou(a: &[(f64, f64); 4], b: &[(f64, f64); 4], scale: usize) -> f64 {
    let xs = a.iter().chain(b.iter()).map(|p| p.0);
    let ys = a.iter().chain(b.iter()).map(|p| p.1);
    let x_min = xs.clone().fold(f64::INFINITY, f64::min).floor();
    let x_max = xs.fold(f64::NEG_INFINITY, f64::max).ceil();
    let y_min = ys.clone().fold(f64::INFINITY, f64::min).floor();
    let y_max = ys.fold(f64::NEG_INFINITY, f64::max).ceil();
    let step = 1.0 / scale as f64;
    let mut inter = 0u64;
    let mut union = 0u64;
    let nx = ((x_max - x_min) / step).ceil() as usize;
    let ny = ((y_max - y_min) / step).ceil() as usize;
    for iy in 0..ny {
        let y = y_min + (iy as f64 + 0.5) * step;
        for ix in 0..nx {
            let x = x_min + (ix as f64 + 0.5) * step;
            let in_a = inside(a, x, y);
            let in_b = inside(b, x, y);
            if in_a && in_b {
                inter += 1;
            }
            if in_a || in_b {
                union += 1;
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Exhaustive argmax over an (H, W, K) stack, row-major-then-channel order.
pub fn brute_force_stack_argmax(scores: &Array3<f64>) -> (usize, usize, usize) {
    let (h, w, k) = scores.dim();
    let mut best = (0, 0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for y in 0..h {
        for x in 0..w {
            for c in 0..k {
                if scores[(y, x, c)] > best_v {
                    best_v = scores[(y, x, c)];
                    best = (y, x, c);
                }
            }
        }
    }
    best
}

/// Naive double-loop pixel-count IoU; empty-union pairs count as 1.
pub fn pixel_count_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let mut inter = 0u64;
    let mut union = 0u64;
    for y in 0..a.nrows() {
        for x in 0..a.ncols() {
            let pa = a[(y, x)];
            let pb = b[(y, x)];
            if pa && pb {
                inter += 1;
            }
            if pa || pb {
                union += 1;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
