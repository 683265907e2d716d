//! Grasp-pose geometry: recovery from maps, top-N candidate extraction,
//! oriented-rectangle IoU via convex polygon clipping, Jacquard scoring and
//! affordance pose selection.
//!
//! Coordinate convention used throughout: x = column, y = row, origin at
//! the top-left pixel. Angles are radians in [-pi/2, pi/2); the rectangle
//! width axis points along (cos t, sin t) and the rasterized height is
//! `aspect * width` (aspect 0.5 by default).

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::heads::{GraspMaps, NUM_ROTATIONS};

/// Default rasterization aspect: rectangle height = width / 2.
pub const DEFAULT_ASPECT: f64 = 0.5;

/// 4-DoF grasp rectangle in image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GraspRectangle {
    /// Center column.
    pub x: f64,
    /// Center row.
    pub y: f64,
    /// Gripper rotation, [-pi/2, pi/2).
    pub theta: f64,
    /// Gripper opening in pixels.
    pub width: f64,
}

impl GraspRectangle {
    pub fn new(x: f64, y: f64, theta: f64, width: f64) -> Self {
        GraspRectangle {
            x,
            y,
            theta: fold_angle(theta),
            width,
        }
    }

    /// Corner polygon (counter-clockwise in image coordinates).
    pub fn corners(&self, aspect: f64) -> [(f64, f64); 4] {
        let (s, c) = self.theta.sin_cos();
        let hw = self.width / 2.0;
        let hh = self.width * aspect / 2.0;
        let u = (c * hw, s * hw);
        let v = (-s * hh, c * hh);
        [
            (self.x - u.0 - v.0, self.y - u.1 - v.1),
            (self.x + u.0 - v.0, self.y + u.1 - v.1),
            (self.x + u.0 + v.0, self.y + u.1 + v.1),
            (self.x - u.0 + v.0, self.y - u.1 + v.1),
        ]
    }

    pub fn area(&self, aspect: f64) -> f64 {
        self.width * self.width * aspect
    }
}

/// Fold an angle into [-pi/2, pi/2) modulo pi (gripper symmetry).
pub fn fold_angle(theta: f64) -> f64 {
    let mut a = theta.rem_euclid(std::f64::consts::PI);
    if a >= std::f64::consts::FRAC_PI_2 {
        a -= std::f64::consts::PI;
    }
    a
}

/// Absolute angular difference modulo pi, in [0, pi/2].
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::PI);
    d.min(std::f64::consts::PI - d)
}

fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % n];
        acc += x1 * y2 - x2 * y1;
    }
    acc.abs() / 2.0
}

/// Sutherland-Hodgman clip of a convex `subject` against convex `clip`.
fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    // orientation of the clip polygon decides which side is "inside"
    let clip_ccw = {
        let mut acc = 0.0;
        for i in 0..clip.len() {
            let (x1, y1) = clip[i];
            let (x2, y2) = clip[(i + 1) % clip.len()];
            acc += x1 * y2 - x2 * y1;
        }
        acc >= 0.0
    };
    let mut output: Vec<(f64, f64)> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        let inside = |p: (f64, f64)| {
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if clip_ccw {
                cross >= 0.0
            } else {
                cross <= 0.0
            }
        };
        let intersect = |p: (f64, f64), q: (f64, f64)| {
            let r = (q.0 - p.0, q.1 - p.1);
            let s = (b.0 - a.0, b.1 - a.1);
            let denom = r.0 * s.1 - r.1 * s.0;
            let t = ((a.0 - p.0) * s.1 - (a.1 - p.1) * s.0) / denom;
            (p.0 + t * r.0, p.1 + t * r.1)
        };
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            match (inside(prev), inside(cur)) {
                (true, true) => output.push(cur),
                (true, false) => output.push(intersect(prev, cur)),
                (false, true) => {
                    output.push(intersect(prev, cur));
                    output.push(cur);
                }
                (false, false) => {}
            }
        }
    }
    output
}

/// Oriented-rectangle intersection over union via polygon clipping.
pub fn rect_iou(a: &GraspRectangle, b: &GraspRectangle, aspect: f64) -> Result<f64> {
    if a.width <= 0.0 || b.width <= 0.0 {
        return Err(Error::Input("degenerate rectangle with non-positive width".into()));
    }
    let pa = a.corners(aspect);
    let pb = b.corners(aspect);
    let inter = polygon_area(&clip_convex(&pa, &pb));
    let union = a.area(aspect) + b.area(aspect) - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Argmax site of the quality map with row-major tie-breaking; rotation and
/// width read at that site.
pub fn recover_grasp(maps: &GraspMaps) -> Result<GraspRectangle> {
    let (h, w) = maps.quality.dim();
    if maps.angle.dim() != (h, w) || maps.width.dim() != (h, w) {
        return Err(Error::Input("grasp maps have mismatched shapes".into()));
    }
    if maps.quality.iter().any(|v| v.is_nan()) {
        return Err(Error::Input("quality map contains NaN".into()));
    }
    let mut best = (0usize, 0usize);
    let mut best_q = f64::NEG_INFINITY;
    for y in 0..h {
        for x in 0..w {
            let q = maps.quality[(y, x)];
            if q > best_q {
                best_q = q;
                best = (y, x);
            }
        }
    }
    let (y, x) = best;
    Ok(GraspRectangle::new(
        x as f64,
        y as f64,
        maps.angle[(y, x)],
        maps.width[(y, x)],
    ))
}

/// Candidate extraction parameters: greedy non-maximum suppression over
/// sites at or above `rel_threshold * max(Q)` with a minimum peak distance.
#[derive(Clone, Copy, Debug)]
pub struct TopNParams {
    pub nms_radius: f64,
    pub rel_threshold: f64,
}

impl Default for TopNParams {
    fn default() -> Self {
        TopNParams {
            nms_radius: 5.0,
            rel_threshold: 0.5,
        }
    }
}

/// Up to `n` grasp rectangles at well-separated quality peaks, sorted by
/// descending quality (row-major index breaks ties).
pub fn extract_top_n(
    maps: &GraspMaps,
    n: usize,
    params: &TopNParams,
) -> Result<Vec<GraspRectangle>> {
    if n == 0 {
        return Err(Error::Input("top-n extraction needs n >= 1".into()));
    }
    if maps.quality.iter().any(|v| v.is_nan()) {
        return Err(Error::Input("quality map contains NaN".into()));
    }
    let (h, w) = maps.quality.dim();
    let q_max = maps.quality.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let thresh = q_max * params.rel_threshold;
    let mut sites: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if maps.quality[(y, x)] >= thresh {
                sites.push((y, x));
            }
        }
    }
    // stable order: quality descending, then row-major
    sites.sort_by(|&(ya, xa), &(yb, xb)| {
        maps.quality[(yb, xb)]
            .partial_cmp(&maps.quality[(ya, xa)])
            .unwrap()
            .then((ya * w + xa).cmp(&(yb * w + xb)))
    });
    let mut picked: Vec<(usize, usize)> = Vec::new();
    for (y, x) in sites {
        if picked.len() >= n {
            break;
        }
        let far = picked.iter().all(|&(py, px)| {
            let dy = y as f64 - py as f64;
            let dx = x as f64 - px as f64;
            (dy * dy + dx * dx).sqrt() > params.nms_radius
        });
        if far {
            picked.push((y, x));
        }
    }
    Ok(picked
        .into_iter()
        .map(|(y, x)| {
            GraspRectangle::new(x as f64, y as f64, maps.angle[(y, x)], maps.width[(y, x)])
        })
        .collect())
}

/// Jacquard criterion: success iff any of the top-n candidates matches any
/// ground-truth rectangle with angle difference below 30° (modulo pi) and
/// IoU above 0.25.
pub fn jacquard_at_n(
    preds: &[GraspRectangle],
    gts: &[GraspRectangle],
    n: usize,
    aspect: f64,
) -> Result<bool> {
    if gts.is_empty() {
        return Err(Error::Input("jacquard needs at least one ground truth".into()));
    }
    let limit = preds.len().min(n);
    for p in &preds[..limit] {
        for g in gts {
            if angle_diff(p.theta, g.theta) < 30f64.to_radians()
                && rect_iou(p, g, aspect)? > 0.25
            {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Selected affordance pose: pixel, discrete rotation and the depth there.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RgaPose {
    pub x: usize,
    pub y: usize,
    /// One of k * 30° in radians.
    pub theta: f64,
    /// Depth (meters) read at the selected pixel.
    pub z: f64,
}

/// Global argmax over the H x W x 6 affordance stack with
/// row-major-then-channel tie-breaking; depth read at the winning pixel.
pub fn rga_select(scores: &Array3<f64>, depth: &Array2<f64>) -> Result<RgaPose> {
    let (h, w, k) = scores.dim();
    if k != NUM_ROTATIONS {
        return Err(Error::Input(format!(
            "affordance stack has {k} channels, expected {NUM_ROTATIONS}"
        )));
    }
    if depth.dim() != (h, w) {
        return Err(Error::Input("depth map shape mismatch".into()));
    }
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::Input("affordance scores contain NaN".into()));
    }
    let mut best = (0usize, 0usize, 0usize);
    let mut best_v = f64::NEG_INFINITY;
    for y in 0..h {
        for x in 0..w {
            for c in 0..NUM_ROTATIONS {
                let v = scores[(y, x, c)];
                if v > best_v {
                    best_v = v;
                    best = (y, x, c);
                }
            }
        }
    }
    let (y, x, c) = best;
    Ok(RgaPose {
        x,
        y,
        theta: c as f64 * std::f64::consts::PI / NUM_ROTATIONS as f64,
        z: depth[(y, x)],
    })
}

// ---- prediction exchange records ----

/// One scored candidate in the exchange format.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CandidateRecord {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub width: f64,
    pub quality: f64,
}

/// Per-sample prediction record; serialized one JSON object per line so
/// external systems can be scored by this module. Field order is fixed:
/// sample id, candidates (x, y, theta, width, quality), optional pose.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub candidates: Vec<CandidateRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rga_pose: Option<RgaPose>,
}

pub fn write_prediction_records(path: &std::path::Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_prediction_records(path: &std::path::Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))
        .collect()
}
