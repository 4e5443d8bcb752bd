//! Anti-aliased silhouette rendering of a [`SyntheticHandPose`].

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::pose::{Part, Primitive, SyntheticHandPose};
use crate::error::Result;
use crate::imaging::Image;

/// Flat colours of the condition image: palm, then thumb..pinky.
const PART_COLORS: [[f64; 3]; 6] = [
    [0.80, 0.80, 0.84],
    [0.95, 0.55, 0.55],
    [0.95, 0.85, 0.45],
    [0.55, 0.90, 0.55],
    [0.50, 0.75, 0.95],
    [0.80, 0.60, 0.95],
];

pub const SKIN_TONES: [[f64; 3]; 4] = [
    [0.96, 0.80, 0.69],
    [0.87, 0.66, 0.52],
    [0.74, 0.53, 0.40],
    [0.98, 0.87, 0.78],
];

/// Appearance parameters of the photo-like RGB image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub skin: [f64; 3],
    pub background: [f64; 3],
    /// Vertical background gradient amplitude.
    pub gradient: f64,
}

impl Default for Appearance {
    fn default() -> Self {
        Self {
            skin: SKIN_TONES[0],
            background: [0.05, 0.05, 0.06],
            gradient: 0.02,
        }
    }
}

fn dist_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let (apx, apy) = (p[0] - a[0], p[1] - a[1]);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (apx - t * abx, apy - t * aby);
    (dx * dx + dy * dy).sqrt()
}

/// Even-odd point-in-polygon test.
pub(crate) fn inside_polygon(p: [f64; 2], pts: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = pts.len();
    for i in 0..n {
        let (a, b) = (pts[i], pts[(i + n - 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Signed distance in pixels, negative inside.
pub fn signed_distance(p: [f64; 2], shape: &Primitive) -> f64 {
    match shape {
        Primitive::Capsule { a, b, radius } => dist_to_segment(p, *a, *b) - radius,
        Primitive::Polygon(pts) => {
            let n = pts.len();
            let d = (0..n)
                .map(|i| dist_to_segment(p, pts[i], pts[(i + 1) % n]))
                .fold(f64::INFINITY, f64::min);
            if inside_polygon(p, pts) {
                -d
            } else {
                d
            }
        }
    }
}

/// Per-pixel `(coverage, nearest part, signed distance)` over the canvas.
struct Raster {
    coverage: Array2<f64>,
    part: Array2<usize>,
    depth: Array2<f64>,
}

fn rasterize(parts: &[Part], size: usize) -> Raster {
    let mut coverage = Array2::zeros((size, size));
    let mut part = Array2::zeros((size, size));
    let mut depth = Array2::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let mut best = (f64::INFINITY, 0usize);
            for pt in parts {
                let d = signed_distance(p, &pt.shape);
                if d < best.0 {
                    best = (d, pt.part);
                }
            }
            coverage[[y, x]] = (0.5 - best.0).clamp(0.0, 1.0);
            part[[y, x]] = best.1;
            depth[[y, x]] = best.0;
        }
    }
    Raster {
        coverage,
        part,
        depth,
    }
}

/// Soft silhouette mask in `[0, 1]` (one-pixel anti-aliasing ramp).
pub fn silhouette(pose: &SyntheticHandPose) -> Result<Array2<f64>> {
    pose.validate()?;
    Ok(rasterize(&pose.parts(), pose.canvas_size).coverage)
}

/// Condition ("mesh") image: flat per-part colours on black.
pub fn render_condition(pose: &SyntheticHandPose) -> Result<Image> {
    pose.validate()?;
    let s = pose.canvas_size;
    let r = rasterize(&pose.parts(), s);
    Ok(Image::from_shape_fn((3, s, s), |(c, y, x)| {
        PART_COLORS[r.part[[y, x]]][c] * r.coverage[[y, x]]
    }))
}

/// Photo-like RGB image: shaded skin over a dark gradient background.
pub fn render_rgb(pose: &SyntheticHandPose, look: &Appearance) -> Result<Image> {
    pose.validate()?;
    let s = pose.canvas_size;
    let r = rasterize(&pose.parts(), s);
    let shade_depth = super::pose::FINGER_RADIUS * pose.scale;
    Ok(Image::from_shape_fn((3, s, s), |(c, y, x)| {
        let t = y as f64 / (s.max(2) - 1) as f64;
        let bg = look.background[c] + look.gradient * (t - 0.5);
        let inner = (-r.depth[[y, x]] / shade_depth).clamp(0.0, 1.0);
        let fg = look.skin[c] * (0.8 + 0.2 * inner);
        let a = r.coverage[[y, x]];
        bg * (1.0 - a) + fg * a
    }))
}
