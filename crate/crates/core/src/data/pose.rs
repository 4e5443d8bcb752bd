//! Articulated 2D hand skeleton.
//!
//! 21 joints in the usual order: wrist, then thumb (CMC, MCP, IP, tip),
//! index, middle, ring and pinky (MCP, PIP, DIP, tip). Geometry is given in
//! hand units for a right hand with fingers pointing up; `scale` converts to
//! pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 21;
pub const NUM_FINGERS: usize = 5;

/// Skeleton edges as joint index pairs.
pub const BONES: [(usize, usize); 20] = [
    (0, 1), (1, 2), (2, 3), (3, 4),
    (0, 5), (5, 6), (6, 7), (7, 8),
    (0, 9), (9, 10), (10, 11), (11, 12),
    (0, 13), (13, 14), (14, 15), (15, 16),
    (0, 17), (17, 18), (18, 19), (19, 20),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HandType {
    Left,
    Right,
    Both,
}

impl HandType {
    pub fn as_str(&self) -> &'static str {
        match self {
            HandType::Left => "left",
            HandType::Right => "right",
            HandType::Both => "both",
        }
    }
}

/// Base joint of each finger, its rest direction (radians, 0 = up, positive
/// towards +x) and its three segment lengths.
const FINGER_BASES: [([f64; 2], f64, [f64; 3]); NUM_FINGERS] = [
    ([-0.16, -0.12], -0.95, [0.17, 0.13, 0.11]),
    ([-0.13, -0.46], -0.15, [0.20, 0.12, 0.09]),
    ([-0.03, -0.49], 0.0, [0.22, 0.13, 0.10]),
    ([0.06, -0.47], 0.13, [0.20, 0.12, 0.09]),
    ([0.14, -0.41], 0.28, [0.15, 0.09, 0.08]),
];

/// Palm outline in hand units, counter-clockwise on screen.
const PALM: [[f64; 2]; 7] = [
    [-0.11, 0.0],
    [-0.16, -0.12],
    [-0.13, -0.46],
    [-0.03, -0.49],
    [0.06, -0.47],
    [0.14, -0.41],
    [0.11, 0.0],
];

pub const FINGER_RADIUS: f64 = 0.065;
pub const THUMB_RADIUS: f64 = 0.072;

/// Allowed `[min, max]` per angle slot: spread, then three flexions.
pub const SPREAD_RANGE: (f64, f64) = (-0.35, 0.35);
pub const FLEX_RANGES: [(f64, f64); 3] = [(0.0, 1.1), (0.0, 1.2), (0.0, 0.9)];
pub const ROTATION_RANGE: (f64, f64) = (-std::f64::consts::PI, std::f64::consts::PI);

/// Horizontal offset of each hand from the root when both hands are drawn.
const BOTH_OFFSET: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticHandPose {
    /// Per finger (thumb..pinky): spread, proximal, middle and distal flexion.
    pub joint_angles: [[f64; 4]; NUM_FINGERS],
    /// In-plane rotation about the wrist.
    pub rotation: f64,
    pub root_position: [f64; 2],
    pub scale: f64,
    pub hand_type: HandType,
    pub canvas_size: usize,
}

/// Silhouette building blocks, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Capsule { a: [f64; 2], b: [f64; 2], radius: f64 },
    Polygon(Vec<[f64; 2]>),
}

/// A primitive tagged with the hand part it belongs to (0 = palm, 1..=5 fingers).
#[derive(Debug, Clone, PartialEq)]
pub struct Part {
    pub part: usize,
    pub shape: Primitive,
}

impl SyntheticHandPose {
    /// Flat, spread-free open palm centred low on the canvas.
    pub fn open_palm(canvas_size: usize) -> Self {
        let s = canvas_size as f64;
        Self {
            joint_angles: [[0.0; 4]; NUM_FINGERS],
            rotation: 0.0,
            root_position: [0.5 * s, 0.84 * s],
            scale: 0.47 * s,
            hand_type: HandType::Right,
            canvas_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::validation(format!("pose scale must be positive, got {}", self.scale)));
        }
        if self.canvas_size == 0 {
            return Err(Error::validation("canvas size must be positive"));
        }
        if !self.root_position.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("root position must be finite"));
        }
        let in_range = |v: f64, (lo, hi): (f64, f64)| v.is_finite() && v >= lo && v <= hi;
        if !in_range(self.rotation, ROTATION_RANGE) {
            return Err(Error::validation(format!("rotation {} out of range", self.rotation)));
        }
        for (f, angles) in self.joint_angles.iter().enumerate() {
            if !in_range(angles[0], SPREAD_RANGE) {
                return Err(Error::validation(format!("finger {f} spread {} out of range", angles[0])));
            }
            for (j, range) in FLEX_RANGES.iter().enumerate() {
                if !in_range(angles[j + 1], *range) {
                    return Err(Error::validation(format!(
                        "finger {f} flexion {j} = {} out of range {range:?}",
                        angles[j + 1]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Joints in hand units for an unmirrored, unrotated right hand.
    fn local_joints(&self) -> [[f64; 2]; NUM_JOINTS] {
        let mut joints = [[0.0; 2]; NUM_JOINTS];
        for (f, (base, rest_dir, lengths)) in FINGER_BASES.iter().enumerate() {
            let angles = self.joint_angles[f];
            // Thumb curls towards the palm (+x), the other fingers towards the thumb.
            let curl = if f == 0 { 1.0 } else { -1.0 };
            let mut dir = rest_dir + angles[0];
            let mut p = *base;
            let first = 1 + 4 * f;
            joints[first] = p;
            for seg in 0..3 {
                dir += curl * angles[seg + 1];
                p = [p[0] + lengths[seg] * dir.sin(), p[1] - lengths[seg] * dir.cos()];
                joints[first + seg + 1] = p;
            }
        }
        joints
    }

    fn to_pixels(&self, p: [f64; 2], mirror: bool, offset: f64) -> [f64; 2] {
        let x = if mirror { -p[0] } else { p[0] };
        let (s, c) = self.rotation.sin_cos();
        let rx = c * x - s * p[1];
        let ry = s * x + c * p[1];
        [
            self.root_position[0] + self.scale * (rx + offset),
            self.root_position[1] + self.scale * ry,
        ]
    }

    /// `(mirrored, horizontal offset)` for each drawn hand; the first is primary.
    fn instances(&self) -> Vec<(bool, f64)> {
        match self.hand_type {
            HandType::Right => vec![(false, 0.0)],
            HandType::Left => vec![(true, 0.0)],
            HandType::Both => vec![(false, BOTH_OFFSET), (true, -BOTH_OFFSET)],
        }
    }

    /// Pixel keypoints of the primary hand.
    pub fn keypoints(&self) -> [[f64; 2]; NUM_JOINTS] {
        let (mirror, offset) = self.instances()[0];
        self.local_joints().map(|p| self.to_pixels(p, mirror, offset))
    }

    /// Pixel keypoints of every drawn hand.
    pub fn all_keypoints(&self) -> Vec<[f64; 2]> {
        let joints = self.local_joints();
        self.instances()
            .into_iter()
            .flat_map(|(m, o)| joints.iter().map(move |&p| (m, o, p)).collect::<Vec<_>>())
            .map(|(m, o, p)| self.to_pixels(p, m, o))
            .collect()
    }

    /// Silhouette primitives in pixels.
    pub fn parts(&self) -> Vec<Part> {
        let joints = self.local_joints();
        let mut parts = Vec::new();
        for (mirror, offset) in self.instances() {
            let px = |p: [f64; 2]| self.to_pixels(p, mirror, offset);
            parts.push(Part {
                part: 0,
                shape: Primitive::Polygon(PALM.iter().map(|&p| px(p)).collect()),
            });
            for f in 0..NUM_FINGERS {
                let r = if f == 0 { THUMB_RADIUS } else { FINGER_RADIUS } * self.scale;
                for seg in 0..3 {
                    let j = 1 + 4 * f + seg;
                    parts.push(Part {
                        part: f + 1,
                        shape: Primitive::Capsule {
                            a: px(joints[j]),
                            b: px(joints[j + 1]),
                            radius: r,
                        },
                    });
                }
            }
        }
        parts
    }

    /// Axis-aligned pixel bounds `(min_x, min_y, max_x, max_y)` of the silhouette.
    pub fn silhouette_bounds(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut grow = |p: [f64; 2], r: f64| {
            b.0 = b.0.min(p[0] - r);
            b.1 = b.1.min(p[1] - r);
            b.2 = b.2.max(p[0] + r);
            b.3 = b.3.max(p[1] + r);
        };
        for part in self.parts() {
            match part.shape {
                Primitive::Capsule { a, b, radius } => {
                    grow(a, radius);
                    grow(b, radius);
                }
                Primitive::Polygon(pts) => pts.iter().for_each(|&p| grow(p, 0.0)),
            }
        }
        b
    }
}
