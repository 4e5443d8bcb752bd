//! Synthetic dataset generation and loading.
//!
//! On-disk layout:
//!
//! ```text
//! <dir>/samples.jsonl      one record per line
//! <dir>/rgb/<id>.png       photo-like image
//! <dir>/mesh/<id>.png      condition image
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::crop::{crop_local, BBox, CropTransform};
use super::pose::{HandType, SyntheticHandPose, FLEX_RANGES, NUM_JOINTS};
use super::prompt::make_prompt;
use super::render::{render_condition, render_rgb, silhouette, Appearance, SKIN_TONES};
use crate::error::{Error, Result};
use crate::imaging::{load_png, save_png, Image};
use crate::seeding::rng_for;

/// Minimum IoU between a sample's silhouette and its bbox region.
pub const MIN_BOX_IOU: f64 = 0.2;

const MAX_POSE_TRIES: usize = 200;

/// One line of `samples.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub prompt: String,
    pub bbox: BBox,
    pub keypoints: Vec<[f64; 2]>,
    pub hand_type: HandType,
}

/// A fully materialized training record.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub prompt: String,
    pub bbox: BBox,
    pub keypoints: Vec<[f64; 2]>,
    pub hand_type: HandType,
    pub rgb_global: Image,
    pub mesh_global: Image,
    pub rgb_local: Image,
    pub mesh_local: Image,
    pub local_transform: CropTransform,
}

impl Sample {
    pub fn from_parts(record: SampleRecord, rgb_global: Image, mesh_global: Image, margin: f64) -> Result<Self> {
        let size = rgb_global.dim().1;
        let (rgb_local, local_transform) = crop_local(&rgb_global, &record.bbox, size, margin)?;
        let (mesh_local, _) = crop_local(&mesh_global, &record.bbox, size, margin)?;
        Ok(Self {
            id: record.id,
            prompt: record.prompt,
            bbox: record.bbox,
            keypoints: record.keypoints,
            hand_type: record.hand_type,
            rgb_global,
            mesh_global,
            rgb_local,
            mesh_local,
            local_transform,
        })
    }
}

fn sample_pose<R: Rng>(rng: &mut R, size: usize) -> SyntheticHandPose {
    let s = size as f64;
    let roll = rng.random::<f64>();
    let hand_type = if roll < 0.45 {
        HandType::Left
    } else if roll < 0.9 {
        HandType::Right
    } else {
        HandType::Both
    };
    let scale = match hand_type {
        HandType::Both => rng.random_range(0.34..0.40),
        _ => rng.random_range(0.42..0.52),
    } * s;
    let mut joint_angles = [[0.0; 4]; 5];
    for finger in joint_angles.iter_mut() {
        finger[0] = rng.random_range(-0.25..0.25);
        for (j, (_, hi)) in FLEX_RANGES.iter().enumerate() {
            finger[j + 1] = rng.random_range(0.0..0.6 * hi);
        }
    }
    SyntheticHandPose {
        joint_angles,
        rotation: rng.random_range(-0.5..0.5),
        root_position: [rng.random_range(0.4..0.6) * s, rng.random_range(0.75..0.88) * s],
        scale,
        hand_type,
        canvas_size: size,
    }
}

/// Tight integer box around the rendered silhouette, clamped to the canvas.
pub fn bbox_for_pose(pose: &SyntheticHandPose) -> Result<BBox> {
    let (x0, y0, x1, y1) = pose.silhouette_bounds();
    let s = pose.canvas_size as f64;
    let b = BBox {
        x: x0.floor(),
        y: y0.floor(),
        w: x1.ceil() - x0.floor(),
        h: y1.ceil() - y0.floor(),
    }
    .clamped(s, s);
    b.validate()?;
    Ok(b)
}

/// IoU of the hard silhouette (coverage >= 0.5) with the bbox region.
pub fn silhouette_box_iou(pose: &SyntheticHandPose, bbox: &BBox) -> Result<f64> {
    let mask = silhouette(pose)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for ((y, x), &m) in mask.indexed_iter() {
        let inside = bbox.contains([x as f64 + 0.5, y as f64 + 0.5]);
        let fg = m >= 0.5;
        inter += (fg && inside) as usize;
        union += (fg || inside) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

fn pose_fits(pose: &SyntheticHandPose) -> bool {
    let (x0, y0, x1, y1) = pose.silhouette_bounds();
    let s = pose.canvas_size as f64;
    x0 >= 1.0 && y0 >= 1.0 && x1 <= s - 1.0 && y1 <= s - 1.0
}

/// Generated sample with its ground-truth pose and appearance.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub record: SampleRecord,
    pub pose: SyntheticHandPose,
    pub appearance: Appearance,
    pub rgb: Image,
    pub mesh: Image,
}

/// Deterministically synthesize sample `index` of a dataset seeded with `seed`.
pub fn synthesize_sample(seed: u64, index: usize, size: usize) -> Result<GeneratedSample> {
    let mut rng = rng_for(seed, index as u64);
    for _ in 0..MAX_POSE_TRIES {
        let pose = sample_pose(&mut rng, size);
        if !pose_fits(&pose) {
            continue;
        }
        let bbox = bbox_for_pose(&pose)?;
        if silhouette_box_iou(&pose, &bbox)? < MIN_BOX_IOU {
            continue;
        }
        let appearance = Appearance {
            skin: SKIN_TONES[rng.random_range(0..SKIN_TONES.len())],
            background: [
                rng.random_range(0.02..0.09),
                rng.random_range(0.02..0.09),
                rng.random_range(0.02..0.09),
            ],
            gradient: rng.random_range(0.0..0.04),
        };
        let prompt = make_prompt(&pose, &mut rng);
        let record = SampleRecord {
            id: format!("{index:05}"),
            prompt,
            bbox,
            keypoints: pose.keypoints().to_vec(),
            hand_type: pose.hand_type,
        };
        let rgb = render_rgb(&pose, &appearance)?;
        let mesh = render_condition(&pose)?;
        return Ok(GeneratedSample {
            record,
            pose,
            appearance,
            rgb,
            mesh,
        });
    }
    Err(Error::Validation(format!(
        "could not place a hand on a {size}px canvas after {MAX_POSE_TRIES} tries"
    )))
}

/// Write `n` samples to `out_dir`.
pub fn generate_dataset(n: usize, seed: u64, size: usize, out_dir: &Path) -> Result<Vec<SampleRecord>> {
    if n == 0 {
        return Err(Error::validation("dataset size must be at least 1"));
    }
    if size < 8 || size % 8 != 0 {
        return Err(Error::validation(format!("image size must be a positive multiple of 8, got {size}")));
    }
    for sub in ["rgb", "mesh"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(n);
    let mut lines = String::new();
    for i in 0..n {
        let s = synthesize_sample(seed, i, size)?;
        save_png(&out_dir.join("rgb").join(format!("{}.png", s.record.id)), &s.rgb)?;
        save_png(&out_dir.join("mesh").join(format!("{}.png", s.record.id)), &s.mesh)?;
        lines.push_str(&serde_json::to_string(&s.record)?);
        lines.push('\n');
        records.push(s.record);
    }
    let path = out_dir.join("samples.jsonl");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(lines.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(records)
}

pub fn read_records(dir: &Path) -> Result<Vec<SampleRecord>> {
    let path = dir.join("samples.jsonl");
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)?;
        if rec.keypoints.len() != NUM_JOINTS {
            return Err(Error::Validation(format!(
                "record {} has {} keypoints, expected {NUM_JOINTS}",
                rec.id,
                rec.keypoints.len()
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Load every sample of a dataset directory, deriving the local crops.
pub fn load_dataset(dir: &Path, margin: f64) -> Result<Vec<Sample>> {
    let records = read_records(dir)?;
    if records.is_empty() {
        return Err(Error::Validation(format!("dataset at {} is empty", dir.display())));
    }
    records
        .into_iter()
        .map(|rec| {
            let rgb = load_png(&dir.join("rgb").join(format!("{}.png", rec.id)))?;
            let mesh = load_png(&dir.join("mesh").join(format!("{}.png", rec.id)))?;
            Sample::from_parts(rec, rgb, mesh, margin)
        })
        .collect()
}
