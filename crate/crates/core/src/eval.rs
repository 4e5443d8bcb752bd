//! Condition-alignment scoring, attention heatmaps and evaluation reports.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::dataset::Sample;
use crate::error::{Error, Result};
use crate::imaging::{luminance, save_gray_png, Image};
use crate::sampling::{generate, GenerateOptions};
use crate::seeding::derive;
use crate::tas::RefinedAttention;
use crate::training::ModelState;

/// Luminance above which a pixel counts as foreground.
pub const FOREGROUND_THRESHOLD: f64 = 0.2;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub fn foreground_mask(img: &Image, threshold: f64) -> Array2<bool> {
    luminance(img).mapv(|v| v > threshold)
}

/// IoU of the thresholded foregrounds; two empty masks score 1.
pub fn silhouette_iou(generated: &Image, condition: &Image, threshold: f64) -> Result<f64> {
    if generated.dim() != condition.dim() || generated.dim().0 != 3 {
        return Err(Error::Shape {
            context: "silhouette IoU",
            expected: condition.shape().to_vec(),
            found: generated.shape().to_vec(),
        });
    }
    let (a, b) = (foreground_mask(generated, threshold), foreground_mask(condition, threshold));
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.iter().zip(b.iter()) {
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Nearest-neighbour upsampling of `map` to `size`×`size`, divided by its maximum.
pub fn heatmap(map: &Array2<f64>, size: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let m = map.iter().cloned().fold(0.0f64, f64::max);
    let norm = if m > 0.0 { m } else { 1.0 };
    Array2::from_shape_fn((size, size), |(y, x)| map[[y * h / size, x * w / size]] / norm)
}

/// Write `<sample>_<token>.png` for every `(column, token)` pair. Repeated
/// token names get a numeric suffix.
pub fn export_attention_maps(
    refined: &RefinedAttention,
    tokens: &[(usize, String)],
    sample: &str,
    out_dir: &Path,
    size: usize,
) -> Result<Vec<PathBuf>> {
    let n = refined.a_hat.dim().2;
    let mut written = Vec::with_capacity(tokens.len());
    let mut seen = std::collections::HashMap::<&str, usize>::new();
    for (col, name) in tokens {
        if *col >= n {
            return Err(Error::Validation(format!("token column {col} outside {n} columns")));
        }
        let count = seen.entry(name.as_str()).or_insert(0);
        let stem = if *count == 0 {
            format!("{sample}_{name}")
        } else {
            format!("{sample}_{name}_{count}")
        };
        *count += 1;
        let path = out_dir.join(format!("{stem}.png"));
        let map = refined.a_hat.index_axis(Axis(2), *col).to_owned();
        save_gray_png(&path, &heatmap(&map, size))?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub n: usize,
    pub steps: usize,
    pub tas: bool,
    pub mean_iou: f64,
    pub median_iou: f64,
    pub per_sample: Vec<SampleScore>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub n: usize,
    pub seed: u64,
    pub steps: usize,
    pub tas: bool,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Generate from the first `n` dataset conditions and score each output
/// against its condition image.
pub fn eval_run(model: &ModelState, samples: &[Sample], opts: &EvalOptions) -> Result<EvalReport> {
    if opts.n == 0 || opts.n > samples.len() {
        return Err(Error::Validation(format!(
            "n must lie in 1..={}, got {}",
            samples.len(),
            opts.n
        )));
    }
    let mut per_sample = Vec::with_capacity(opts.n);
    for (i, s) in samples[..opts.n].iter().enumerate() {
        let gen = generate(
            model,
            &s.mesh_global,
            &s.bbox,
            &s.prompt,
            &GenerateOptions {
                steps: opts.steps,
                seed: derive(opts.seed, i as u64),
                tas: opts.tas,
                guidance: true,
            },
        )?;
        per_sample.push(SampleScore {
            id: s.id.clone(),
            iou: silhouette_iou(&gen.image, &s.mesh_global, FOREGROUND_THRESHOLD)?,
        });
    }
    let ious: Vec<f64> = per_sample.iter().map(|s| s.iou).collect();
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: model.config.fingerprint(),
        seed: opts.seed,
        n: opts.n,
        steps: opts.steps,
        tas: opts.tas,
        mean_iou: ious.iter().sum::<f64>() / ious.len() as f64,
        median_iou: median(&ious),
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::load_png;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn mask_image(mask: &Array2<bool>) -> Image {
        let (h, w) = mask.dim();
        Array3::from_shape_fn((3, h, w), |(_, y, x)| if mask[[y, x]] { 0.9 } else { 0.05 })
    }

    #[test]
    fn iou_arithmetic() {
        let a = Array2::from_shape_fn((4, 4), |(_, x)| x < 2);
        let b = Array2::from_shape_fn((4, 4), |(_, x)| x >= 2);
        let c = Array2::from_shape_fn((4, 4), |(_, x)| (1..3).contains(&x));
        let (ia, ib, ic) = (mask_image(&a), mask_image(&b), mask_image(&c));
        assert_eq!(silhouette_iou(&ia, &ia, 0.2).unwrap(), 1.0);
        assert_eq!(silhouette_iou(&ia, &ib, 0.2).unwrap(), 0.0);
        assert!((silhouette_iou(&ia, &ic, 0.2).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(silhouette_iou(&ia, &Array3::zeros((3, 4, 5)), 0.2).is_err());
    }

    #[test]
    fn heatmap_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut a_hat = Array3::from_elem((4, 4, 3), 1.0 / 16.0);
        a_hat[[2, 1, 1]] = 0.5;
        let refined = RefinedAttention {
            a_hat,
            hand_token_indices: vec![0, 1],
            s: vec![1.0 / 16.0, 0.5],
        };
        let tokens = vec![(0, "hand".to_string()), (1, "fingers".to_string())];
        let files = export_attention_maps(&refined, &tokens, "0003", dir.path(), 16).unwrap();
        assert_eq!(files.len(), 2);
        assert!(files[0].ends_with("0003_hand.png"));
        let uniform = load_png(&files[0]).unwrap();
        assert!(uniform.iter().all(|&v| v == uniform[[0, 0, 0]]));
        let peak = luminance(&load_png(&files[1]).unwrap());
        let best = peak.indexed_iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!((best.0 / 4, best.1 / 4), (2, 1));
        assert!(export_attention_maps(&refined, &[(5, "x".into())], "s", dir.path(), 8).is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_permutation_invariant(
            bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 36),
            perm_seed in any::<u64>(),
        ) {
            let a = Array2::from_shape_fn((6, 6), |(y, x)| bits[y * 6 + x].0);
            let b = Array2::from_shape_fn((6, 6), |(y, x)| bits[y * 6 + x].1);
            let (ia, ib) = (mask_image(&a), mask_image(&b));
            let ab = silhouette_iou(&ia, &ib, 0.2).unwrap();
            prop_assert_eq!(ab, silhouette_iou(&ib, &ia, 0.2).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            let mut order: Vec<usize> = (0..36).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut crate::seeding::rng_for(perm_seed, 0));
            let pa = Array2::from_shape_fn((6, 6), |(y, x)| { let j = order[y * 6 + x]; a[[j / 6, j % 6]] });
            let pb = Array2::from_shape_fn((6, 6), |(y, x)| { let j = order[y * 6 + x]; b[[j / 6, j % 6]] });
            prop_assert_eq!(ab, silhouette_iou(&mask_image(&pa), &mask_image(&pb), 0.2).unwrap());
        }
    }
}
