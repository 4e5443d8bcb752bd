use serde::{Deserialize, Serialize};

use super::LatentPair;
use crate::codec::LatentImage;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 100,
            beta_min: 1e-3,
            beta_max: 0.2,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_min, self.beta_max)
    }
}

/// Linear-beta DDPM schedule; index `t` runs over `0..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::validation("schedule needs at least one step"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Validation(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Validation(format!("timestep {t} outside [0, {})", self.len())));
        }
        Ok(())
    }
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(x0: &LatentImage, t: usize, eps: &LatentImage, s: &NoiseSchedule) -> Result<LatentImage> {
    s.check_t(t)?;
    if x0.dim() != eps.dim() {
        return Err(Error::Shape {
            context: "q_sample noise",
            expected: x0.shape().to_vec(),
            found: eps.shape().to_vec(),
        });
    }
    let ab = s.alpha_bar[t];
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// [`q_sample`] on both branches independently.
pub fn q_sample_pair(x0: &LatentPair, t: usize, eps: &LatentPair, s: &NoiseSchedule) -> Result<LatentPair> {
    Ok(LatentPair {
        global: q_sample(&x0.global, t, &eps.global, s)?,
        local: q_sample(&x0.local, t, &eps.local, s)?,
    })
}
