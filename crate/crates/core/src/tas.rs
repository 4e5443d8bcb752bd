//! Attention refinement on hand-related tokens and the latent update that
//! pushes every attended token to peak somewhere in the image.

use std::sync::Arc;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::{argmax, spatial_filter, Array, Graph, Var};
use crate::codec::{stack_images, unstack, LatentImage, TextEmbedding};
use crate::diffusion::unet::{check_inputs, forward, Cond};
use crate::diffusion::{AttentionRecord, LatentPair, ModelConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Params};

/// Tokens whose refined maps enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenSet {
    Hand,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TasConfig {
    /// Apply the latent update during training.
    pub enabled: bool,
    pub gaussian_kernel_size: usize,
    pub gaussian_sigma: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub apply_at_inference: bool,
    pub max_grad_norm: f64,
    pub token_set: TokenSet,
}

impl Default for TasConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            gaussian_kernel_size: 3,
            gaussian_sigma: 0.5,
            alpha_start: 20.0,
            alpha_end: 10.0,
            apply_at_inference: false,
            max_grad_norm: 1.0,
            token_set: TokenSet::Hand,
        }
    }
}

impl TasConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gaussian_kernel_size % 2 == 0 {
            return Err(Error::validation("gaussian_kernel_size must be odd"));
        }
        if !(self.gaussian_sigma >= 0.0) {
            return Err(Error::validation("gaussian_sigma must be non-negative"));
        }
        if !(self.alpha_end > 0.0 && self.alpha_start >= self.alpha_end) {
            return Err(Error::validation("need alpha_start >= alpha_end > 0"));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::validation("max_grad_norm must be positive"));
        }
        Ok(())
    }

    pub fn kernel(&self) -> Result<Arc<Vec<f64>>> {
        Ok(Arc::new(gaussian_kernel(self.gaussian_kernel_size, self.gaussian_sigma)?))
    }
}

/// Row-major `size x size` Gaussian normalized to sum 1. `sigma = 0` gives
/// the delta kernel.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size % 2 == 0 {
        return Err(Error::Validation(format!("kernel size must be odd, got {size}")));
    }
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let dy = (i / size) as f64 - r;
            let dx = (i % size) as f64 - r;
            if sigma == 0.0 {
                if dx == 0.0 && dy == 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
            }
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    Ok(k)
}

/// Refined map: attended columns replaced by their smoothed spatial
/// distributions, all other columns untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedAttention {
    pub a_hat: Array3<f64>,
    pub hand_token_indices: Vec<usize>,
    /// Spatial maximum of each refined column, aligned with `hand_token_indices`.
    pub s: Vec<f64>,
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn refine_attention(record: &AttentionRecord, hand_idx: &[usize], cfg: &TasConfig) -> Result<RefinedAttention> {
    if hand_idx.is_empty() {
        return Err(Error::validation("no tokens to refine"));
    }
    let (h, w, n) = record.a.dim();
    if let Some(bad) = hand_idx.iter().find(|&&i| i >= n) {
        return Err(Error::Validation(format!("token index {bad} outside {n} columns")));
    }
    let kernel = cfg.kernel()?;
    let mut a_hat = record.a.clone();
    let mut s = Vec::with_capacity(hand_idx.len());
    for &k in hand_idx {
        let col: Vec<f64> = record.a.index_axis(Axis(2), k).iter().copied().collect();
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("token {k} has non-finite logits")));
        }
        let smooth = spatial_filter(&softmax(&col), h, w, &kernel, false);
        s.push(smooth[argmax(&smooth)]);
        for (i, v) in smooth.into_iter().enumerate() {
            a_hat[[i / w, i % w, k]] = v;
        }
    }
    Ok(RefinedAttention {
        a_hat,
        hand_token_indices: hand_idx.to_vec(),
        s,
    })
}

/// `max(1 - s_n)` over the refined tokens.
pub fn tas_loss(refined: &RefinedAttention) -> f64 {
    refined.s.iter().map(|s| 1.0 - s).fold(f64::NEG_INFINITY, f64::max)
}

/// Step size at timestep `t`, linear from `alpha_end` at 0 to `alpha_start` at `T - 1`.
pub fn alpha_schedule(t: usize, steps: usize, cfg: &TasConfig) -> Result<f64> {
    if t >= steps {
        return Err(Error::Validation(format!("timestep {t} outside [0, {steps})")));
    }
    if steps == 1 {
        return Ok(cfg.alpha_start);
    }
    Ok(cfg.alpha_end + (cfg.alpha_start - cfg.alpha_end) * t as f64 / (steps - 1) as f64)
}

/// Token positions entering the loss for one prompt.
pub fn attended_tokens(text: &TextEmbedding, set: TokenSet) -> Vec<usize> {
    match set {
        TokenSet::Hand => text.hand_token_indices.clone(),
        TokenSet::All => (0..text.mask.len()).filter(|&i| text.mask[i]).collect(),
    }
}

/// `x - alpha * clip(grad)`, with `grad` rescaled to norm `max_norm` if longer.
pub fn apply_update(x: &LatentImage, grad: &LatentImage, alpha: f64, max_norm: f64) -> Result<LatentImage> {
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite attention-loss gradient".into()));
    }
    let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    let clip = if norm > max_norm { max_norm / norm } else { 1.0 };
    Ok(x - &(grad * (alpha * clip)))
}

/// Differentiable loss of batch item `b` from masked logits `[B, h*w, N]`.
pub(crate) fn tas_loss_graph<'g>(
    logits: Var<'g>,
    b: usize,
    idx: &[usize],
    hw: (usize, usize),
    kernel: &Arc<Vec<f64>>,
) -> Var<'g> {
    let s: Vec<Var<'g>> = idx
        .iter()
        .map(|&n| {
            logits
                .column(b, n)
                .softmax_last()
                .spatial_filter(hw.0, hw.1, Arc::clone(kernel))
                .max()
        })
        .collect();
    Var::stack(&s).scale(-1.0).add_scalar(1.0).max()
}

/// Batched loss and gradient of the attention objective with respect to the
/// input latents, through the frozen denoiser.
pub(crate) struct TasGradient {
    pub losses: Vec<f64>,
    pub grads: Vec<LatentImage>,
}

pub(crate) fn tas_gradient_batch(
    store: &ParamStore,
    cfg: &ModelConfig,
    x: &[&LatentImage],
    text_k: &Array,
    masks: &[Vec<bool>],
    attended: &[Vec<usize>],
    timesteps: &[usize],
    kernel: &Arc<Vec<f64>>,
) -> TasGradient {
    let graph = Graph::new();
    let p = Params::new(&graph, store, false);
    let xv = graph.variable(stack_images(x));
    let cond = Cond {
        text: graph.leaf_shared(Arc::new(text_k.clone()), false),
        masks: masks.to_vec(),
        timesteps: timesteps.to_vec(),
    };
    let out = forward(cfg, &p, "", xv, &cond, None);
    let mut losses = vec![0.0; x.len()];
    let mut terms = Vec::new();
    for (b, idx) in attended.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let l = tas_loss_graph(out.logits, b, idx, out.attn_hw, kernel);
        losses[b] = l.item();
        terms.push(l);
    }
    if terms.is_empty() {
        return TasGradient {
            losses,
            grads: x.iter().map(|l| LatentImage::zeros(l.dim())).collect(),
        };
    }
    let total = Var::stack(&terms).sum();
    let g = graph.backward(total);
    let grads = unstack(g.get(xv).expect("latent gradient"));
    TasGradient { losses, grads }
}

fn single_text(text: &TextEmbedding) -> Array {
    text.k.clone().into_dyn().insert_axis(Axis(0))
}

/// Loss and latent gradient for one latent and prompt.
pub fn tas_gradient(
    store: &ParamStore,
    cfg: &ModelConfig,
    x_t: &LatentImage,
    text: &TextEmbedding,
    t: usize,
    tas: &TasConfig,
) -> Result<(f64, LatentImage)> {
    check_inputs(cfg, x_t, text)?;
    let idx = attended_tokens(text, tas.token_set);
    if idx.is_empty() {
        return Err(Error::validation("prompt has no attended tokens"));
    }
    let g = tas_gradient_batch(
        store,
        cfg,
        &[x_t],
        &single_text(text),
        &[text.mask.clone()],
        &[idx],
        &[t],
        &tas.kernel()?,
    );
    Ok((g.losses[0], g.grads.into_iter().next().unwrap()))
}

/// Attention loss of one latent without building gradients.
pub fn tas_loss_at(
    store: &ParamStore,
    cfg: &ModelConfig,
    x_t: &LatentImage,
    text: &TextEmbedding,
    t: usize,
    tas: &TasConfig,
) -> Result<f64> {
    let out = crate::diffusion::unet_forward(store, cfg, x_t, text, t, true)?;
    let idx = attended_tokens(text, tas.token_set);
    Ok(tas_loss(&refine_attention(&out.attention[0], &idx, tas)?))
}

/// One clipped gradient step per branch with step size `alpha`; returns the
/// updated pair and the mean pre-update loss over the two branches.
pub fn update_latents_with_alpha(
    store: &ParamStore,
    cfg: &ModelConfig,
    x_t: &LatentPair,
    text: &TextEmbedding,
    t: usize,
    alpha: f64,
    tas: &TasConfig,
) -> Result<(LatentPair, f64)> {
    check_inputs(cfg, &x_t.global, text)?;
    check_inputs(cfg, &x_t.local, text)?;
    let idx = attended_tokens(text, tas.token_set);
    if idx.is_empty() {
        return Ok((x_t.clone(), 0.0));
    }
    let k = single_text(text);
    let both = ndarray::concatenate(Axis(0), &[k.view(), k.view()]).unwrap();
    let g = tas_gradient_batch(
        store,
        cfg,
        &[&x_t.global, &x_t.local],
        &both,
        &[text.mask.clone(), text.mask.clone()],
        &[idx.clone(), idx],
        &[t, t],
        &tas.kernel()?,
    );
    let global = apply_update(&x_t.global, &g.grads[0], alpha, tas.max_grad_norm)?;
    let local = apply_update(&x_t.local, &g.grads[1], alpha, tas.max_grad_norm)?;
    Ok((LatentPair { global, local }, 0.5 * (g.losses[0] + g.losses[1])))
}

/// [`update_latents_with_alpha`] with the scheduled step size.
pub fn update_latents(
    store: &ParamStore,
    cfg: &ModelConfig,
    x_t: &LatentPair,
    text: &TextEmbedding,
    t: usize,
    schedule: &NoiseSchedule,
    tas: &TasConfig,
) -> Result<(LatentPair, f64)> {
    let alpha = alpha_schedule(t, schedule.len(), tas)?;
    update_latents_with_alpha(store, cfg, x_t, text, t, alpha, tas)
}

/// Noise consistent with the forward relation at the updated latent:
/// `(x_hat - sqrt(abar) x0) / sqrt(1 - abar)`.
pub fn residual_noise_one(x0: &LatentImage, x_hat: &LatentImage, t: usize, s: &NoiseSchedule) -> Result<LatentImage> {
    s.check_t(t)?;
    let ab = s.alpha_bar[t];
    if ab >= 1.0 {
        return Err(Error::validation("residual noise undefined where alpha_bar = 1"));
    }
    if x0.dim() != x_hat.dim() {
        return Err(Error::Shape {
            context: "residual noise",
            expected: x0.shape().to_vec(),
            found: x_hat.shape().to_vec(),
        });
    }
    Ok((x_hat - &(x0 * ab.sqrt())) / (1.0 - ab).sqrt())
}

pub fn residual_noise(x0: &LatentPair, x_hat: &LatentPair, t: usize, s: &NoiseSchedule) -> Result<LatentPair> {
    Ok(LatentPair {
        global: residual_noise_one(&x0.global, &x_hat.global, t, s)?,
        local: residual_noise_one(&x0.local, &x_hat.local, t, s)?,
    })
}
