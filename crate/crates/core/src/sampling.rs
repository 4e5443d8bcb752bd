//! Ancestral sampling through the guided denoiser.
//!
//! Steps here are 1-based: `x_t` for `t` in `1..=T` is the latent after `t`
//! noising steps, produced with schedule index `t - 1`; `x_0` is clean.

use std::sync::Arc;

use ndarray::Axis;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Graph;
use crate::codec::{encode_prompt, stack_images, LatentImage, TextEmbedding, TEXT_TABLE};
use crate::data::crop::{crop_local, BBox};
use crate::diffusion::unet::{forward, Cond};
use crate::diffusion::{AttentionRecord, LatentPair, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::params::Params;
use crate::seeding::{derive, rng_for};
use crate::tas::{alpha_schedule, update_latents_with_alpha};
use crate::training::ModelState;
use crate::vas::{guidance_graph, pair_batch, split_pair};

const SAMPLE_TAG: u64 = 0x5A3B1E;

/// Posterior update from `t` to `t_prev` given cumulative products.
fn posterior_step(
    x_t: &LatentImage,
    eps: &LatentImage,
    ab_t: f64,
    ab_prev: f64,
    z: Option<&LatentImage>,
) -> LatentImage {
    let alpha = ab_t / ab_prev;
    let beta = 1.0 - alpha;
    let mean = (x_t - &(eps * (beta / (1.0 - ab_t).sqrt()))) / alpha.sqrt();
    match z {
        Some(z) => {
            let var = (1.0 - ab_prev) / (1.0 - ab_t) * beta;
            mean + &(z * var.sqrt())
        }
        None => mean,
    }
}

fn check_step(t: usize, s: &NoiseSchedule, x: &LatentImage, eps: &LatentImage) -> Result<()> {
    if t == 0 || t > s.len() {
        return Err(Error::Validation(format!("reverse step needs t in 1..={}, got {t}", s.len())));
    }
    if x.dim() != eps.dim() {
        return Err(Error::Shape {
            context: "reverse step noise prediction",
            expected: x.shape().to_vec(),
            found: eps.shape().to_vec(),
        });
    }
    Ok(())
}

fn ab_prev(t: usize, s: &NoiseSchedule) -> f64 {
    if t >= 2 {
        s.alpha_bar[t - 2]
    } else {
        1.0
    }
}

/// One ancestral step `x_t -> x_{t-1}` with explicit noise (`None` for the
/// posterior mean).
pub fn ddpm_step_with(
    x_t: &LatentImage,
    eps_pred: &LatentImage,
    t: usize,
    s: &NoiseSchedule,
    z: Option<&LatentImage>,
) -> Result<LatentImage> {
    check_step(t, s, x_t, eps_pred)?;
    let z = if t == 1 { None } else { z };
    Ok(posterior_step(x_t, eps_pred, s.alpha_bar[t - 1], ab_prev(t, s), z))
}

/// One ancestral step drawing its noise from `rng`; no noise at `t = 1`.
pub fn ddpm_step(
    x_t: &LatentImage,
    eps_pred: &LatentImage,
    t: usize,
    s: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<LatentImage> {
    check_step(t, s, x_t, eps_pred)?;
    if t == 1 {
        return ddpm_step_with(x_t, eps_pred, t, s, None);
    }
    let z = LatentImage::from_shape_fn(x_t.dim(), |_| StandardNormal.sample(rng));
    ddpm_step_with(x_t, eps_pred, t, s, Some(&z))
}

/// `steps` 1-based timesteps evenly covering `1..=T`, ascending, ending at `T`.
pub fn timestep_sequence(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Validation(format!("steps must lie in 1..={total}, got {steps}")));
    }
    Ok((1..=steps).map(|i| (i * total).div_ceil(steps)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateOptions {
    pub steps: usize,
    pub seed: u64,
    /// Attention latent update before every reverse step.
    pub tas: bool,
    /// Add the guidance feature; off gives the text-only base model.
    pub guidance: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub image: Image,
    pub latent: LatentPair,
    /// Base-denoiser attention of the global branch, when requested.
    pub attention: Option<AttentionRecord>,
    pub text: TextEmbedding,
}

/// Conditions shared by every reverse step.
struct Conditioning {
    text: TextEmbedding,
    mesh: (Image, Image),
}

fn prepare(model: &ModelState, mesh_global: &Image, bbox: &BBox, prompt: &str) -> Result<Conditioning> {
    let cfg = &model.config;
    let s = cfg.data.image_size;
    if mesh_global.dim() != (3, s, s) {
        return Err(Error::Shape {
            context: "condition image",
            expected: vec![3, s, s],
            found: mesh_global.shape().to_vec(),
        });
    }
    let (mesh_local, _) = crop_local(mesh_global, bbox, s, cfg.data.crop_margin)?;
    let table = model.pair.theta_d().get(TEXT_TABLE).expect("token table");
    let text = encode_prompt(table, cfg.model.max_tokens, prompt)?;
    Ok(Conditioning {
        text,
        mesh: (mesh_global.clone(), mesh_local),
    })
}

/// Guided noise prediction for both branches at 1-based step `t`. Also
/// returns the base attention logits of the global branch.
fn predict(
    model: &ModelState,
    c: &Conditioning,
    x: &LatentPair,
    t: usize,
    guidance: bool,
) -> (LatentPair, AttentionRecord) {
    let cfg = &model.config.model;
    let graph = Graph::new();
    let pd = Params::new(&graph, model.pair.theta_d(), false);
    let k = c.text.k.clone().into_dyn().insert_axis(Axis(0));
    let cond = Cond {
        text: graph.leaf_shared(Arc::new(ndarray::concatenate(Axis(0), &[k.view(), k.view()]).unwrap()), false),
        masks: vec![c.text.mask.clone(); 2],
        timesteps: vec![t - 1; 2],
    };
    let xv = graph.constant(pair_batch(x));
    let base = forward(cfg, &pd, "", xv, &cond, None);
    let pred = if guidance {
        let pg = Params::new(&graph, &model.pair.theta_g, false);
        let mesh = graph.constant(stack_images(&[&c.mesh.0, &c.mesh.1]));
        base.eps.add(guidance_graph(cfg, &pg, xv, mesh, &cond))
    } else {
        base.eps
    };
    let rec = AttentionRecord::from_logits(&base.logits.value(), 0, base.attn_hw, cfg.attention_layer.id(), t - 1);
    (split_pair(&pred.value()), rec)
}

/// Run the reverse process from seeded noise down to `stop_t` (0 for a
/// full generation) and decode the global latent.
fn run(
    model: &ModelState,
    c: Conditioning,
    opts: &GenerateOptions,
    stop_t: usize,
    s: &NoiseSchedule,
) -> Result<Generation> {
    let seq = timestep_sequence(s.len(), opts.steps)?;
    let mut rng = rng_for(derive(opts.seed, SAMPLE_TAG), 0);
    let dim = model.codec_latent_dim();
    let noise = |rng: &mut ChaCha8Rng| LatentImage::from_shape_fn(dim, |_| StandardNormal.sample(rng));
    let g = noise(&mut rng);
    let mut x = LatentPair::new(g, noise(&mut rng));
    let mut attention = None;
    for i in (0..seq.len()).rev() {
        let t = seq[i];
        if t < stop_t {
            break;
        }
        if opts.tas {
            let alpha = alpha_schedule(t - 1, s.len(), &model.config.tas)?;
            x = update_latents_with_alpha(
                model.pair.theta_d(),
                &model.config.model,
                &x,
                &c.text,
                t - 1,
                alpha,
                &model.config.tas,
            )?
            .0;
        }
        let (eps, rec) = predict(model, &c, &x, t, opts.guidance);
        attention = Some(rec);
        if t == stop_t {
            break;
        }
        let (ab_t, ab_p) = (s.alpha_bar[t - 1], if i > 0 { s.alpha_bar[seq[i - 1] - 1] } else { 1.0 });
        let (zg, zl) = if i > 0 {
            let zg = noise(&mut rng);
            (Some(zg), Some(noise(&mut rng)))
        } else {
            (None, None)
        };
        x = LatentPair::new(
            posterior_step(&x.global, &eps.global, ab_t, ab_p, zg.as_ref()),
            posterior_step(&x.local, &eps.local, ab_t, ab_p, zl.as_ref()),
        );
        if x.iter().any(|l| l.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence(format!("latent became non-finite at step {t}")));
        }
    }
    let image = model.codec.decode(&x.global)?;
    Ok(Generation {
        image,
        latent: x,
        attention,
        text: c.text,
    })
}

/// Generate an image for a condition image, its hand box and a prompt.
pub fn generate(
    model: &ModelState,
    mesh_global: &Image,
    bbox: &BBox,
    prompt: &str,
    opts: &GenerateOptions,
) -> Result<Generation> {
    let s = model.config.diffusion.schedule()?;
    let c = prepare(model, mesh_global, bbox, prompt)?;
    run(model, c, opts, 0, &s)
}

/// Run the reverse process down to 1-based step `t_stop` and return the base
/// attention recorded there.
pub fn attention_at(
    model: &ModelState,
    mesh_global: &Image,
    bbox: &BBox,
    prompt: &str,
    t_stop: usize,
    opts: &GenerateOptions,
) -> Result<(AttentionRecord, TextEmbedding)> {
    let s = model.config.diffusion.schedule()?;
    if t_stop == 0 || t_stop > s.len() {
        return Err(Error::Validation(format!("t must lie in 1..={}, got {t_stop}", s.len())));
    }
    let seq = timestep_sequence(s.len(), opts.steps)?;
    if !seq.contains(&t_stop) {
        return Err(Error::Validation(format!(
            "t = {t_stop} is not visited with {} steps",
            opts.steps
        )));
    }
    let c = prepare(model, mesh_global, bbox, prompt)?;
    let g = run(model, c, opts, t_stop, &s)?;
    Ok((g.attention.expect("at least one step ran"), g.text))
}

impl ModelState {
    pub fn codec_latent_dim(&self) -> (usize, usize, usize) {
        let l = self.config.data.image_size / 8;
        (crate::codec::LATENT_CHANNELS, l, l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, q_sample};
    use proptest::prelude::*;

    #[test]
    fn true_noise_gives_the_closed_form_posterior_mean() {
        let s = make_schedule(50, 1e-3, 0.2).unwrap();
        let mut rng = rng_for(3, 0);
        let mut r = || LatentImage::from_shape_fn((4, 2, 2), |_| StandardNormal.sample(&mut rng));
        let (x0, eps) = (r(), r());
        for t in [1usize, 2, 17, 50] {
            let xt = q_sample(&x0, t - 1, &eps, &s).unwrap();
            let out = ddpm_step_with(&xt, &eps, t, &s, None).unwrap();
            let ab = s.alpha_bar[t - 1];
            let abp = if t > 1 { s.alpha_bar[t - 2] } else { 1.0 };
            let beta = s.betas[t - 1];
            let expected = &x0 * (abp.sqrt() * beta / (1.0 - ab)) + &xt * ((1.0 - beta).sqrt() * (1.0 - abp) / (1.0 - ab));
            let err = (&out - &expected).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(err < 1e-5, "t={t} err={err}");
            if t == 1 {
                assert!((&out - &x0).iter().all(|d| d.abs() < 1e-9));
            }
        }
    }

    #[test]
    fn last_step_is_deterministic_and_t0_fails() {
        let s = make_schedule(10, 1e-3, 0.2).unwrap();
        let x = LatentImage::from_elem((4, 2, 2), 0.3);
        let e = LatentImage::from_elem((4, 2, 2), -0.1);
        let a = ddpm_step(&x, &e, 1, &s, &mut rng_for(1, 0)).unwrap();
        let b = ddpm_step(&x, &e, 1, &s, &mut rng_for(2, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), x.dim());
        assert!(ddpm_step(&x, &e, 0, &s, &mut rng_for(1, 0)).is_err());
        assert!(ddpm_step(&x, &e, 11, &s, &mut rng_for(1, 0)).is_err());
        let c = ddpm_step(&x, &e, 5, &s, &mut rng_for(1, 0)).unwrap();
        let d = ddpm_step(&x, &e, 5, &s, &mut rng_for(2, 0)).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn sequences() {
        assert_eq!(timestep_sequence(100, 100).unwrap(), (1..=100).collect::<Vec<_>>());
        assert_eq!(timestep_sequence(10, 4).unwrap(), vec![3, 5, 8, 10]);
        assert!(timestep_sequence(10, 11).is_err());
        assert!(timestep_sequence(10, 0).is_err());
    }

    proptest! {
        #[test]
        fn sequences_are_strictly_increasing(total in 1usize..300, frac in 0.0f64..1.0) {
            let steps = 1 + ((total - 1) as f64 * frac) as usize;
            let seq = timestep_sequence(total, steps).unwrap();
            prop_assert_eq!(seq.len(), steps);
            prop_assert_eq!(*seq.last().unwrap(), total);
            prop_assert!(seq[0] >= 1);
            prop_assert!(seq.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
