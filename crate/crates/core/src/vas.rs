//! Mesh-conditioned guidance: a trainable copy of the denoiser whose
//! decoder features reach the frozen denoiser output through zero-initialized
//! 1x1 convolutions.

use std::sync::Arc;

use ndarray::Axis;

use crate::autograd::{Array, Graph, Var};
use crate::codec::{stack_images, unstack, TextEmbedding, LATENT_CHANNELS};
use crate::diffusion::unet::{check_inputs, forward, Cond, UNetOut};
use crate::diffusion::{LatentPair, ModelConfig};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{conv, conv1, conv3};
use crate::params::{ParamStore, Params};
use crate::seeding::rng_for;

/// Prefix of the denoiser copy inside the guidance weights.
pub const BODY: &str = "body.";

/// Zero-initialized 1x1 convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZeroConv {
    pub name: &'static str,
    pub cin: usize,
    pub cout: usize,
}

impl ZeroConv {
    pub fn init(&self, store: &mut ParamStore) {
        store.init_zeros(&format!("{}.weight", self.name), &[self.cout, self.cin, 1, 1]);
        store.init_zeros(&format!("{}.bias", self.name), &[self.cout]);
    }

    pub(crate) fn apply<'g>(&self, p: &Params<'g>, x: Var<'g>) -> Var<'g> {
        conv1(p, self.name, x)
    }
}

/// Entry, two decoder taps and the output, in that order.
pub fn zero_convs(cfg: &ModelConfig) -> [ZeroConv; 4] {
    let [c1, c2] = cfg.channels;
    [
        ZeroConv {
            name: "zc.in",
            cin: c1,
            cout: c1,
        },
        ZeroConv {
            name: "zc.tap0",
            cin: c2,
            cout: LATENT_CHANNELS,
        },
        ZeroConv {
            name: "zc.tap1",
            cin: c1,
            cout: LATENT_CHANNELS,
        },
        ZeroConv {
            name: "zc.out",
            cin: LATENT_CHANNELS,
            cout: LATENT_CHANNELS,
        },
    ]
}

/// Frozen denoiser weights and the trainable guidance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidancePair {
    theta_d: Arc<ParamStore>,
    theta_d_checksum: String,
    pub theta_g: ParamStore,
}

fn is_denoiser_param(name: &str) -> bool {
    !name.starts_with("text.")
}

/// Copy the denoiser into the guidance module and zero every [`ZeroConv`].
pub fn build_guidance(theta_d: ParamStore, cfg: &ModelConfig, seed: u64) -> GuidancePair {
    let mut g = ParamStore::new();
    for (name, value) in theta_d.iter().filter(|(n, _)| is_denoiser_param(n)) {
        g.insert(format!("{BODY}{name}"), (**value).clone());
    }
    let mut rng = rng_for(seed, 0);
    let c1 = cfg.channels[0];
    let gain = 2f64.sqrt();
    g.init_conv("cond.0", 3, 16, 3, gain, &mut rng);
    g.init_conv("cond.1", 16, 32, 3, gain, &mut rng);
    g.init_conv("cond.2", 32, c1, 3, gain, &mut rng);
    g.init_conv("cond.3", c1, c1, 3, 1.0, &mut rng);
    for z in zero_convs(cfg) {
        z.init(&mut g);
    }
    GuidancePair::from_parts(theta_d, g)
}

impl GuidancePair {
    pub fn from_parts(theta_d: ParamStore, theta_g: ParamStore) -> Self {
        let theta_d_checksum = theta_d.checksum();
        Self {
            theta_d: Arc::new(theta_d),
            theta_d_checksum,
            theta_g,
        }
    }

    pub fn theta_d(&self) -> &ParamStore {
        &self.theta_d
    }

    /// Checksum recorded at construction.
    pub fn theta_d_checksum(&self) -> &str {
        &self.theta_d_checksum
    }

    /// Recompute the denoiser checksum and compare it with the recorded one.
    pub fn verify_frozen(&self) -> Result<()> {
        let now = self.theta_d.checksum();
        if now != self.theta_d_checksum {
            return Err(Error::Validation(format!(
                "frozen denoiser changed: {} -> {now}",
                self.theta_d_checksum
            )));
        }
        Ok(())
    }

    /// Denoiser-copy weights with the prefix stripped.
    pub fn body(&self) -> ParamStore {
        self.theta_g.sub_store(BODY)
    }
}

fn encode_condition<'g>(p: &Params<'g>, mesh: Var<'g>) -> Var<'g> {
    let h = conv(p, "cond.0", mesh, 2, 1).silu();
    let h = conv(p, "cond.1", h, 2, 1).silu();
    let h = conv(p, "cond.2", h, 2, 1).silu();
    conv3(p, "cond.3", h)
}

/// Guidance feature `[M, C_lat, h, w]` for a batch of latents and meshes.
pub(crate) fn guidance_graph<'g>(
    cfg: &ModelConfig,
    pg: &Params<'g>,
    x: Var<'g>,
    mesh: Var<'g>,
    cond: &Cond<'g>,
) -> Var<'g> {
    let [zin, ztap0, ztap1, zout] = zero_convs(cfg);
    let entry = zin.apply(pg, encode_condition(pg, mesh));
    let UNetOut { eps, taps, .. } = forward(cfg, pg, BODY, x, cond, Some(entry));
    ztap0
        .apply(pg, taps[0])
        .upsample2x()
        .add(ztap1.apply(pg, taps[1]))
        .add(zout.apply(pg, eps))
}

fn check_mesh(mesh: &Image, latent_size: usize) -> Result<()> {
    let expected = [3, latent_size * 8, latent_size * 8];
    if mesh.shape() != expected {
        return Err(Error::Shape {
            context: "condition image",
            expected: expected.to_vec(),
            found: mesh.shape().to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn pair_batch(pair: &LatentPair) -> Array {
    stack_images(&[&pair.global, &pair.local])
}

pub(crate) fn split_pair(batch: &Array) -> LatentPair {
    let mut v = unstack(batch);
    let local = v.pop().unwrap();
    LatentPair {
        global: v.pop().unwrap(),
        local,
    }
}

fn text_pair(text: &TextEmbedding) -> Array {
    let k = text.k.clone().into_dyn().insert_axis(Axis(0));
    ndarray::concatenate(Axis(0), &[k.view(), k.view()]).unwrap()
}

/// Guidance features for the (global, local) pair, shared weights.
pub fn guidance_forward(
    pair: &GuidancePair,
    cfg: &ModelConfig,
    x_hat: &LatentPair,
    mesh: (&Image, &Image),
    text: &TextEmbedding,
    t: usize,
) -> Result<LatentPair> {
    for x in x_hat.iter() {
        check_inputs(cfg, x, text)?;
        if x.dim() != x_hat.global.dim() {
            return Err(Error::validation("global and local latents differ in shape"));
        }
    }
    let size = x_hat.global.dim().1;
    check_mesh(mesh.0, size)?;
    check_mesh(mesh.1, size)?;
    let graph = Graph::new();
    let pg = Params::new(&graph, &pair.theta_g, false);
    let cond = Cond {
        text: graph.constant(text_pair(text)),
        masks: vec![text.mask.clone(), text.mask.clone()],
        timesteps: vec![t, t],
    };
    let x = graph.constant(pair_batch(x_hat));
    let m = graph.constant(stack_images(&[mesh.0, mesh.1]));
    Ok(split_pair(&guidance_graph(cfg, &pg, x, m, &cond).value()))
}

/// Frozen denoiser output plus the guidance feature, per branch.
pub fn diffusion_forward(
    pair: &GuidancePair,
    cfg: &ModelConfig,
    x_hat: &LatentPair,
    text: &TextEmbedding,
    t: usize,
    y_g: &LatentPair,
) -> Result<LatentPair> {
    for (x, y) in x_hat.iter().zip(y_g.iter()) {
        check_inputs(cfg, x, text)?;
        if x.dim() != y.dim() {
            return Err(Error::Shape {
                context: "guidance feature",
                expected: x.shape().to_vec(),
                found: y.shape().to_vec(),
            });
        }
    }
    let graph = Graph::new();
    let pd = Params::new(&graph, pair.theta_d(), false);
    let cond = Cond {
        text: graph.constant(text_pair(text)),
        masks: vec![text.mask.clone(), text.mask.clone()],
        timesteps: vec![t, t],
    };
    let x = graph.constant(pair_batch(x_hat));
    let eps = split_pair(&forward(cfg, &pd, "", x, &cond, None).eps.value());
    Ok(LatentPair {
        global: eps.global + &y_g.global,
        local: eps.local + &y_g.local,
    })
}
