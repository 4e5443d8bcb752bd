//! Small U-Net: resolutions S, S/2, S/4 with one cross-attention block on
//! each side of the S/2 level.

use std::sync::Arc;

use ndarray::{Array3, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Array, Graph, Var};
use crate::codec::{init_text_table, LatentImage, TextEmbedding, LATENT_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{conv1, conv3, conv_down, linear, sinusoidal};
use crate::params::{ParamStore, Params};

/// Which cross-attention block supplies the recorded map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionLayer {
    Down,
    Up,
}

impl AttentionLayer {
    pub fn id(&self) -> &'static str {
        match self {
            Self::Down => "down1.attn",
            Self::Up => "up1.attn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Widths at full and half latent resolution (the quarter level reuses the second).
    pub channels: [usize; 2],
    pub time_dim: usize,
    pub text_dim: usize,
    pub max_tokens: usize,
    pub attn_dim: usize,
    pub attention_layer: AttentionLayer,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32],
            time_dim: 64,
            text_dim: 64,
            max_tokens: 16,
            attn_dim: 32,
            attention_layer: AttentionLayer::Down,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.channels[0],
            self.channels[1],
            self.time_dim,
            self.text_dim,
            self.max_tokens,
            self.attn_dim,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::validation("model dimensions must be positive"));
        }
        if self.time_dim % 2 != 0 || self.text_dim % 2 != 0 {
            return Err(Error::validation("time_dim and text_dim must be even"));
        }
        Ok(())
    }
}

fn init_res<R: Rng>(p: &mut ParamStore, name: &str, cin: usize, cout: usize, tdim: usize, rng: &mut R) {
    p.init_conv(&format!("{name}.conv0"), cin, cout, 3, 2f64.sqrt(), rng);
    p.init_linear(&format!("{name}.temb"), tdim, cout, 1.0, rng);
    p.init_conv(&format!("{name}.conv1"), cout, cout, 3, 0.5, rng);
    if cin != cout {
        p.init_conv(&format!("{name}.skip"), cin, cout, 1, 1.0, rng);
    }
}

fn init_attn<R: Rng>(p: &mut ParamStore, name: &str, c: usize, d: usize, da: usize, rng: &mut R) {
    p.init_linear(&format!("{name}.q"), c, da, 1.0, rng);
    p.init_linear(&format!("{name}.k"), d, da, 1.0, rng);
    p.init_linear(&format!("{name}.v"), d, da, 1.0, rng);
    p.init_linear(&format!("{name}.o"), da, c, 0.5, rng);
}

/// Denoiser weights plus the token table (`text.embedding`).
pub fn init_unet<R: Rng>(cfg: &ModelConfig, vocab_size: usize, rng: &mut R) -> ParamStore {
    let [c1, c2] = cfg.channels;
    let td = cfg.time_dim;
    let mut p = ParamStore::new();
    p.init_linear("time.0", td, td, 1.0, rng);
    p.init_linear("time.1", td, td, 1.0, rng);
    p.init_conv("conv_in", LATENT_CHANNELS, c1, 3, 1.0, rng);
    init_res(&mut p, "down0", c1, c1, td, rng);
    p.init_conv("down0.down", c1, c2, 3, 2f64.sqrt(), rng);
    init_res(&mut p, "down1", c2, c2, td, rng);
    init_attn(&mut p, "down1.attn", c2, cfg.text_dim, cfg.attn_dim, rng);
    p.init_conv("down1.down", c2, c2, 3, 2f64.sqrt(), rng);
    init_res(&mut p, "mid", c2, c2, td, rng);
    init_res(&mut p, "up1", 2 * c2, c2, td, rng);
    init_attn(&mut p, "up1.attn", c2, cfg.text_dim, cfg.attn_dim, rng);
    init_res(&mut p, "up0", c2 + c1, c1, td, rng);
    p.init_conv("conv_out", c1, LATENT_CHANNELS, 3, 0.5, rng);
    init_text_table(&mut p, vocab_size, cfg.text_dim, rng);
    p
}

/// Conditioning shared by every network in one forward pass.
pub(crate) struct Cond<'g> {
    /// `[B, N, d]`.
    pub text: Var<'g>,
    pub masks: Vec<Vec<bool>>,
    pub timesteps: Vec<usize>,
}

pub(crate) struct UNetOut<'g> {
    pub eps: Var<'g>,
    /// Decoder features at half and full latent resolution.
    pub taps: [Var<'g>; 2],
    /// Masked logits `[B, h*w, N]` of the configured attention block.
    pub logits: Var<'g>,
    pub attn_hw: (usize, usize),
}

fn res<'g>(p: &Params<'g>, name: &str, x: Var<'g>, temb: Var<'g>) -> Var<'g> {
    let h = conv3(p, &format!("{name}.conv0"), x.silu());
    let h = h.add_channel(linear(p, &format!("{name}.temb"), temb));
    let h = conv3(p, &format!("{name}.conv1"), h.silu());
    let skip_name = format!("{name}.skip.weight");
    let skip = if p.has(&skip_name) {
        conv1(p, &format!("{name}.skip"), x)
    } else {
        x
    };
    skip.add(h)
}

fn mask_bias(masks: &[Vec<bool>], hw: usize) -> Array {
    let n = masks[0].len();
    Array::from_shape_fn(IxDyn(&[masks.len(), hw, n]), |ix| {
        if masks[ix[0]][ix[2]] {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}

fn cross_attn<'g>(p: &Params<'g>, name: &str, h: Var<'g>, cond: &Cond<'g>) -> (Var<'g>, Var<'g>) {
    let s = h.shape();
    let (b, c, hh, ww) = (s[0], s[1], s[2], s[3]);
    let ts = cond.text.shape();
    let (n, d) = (ts[1], ts[2]);
    let hw = hh * ww;
    let tokens = h.to_tokens().reshape(&[b * hw, c]);
    let q = linear(p, &format!("{name}.q"), tokens);
    let da = q.shape()[1];
    let q = q.reshape(&[b, hw, da]);
    let text = cond.text.reshape(&[b * n, d]);
    let k = linear(p, &format!("{name}.k"), text).reshape(&[b, n, da]);
    let v = linear(p, &format!("{name}.v"), text).reshape(&[b, n, da]);
    let bias = p.graph().constant(mask_bias(&cond.masks, hw));
    let logits = q.bmm(k, true).scale(1.0 / (da as f64).sqrt()).add(bias);
    let o = logits.softmax_last().bmm(v, false).reshape(&[b * hw, da]);
    let o = linear(p, &format!("{name}.o"), o).reshape(&[b, hw, c]).from_tokens(hh, ww);
    (h.add(o), logits)
}

/// Graph forward pass. `prefix` selects a copy of the weights; `entry` is
/// added to the features right after `conv_in`.
pub(crate) fn forward<'g>(
    cfg: &ModelConfig,
    p: &Params<'g>,
    prefix: &str,
    x: Var<'g>,
    cond: &Cond<'g>,
    entry: Option<Var<'g>>,
) -> UNetOut<'g> {
    let n = |s: &str| format!("{prefix}{s}");
    let graph = p.graph();
    let temb = graph.constant(sinusoidal(&cond.timesteps, cfg.time_dim));
    let temb = linear(p, &n("time.0"), temb).silu();
    let temb = linear(p, &n("time.1"), temb).silu();

    let mut h = conv3(p, &n("conv_in"), x);
    if let Some(e) = entry {
        h = h.add(e);
    }
    let s1 = res(p, &n("down0"), h, temb);
    let d = conv_down(p, &n("down0.down"), s1);
    let d = res(p, &n("down1"), d, temb);
    let (s2, down_logits) = cross_attn(p, &n("down1.attn"), d, cond);
    let m = conv_down(p, &n("down1.down"), s2);
    let m = res(p, &n("mid"), m, temb);
    let u = res(p, &n("up1"), m.upsample2x().concat_channels(s2), temb);
    let (u1, up_logits) = cross_attn(p, &n("up1.attn"), u, cond);
    let u0 = res(p, &n("up0"), u1.upsample2x().concat_channels(s1), temb);
    let eps = conv3(p, &n("conv_out"), u0.silu());
    let hs = s2.shape();
    UNetOut {
        eps,
        taps: [u1, u0],
        logits: match cfg.attention_layer {
            AttentionLayer::Down => down_logits,
            AttentionLayer::Up => up_logits,
        },
        attn_hw: (hs[2], hs[3]),
    }
}

/// Raw cross-attention logits `a[h, w, n]` (padding tokens are `-inf`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub a: Array3<f64>,
    pub layer_id: String,
    pub timestep: usize,
}

impl AttentionRecord {
    pub(crate) fn from_logits(logits: &Array, batch: usize, hw: (usize, usize), layer: &str, t: usize) -> Self {
        let n = logits.shape()[2];
        let a = Array3::from_shape_fn((hw.0, hw.1, n), |(y, x, k)| logits[[batch, y * hw.1 + x, k]]);
        Self {
            a,
            layer_id: layer.to_string(),
            timestep: t,
        }
    }

    /// Softmax over tokens at every spatial location.
    pub fn token_softmax(&self) -> Array3<f64> {
        let mut out = self.a.clone();
        for mut row in out.lanes_mut(ndarray::Axis(2)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps_pred: LatentImage,
    pub attention: Vec<AttentionRecord>,
}

pub(crate) fn check_inputs(cfg: &ModelConfig, x: &LatentImage, text: &TextEmbedding) -> Result<()> {
    let (c, h, w) = x.dim();
    if c != LATENT_CHANNELS || h != w || h == 0 || h % 4 != 0 {
        return Err(Error::Shape {
            context: "denoiser latent",
            expected: vec![LATENT_CHANNELS, 4 * (h / 4).max(1), 4 * (h / 4).max(1)],
            found: vec![c, h, w],
        });
    }
    let expected = (cfg.max_tokens, cfg.text_dim);
    if text.k.dim() != expected || text.mask.len() != cfg.max_tokens {
        return Err(Error::Shape {
            context: "text embedding",
            expected: vec![expected.0, expected.1],
            found: text.k.shape().to_vec(),
        });
    }
    Ok(())
}

/// Predict the noise in `x_t` given the embedded prompt.
pub fn unet_forward(
    store: &ParamStore,
    cfg: &ModelConfig,
    x_t: &LatentImage,
    text: &TextEmbedding,
    t: usize,
    capture_attention: bool,
) -> Result<DenoiserOutput> {
    check_inputs(cfg, x_t, text)?;
    let graph = Graph::new();
    let p = Params::new(&graph, store, false);
    let x = graph.constant(x_t.clone().into_dyn().insert_axis(ndarray::Axis(0)));
    let cond = Cond {
        text: graph.leaf_shared(Arc::new(text.k.clone().into_dyn().insert_axis(ndarray::Axis(0))), false),
        masks: vec![text.mask.clone()],
        timesteps: vec![t],
    };
    let out = forward(cfg, &p, "", x, &cond, None);
    let eps_pred = crate::codec::unstack(&out.eps.value()).remove(0);
    let attention = if capture_attention {
        vec![AttentionRecord::from_logits(
            &out.logits.value(),
            0,
            out.attn_hw,
            cfg.attention_layer.id(),
            t,
        )]
    } else {
        Vec::new()
    };
    Ok(DenoiserOutput { eps_pred, attention })
}
