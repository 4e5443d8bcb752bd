//! Image autoencoder (8x spatial compression) and the token embedding table.

use std::path::PathBuf;
use std::sync::Arc;

use ndarray::{Array2, Array3, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Array, Graph, Var};
use crate::data::text::{TokenizedPrompt, Vocab, PAD_ID};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{conv, conv1, conv3, sinusoidal};
use crate::optim::Adam;
use crate::params::{ParamStore, Params};
use crate::seeding::{derive, rng_for};

/// Latent tensor `[C_lat, S/8, S/8]`.
pub type LatentImage = Array3<f64>;

pub const LATENT_CHANNELS: usize = 4;
const SCALE_KEY: &str = "latent_scale";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    /// Written by codec training, read by denoiser training.
    pub checkpoint: PathBuf,
    /// Channel widths at the 1/2, 1/4 and 1/8 resolutions.
    pub channels: [usize; 3],
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("codec.ckpt"),
            channels: [16, 32, 64],
            steps: 2000,
            batch_size: 4,
            lr: 2e-3,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::validation("codec channels must be positive"));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::validation("codec batch_size and lr must be positive"));
        }
        Ok(())
    }
}

/// Convolutional autoencoder with a fixed 8x downsampling factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageCodec {
    pub channels: [usize; 3],
    pub params: ParamStore,
}

impl ImageCodec {
    pub fn init(channels: [usize; 3], seed: u64) -> Self {
        let mut rng = rng_for(seed, 0);
        let [c1, c2, c3] = channels;
        let mut p = ParamStore::new();
        let g = 2f64.sqrt();
        p.init_conv("enc.0", 3, c1, 3, g, &mut rng);
        p.init_conv("enc.1", c1, c2, 3, g, &mut rng);
        p.init_conv("enc.2", c2, c3, 3, g, &mut rng);
        p.init_conv("enc.3", c3, c3, 3, g, &mut rng);
        p.init_conv("enc.out", c3, LATENT_CHANNELS, 1, 1.0, &mut rng);
        p.init_conv("dec.in", LATENT_CHANNELS, c3, 3, g, &mut rng);
        p.init_conv("dec.0", c3, c3, 3, g, &mut rng);
        p.init_conv("dec.1", c3, c2, 3, g, &mut rng);
        p.init_conv("dec.2", c2, c1, 3, g, &mut rng);
        p.init_conv("dec.3", c1, c1 / 2, 3, g, &mut rng);
        p.init_conv("dec.out", c1 / 2, 3, 3, 1.0, &mut rng);
        p.insert(SCALE_KEY, Array::from_elem(IxDyn(&[1]), 1.0));
        Self { channels, params: p }
    }

    pub fn from_params(channels: [usize; 3], params: ParamStore) -> Result<Self> {
        let reference = Self::init(channels, 0);
        for (name, value) in reference.params.iter() {
            match params.get(name) {
                Some(v) if v.shape() == value.shape() => {}
                Some(v) => {
                    return Err(Error::Shape {
                        context: "codec parameter",
                        expected: value.shape().to_vec(),
                        found: v.shape().to_vec(),
                    })
                }
                None => return Err(Error::Validation(format!("codec parameter `{name}` missing"))),
            }
        }
        Ok(Self { channels, params })
    }

    /// Multiplier applied to raw encoder outputs so latents have unit scale.
    pub fn latent_scale(&self) -> f64 {
        self.params.get(SCALE_KEY).map(|a| a[[0]]).unwrap_or(1.0)
    }

    pub(crate) fn encode_graph<'g>(p: &Params<'g>, x: Var<'g>) -> Var<'g> {
        let h = conv(p, "enc.0", x, 2, 1).silu();
        let h = conv(p, "enc.1", h, 2, 1).silu();
        let h = conv(p, "enc.2", h, 2, 1).silu();
        let h = conv3(p, "enc.3", h).silu();
        conv1(p, "enc.out", h)
    }

    pub(crate) fn decode_graph<'g>(p: &Params<'g>, z: Var<'g>) -> Var<'g> {
        let h = conv3(p, "dec.in", z).silu();
        let h = conv3(p, "dec.0", h).silu();
        let h = conv3(p, "dec.1", h.upsample2x()).silu();
        let h = conv3(p, "dec.2", h.upsample2x()).silu();
        let h = conv3(p, "dec.3", h.upsample2x()).silu();
        conv3(p, "dec.out", h)
    }

    fn check_image(image: &Image) -> Result<()> {
        let (c, h, w) = image.dim();
        if c != 3 || h != w || h == 0 || h % 8 != 0 {
            return Err(Error::Shape {
                context: "codec input image",
                expected: vec![3, 8 * (h / 8).max(1), 8 * (h / 8).max(1)],
                found: vec![c, h, w],
            });
        }
        Ok(())
    }

    /// Encode a batch of equally sized images.
    pub fn encode_batch(&self, images: &[&Image]) -> Result<Vec<LatentImage>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        for img in images {
            Self::check_image(img)?;
            if img.dim() != images[0].dim() {
                return Err(Error::validation("images in a batch must share a size"));
            }
        }
        let graph = Graph::new();
        let p = Params::new(&graph, &self.params, false);
        let x = graph.constant(stack_images(images));
        let z = Self::encode_graph(&p, x).value();
        let scale = self.latent_scale();
        Ok(unstack(&z).into_iter().map(|l| l * scale).collect())
    }

    pub fn encode(&self, image: &Image) -> Result<LatentImage> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    /// Decode latents to images clamped to `[0, 1]`.
    pub fn decode_batch(&self, latents: &[&LatentImage]) -> Result<Vec<Image>> {
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        for l in latents {
            let (c, h, w) = l.dim();
            if c != LATENT_CHANNELS || h != w || h == 0 || l.dim() != latents[0].dim() {
                return Err(Error::Shape {
                    context: "codec latent",
                    expected: vec![LATENT_CHANNELS, h, h],
                    found: vec![c, h, w],
                });
            }
            if l.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation("latent contains non-finite values"));
            }
        }
        let scale = self.latent_scale();
        let owned: Vec<LatentImage> = latents.iter().map(|l| *l / scale).collect();
        let refs: Vec<&LatentImage> = owned.iter().collect();
        let graph = Graph::new();
        let p = Params::new(&graph, &self.params, false);
        let z = graph.constant(stack_images(&refs));
        let out = Self::decode_graph(&p, z).value();
        Ok(unstack(&out)
            .into_iter()
            .map(|img| img.mapv(|v| v.clamp(0.0, 1.0)))
            .collect())
    }

    pub fn decode(&self, latent: &LatentImage) -> Result<Image> {
        Ok(self.decode_batch(&[latent])?.remove(0))
    }
}

pub(crate) fn stack_images(items: &[&Array3<f64>]) -> Array {
    let views: Vec<_> = items.iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views).unwrap().into_dyn()
}

pub(crate) fn unstack(batch: &Array) -> Vec<Array3<f64>> {
    batch
        .outer_iter()
        .map(|a| a.into_dimensionality::<ndarray::Ix3>().unwrap().to_owned())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Per-step minibatch loss.
    pub losses: Vec<f64>,
    pub latent_scale: f64,
}

fn pool_loss(codec: &ImageCodec, images: &[&Image]) -> f64 {
    let mut total = 0.0;
    for chunk in images.chunks(8) {
        let graph = Graph::new();
        let p = Params::new(&graph, &codec.params, false);
        let x = graph.constant(stack_images(chunk));
        let y = ImageCodec::decode_graph(&p, ImageCodec::encode_graph(&p, x));
        total += y.mse(x).item() * chunk.len() as f64;
    }
    total / images.len() as f64
}

/// Train the codec on `images` with a pixel MSE objective. The returned
/// codec carries a latent scale of `1 / std` of the training latents.
pub fn train_codec(images: &[&Image], cfg: &CodecConfig, seed: u64) -> Result<(ImageCodec, CodecReport)> {
    train_codec_with(images, cfg, seed, |_, _| {})
}

/// [`train_codec`] with a per-step callback `(step, loss)`.
pub fn train_codec_with(
    images: &[&Image],
    cfg: &CodecConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(ImageCodec, CodecReport)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::validation("codec training needs at least one image"));
    }
    for img in images {
        ImageCodec::check_image(img)?;
    }
    let mut codec = ImageCodec::init(cfg.channels, derive(seed, 0xC0DEC));
    let initial_loss = pool_loss(&codec, images);
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = rng_for(derive(seed, 0xC0DEC + 1), step as u64);
        let batch: Vec<&Image> = (0..cfg.batch_size)
            .map(|_| images[rng.random_range(0..images.len())])
            .collect();
        let grads = {
            let graph = Graph::new();
            let p = Params::new(&graph, &codec.params, true);
            let x = graph.constant(stack_images(&batch));
            let y = ImageCodec::decode_graph(&p, ImageCodec::encode_graph(&p, x));
            let loss = y.mse(x);
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Divergence(format!("codec loss is {value} at step {step}")));
            }
            losses.push(value);
            on_step(step, value);
            p.grads(&graph.backward(loss))
        };
        opt.step(&mut codec.params, &grads)?;
    }
    let final_loss = pool_loss(&codec, images);
    if !final_loss.is_finite() {
        return Err(Error::Divergence("codec reconstruction diverged".into()));
    }
    let raw: Vec<LatentImage> = codec.encode_batch(images)?;
    let n: usize = raw.iter().map(|l| l.len()).sum();
    let mean = raw.iter().map(|l| l.sum()).sum::<f64>() / n as f64;
    let var = raw.iter().flat_map(|l| l.iter()).map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
    codec.params.insert(SCALE_KEY, Array::from_elem(IxDyn(&[1]), scale));
    Ok((
        codec,
        CodecReport {
            initial_loss,
            final_loss,
            losses,
            latent_scale: scale,
        },
    ))
}

/// Peak signal-to-noise ratio in dB for images on `[0, 1]`.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let mse = (a - b).mapv(|v| v * v).mean().unwrap_or(0.0);
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Embedded prompt: `k` is `[N_max, d]` with padding rows masked out.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub k: Array2<f64>,
    pub mask: Vec<bool>,
    pub ids: Vec<usize>,
    pub hand_token_indices: Vec<usize>,
    /// Unmasked hand-related tokens.
    pub n_k: usize,
    /// Unmasked other tokens.
    pub n_l: usize,
}

impl TextEmbedding {
    pub fn num_tokens(&self) -> usize {
        self.n_k + self.n_l
    }
}

/// Learned token table plus a fixed sinusoidal position term.
pub struct TextEncoder<'a> {
    pub table: &'a Array,
    pub max_tokens: usize,
}

pub const TEXT_TABLE: &str = "text.embedding";

pub fn init_text_table<R: Rng>(store: &mut ParamStore, vocab_size: usize, dim: usize, rng: &mut R) {
    store.init_normal(TEXT_TABLE, &[vocab_size, dim], 1.0 / (dim as f64).sqrt(), rng);
}

impl<'a> TextEncoder<'a> {
    pub fn new(table: &'a Array, max_tokens: usize) -> Self {
        Self { table, max_tokens }
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    /// Padded id list of length `max_tokens` and its mask.
    pub fn pad(&self, prompt: &TokenizedPrompt) -> Result<(Vec<usize>, Vec<bool>)> {
        if prompt.ids.len() > self.max_tokens {
            return Err(Error::Validation(format!(
                "prompt has {} tokens, limit is {}",
                prompt.ids.len(),
                self.max_tokens
            )));
        }
        let vocab = self.table.shape()[0];
        if let Some(bad) = prompt.ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Validation(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let mut ids = prompt.ids.clone();
        let mut mask = vec![true; ids.len()];
        ids.resize(self.max_tokens, PAD_ID);
        mask.resize(self.max_tokens, false);
        Ok((ids, mask))
    }

    pub fn encode(&self, prompt: &TokenizedPrompt) -> Result<TextEmbedding> {
        let (ids, mask) = self.pad(prompt)?;
        let d = self.dim();
        let pos = sinusoidal(&(0..self.max_tokens).collect::<Vec<_>>(), d);
        let k = Array2::from_shape_fn((self.max_tokens, d), |(n, j)| self.table[[ids[n], j]] + pos[[n, j]]);
        let n_k = prompt.hand_token_indices.len();
        Ok(TextEmbedding {
            k,
            mask,
            ids,
            hand_token_indices: prompt.hand_token_indices.clone(),
            n_k,
            n_l: prompt.ids.len() - n_k,
        })
    }

    /// Batched graph version of [`TextEncoder::encode`]: `[B, N_max, d]`.
    pub(crate) fn embed_graph<'g>(table: Var<'g>, ids: &[Vec<usize>]) -> Var<'g> {
        let n = ids[0].len();
        let d = table.shape()[1];
        let flat: Vec<usize> = ids.iter().flatten().copied().collect();
        let pos = sinusoidal(&(0..n).collect::<Vec<_>>(), d);
        let tiled = Array::from_shape_fn(IxDyn(&[flat.len(), d]), |ix| pos[[ix[0] % n, ix[1]]]);
        let graph = table.graph();
        table
            .embedding(&flat)
            .add(graph.leaf_shared(Arc::new(tiled), false))
            .reshape(&[ids.len(), n, d])
    }
}

/// Encode a raw prompt with the default vocabulary.
pub fn encode_prompt(table: &Array, max_tokens: usize, prompt: &str) -> Result<TextEmbedding> {
    let tp = Vocab::default().encode(prompt, max_tokens)?;
    TextEncoder::new(table, max_tokens).encode(&tp)
}
