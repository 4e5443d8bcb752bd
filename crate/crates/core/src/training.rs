//! Two-phase optimization. The base phase fits the text-conditioned
//! denoiser with the plain noise-prediction objective; the guidance phase
//! freezes it and fits the mesh-conditioned guidance module on the
//! attention-updated latents.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Axis;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{Array, Graph, Var};
use crate::checkpoint::{load_checkpoint, save_checkpoint, section, Checkpoint};
use crate::codec::{stack_images, ImageCodec, LatentImage, TextEmbedding, TextEncoder, TEXT_TABLE};
use crate::config::Config;
use crate::data::dataset::Sample;
use crate::data::text::{TokenizedPrompt, Vocab};
use crate::diffusion::unet::{forward, Cond};
use crate::diffusion::{init_unet, q_sample, AttentionRecord, LatentPair, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imaging::{ensure_parent, Image};
use crate::optim::Adam;
use crate::params::{ParamStore, Params};
use crate::seeding::{derive, rng_for};
use crate::tas::{
    alpha_schedule, apply_update, attended_tokens, refine_attention, residual_noise_one, tas_gradient_batch,
    tas_loss,
};
use crate::vas::{build_guidance, guidance_graph, GuidancePair};

const BASE_TAG: u64 = 0xBA5E;
const GUIDE_TAG: u64 = 0x6D1DE;
const INIT_TAG: u64 = 0x1417;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub out_dir: PathBuf,
    /// Steps of denoiser pretraining before the guidance phase.
    pub base_steps: usize,
    pub base_lr: f64,
    /// Guidance-phase steps.
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub lambda_g: f64,
    pub lambda_l: f64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub resume_from: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            base_steps: 3000,
            base_lr: 1e-3,
            steps: 5000,
            lr: 1e-4,
            batch_size: 4,
            lambda_g: 1.0,
            lambda_l: 1.0,
            checkpoint_every: 1000,
            resume_from: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_g >= 0.0 && self.lambda_l >= 0.0) || self.lambda_g + self.lambda_l == 0.0 {
            return Err(Error::validation("lambda_g and lambda_l must be >= 0 and not both 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.base_lr > 0.0) {
            return Err(Error::validation("learning rates must be positive"));
        }
        Ok(())
    }
}

/// One guidance-phase log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_g: f64,
    pub l_l: f64,
    pub l_total: f64,
    /// Mean attention loss over both branches before the latent update.
    pub l_tas: f64,
}

/// One base-phase log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseLossRecord {
    pub step: usize,
    pub l_g: f64,
    pub l_l: f64,
    pub l_total: f64,
}

/// Latents, conditions and tokens of a dataset, encoded once.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub ids: Vec<String>,
    pub x0: Vec<LatentPair>,
    /// `(global, local)` condition images.
    pub mesh: Vec<(Image, Image)>,
    pub prompts: Vec<TokenizedPrompt>,
}

impl TrainingData {
    pub fn prepare(samples: &[Sample], codec: &ImageCodec, max_tokens: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::validation("training needs at least one sample"));
        }
        let vocab = Vocab::default();
        let mut x0 = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(8) {
            let imgs: Vec<&Image> = chunk.iter().flat_map(|s| [&s.rgb_global, &s.rgb_local]).collect();
            let mut lat = codec.encode_batch(&imgs)?.into_iter();
            while let (Some(g), Some(l)) = (lat.next(), lat.next()) {
                x0.push(LatentPair::new(g, l));
            }
        }
        let prompts = samples
            .iter()
            .map(|s| vocab.encode(&s.prompt, max_tokens))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            x0,
            mesh: samples
                .iter()
                .map(|s| (s.mesh_global.clone(), s.mesh_local.clone()))
                .collect(),
            prompts,
        })
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    pub fn latent_dim(&self) -> (usize, usize, usize) {
        self.x0[0].global.dim()
    }
}

/// Sampled minibatch: sample indices, one timestep per sample (shared by
/// both branches) and independent noise per branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub indices: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub eps: Vec<LatentPair>,
}

pub fn draw_batch(seed: u64, tag: u64, step: usize, data: &TrainingData, batch: usize, steps_t: usize) -> Draw {
    let mut rng = rng_for(derive(seed, tag), step as u64);
    let dim = data.latent_dim();
    let mut indices = Vec::with_capacity(batch);
    let mut timesteps = Vec::with_capacity(batch);
    let mut eps = Vec::with_capacity(batch);
    for _ in 0..batch {
        indices.push(rng.random_range(0..data.len()));
        timesteps.push(rng.random_range(0..steps_t));
        let mut noise = || LatentImage::from_shape_fn(dim, |_| StandardNormal.sample(&mut rng));
        let g = noise();
        eps.push(LatentPair::new(g, noise()));
    }
    Draw {
        indices,
        timesteps,
        eps,
    }
}

/// Global items first, then local items.
fn branch_major<'a, T>(items: &'a [T], pick: impl Fn(&'a T) -> (&'a LatentImage, &'a LatentImage)) -> Vec<&'a LatentImage> {
    let (g, l): (Vec<_>, Vec<_>) = items.iter().map(pick).unzip();
    g.into_iter().chain(l).collect()
}

fn twice<T: Clone>(v: Vec<T>) -> Vec<T> {
    let mut out = v.clone();
    out.extend(v);
    out
}

fn branch_losses<'g>(pred: Var<'g>, target: &Array, batch: usize, cfg: &TrainConfig) -> (Var<'g>, Var<'g>, Var<'g>) {
    let graph = pred.graph();
    let target = graph.constant(target.clone());
    let l_g = pred.narrow0(0, batch).mse(target.narrow0(0, batch));
    let l_l = pred.narrow0(batch, batch).mse(target.narrow0(batch, batch));
    let total = l_g.scale(cfg.lambda_g).add(l_l.scale(cfg.lambda_l));
    (l_g, l_l, total)
}

/// One base-phase update of the denoiser and token table.
pub fn base_step(
    cfg: &Config,
    data: &TrainingData,
    schedule: &NoiseSchedule,
    theta_d: &mut ParamStore,
    opt: &mut Adam,
    step: usize,
) -> Result<BaseLossRecord> {
    let b = cfg.train.batch_size;
    let draw = draw_batch(cfg.seed, BASE_TAG, step, data, b, schedule.len());
    let x0s = branch_major(&draw.indices, |&i| (&data.x0[i].global, &data.x0[i].local));
    let eps = branch_major(&draw.eps, |e| (&e.global, &e.local));
    let ts = twice(draw.timesteps.clone());
    let xt: Vec<LatentImage> = (0..2 * b)
        .map(|i| q_sample(x0s[i], ts[i], eps[i], schedule))
        .collect::<Result<_>>()?;
    let enc = TextEncoder::new(theta_d.get(TEXT_TABLE).expect("token table"), cfg.model.max_tokens);
    let mut ids = Vec::with_capacity(2 * b);
    let mut masks = Vec::with_capacity(2 * b);
    for &i in &draw.indices {
        let (id, m) = enc.pad(&data.prompts[i])?;
        ids.push(id);
        masks.push(m);
    }
    let (ids, masks) = (twice(ids), twice(masks));
    let (record, grads) = {
        let graph = Graph::new();
        let p = Params::new(&graph, theta_d, true);
        let text = TextEncoder::embed_graph(p.get(TEXT_TABLE), &ids);
        let cond = Cond {
            text,
            masks,
            timesteps: ts,
        };
        let x = graph.constant(stack_images(&xt.iter().collect::<Vec<_>>()));
        let pred = forward(&cfg.model, &p, "", x, &cond, None).eps;
        let (l_g, l_l, total) = branch_losses(pred, &stack_images(&eps), b, &cfg.train);
        let record = BaseLossRecord {
            step,
            l_g: l_g.item(),
            l_l: l_l.item(),
            l_total: total.item(),
        };
        if !record.l_total.is_finite() {
            return Err(Error::Divergence(format!("base loss is {} at step {step}", record.l_total)));
        }
        (record, p.grads(&graph.backward(total)))
    };
    opt.step(theta_d, &grads)?;
    Ok(record)
}

/// Embedded prompts of every sample under the frozen token table.
pub fn embed_prompts(theta_d: &ParamStore, data: &TrainingData, max_tokens: usize) -> Result<Vec<TextEmbedding>> {
    let enc = TextEncoder::new(theta_d.get(TEXT_TABLE).expect("token table"), max_tokens);
    data.prompts.iter().map(|p| enc.encode(p)).collect()
}

/// Everything a guidance step produced, for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub losses: LossRecord,
    pub draw: Draw,
    /// Updated noisy latents, per sample.
    pub x_hat: Vec<LatentPair>,
    /// Regression targets, per sample.
    pub eps_hat: Vec<LatentPair>,
}

/// Fixed inputs of the guidance phase.
pub struct GuidanceContext<'a> {
    pub cfg: &'a Config,
    pub data: &'a TrainingData,
    pub schedule: NoiseSchedule,
    pub text: Vec<TextEmbedding>,
    kernel: Arc<Vec<f64>>,
}

impl<'a> GuidanceContext<'a> {
    pub fn new(cfg: &'a Config, data: &'a TrainingData, theta_d: &ParamStore) -> Result<Self> {
        Ok(Self {
            cfg,
            data,
            schedule: cfg.diffusion.schedule()?,
            text: embed_prompts(theta_d, data, cfg.model.max_tokens)?,
            kernel: cfg.tas.kernel()?,
        })
    }

    fn text_batch(&self, indices: &[usize]) -> Array {
        let views: Vec<_> = indices.iter().map(|&i| self.text[i].k.view()).collect();
        let k = ndarray::stack(Axis(0), &views).unwrap().into_dyn();
        ndarray::concatenate(Axis(0), &[k.view(), k.view()]).unwrap()
    }

    /// Full guidance step: noising, attention update, guided prediction,
    /// weighted branch losses and one optimizer update of the guidance weights.
    pub fn step(&self, pair: &mut GuidancePair, opt: &mut Adam, step: usize) -> Result<StepOutcome> {
        let outcome = self.forward_backward(pair, step)?;
        opt.step(&mut pair.theta_g, &outcome.1)?;
        Ok(outcome.0)
    }

    /// Losses of the step without updating any weight.
    pub fn evaluate(&self, pair: &GuidancePair, step: usize) -> Result<StepOutcome> {
        Ok(self.forward_backward(pair, step)?.0)
    }

    fn forward_backward(
        &self,
        pair: &GuidancePair,
        step: usize,
    ) -> Result<(StepOutcome, std::collections::BTreeMap<String, Array>)> {
        let cfg = self.cfg;
        let b = cfg.train.batch_size;
        let data = self.data;
        let s = &self.schedule;
        let draw = draw_batch(cfg.seed, GUIDE_TAG, step, data, b, s.len());
        let x0s = branch_major(&draw.indices, |&i| (&data.x0[i].global, &data.x0[i].local));
        let eps = branch_major(&draw.eps, |e| (&e.global, &e.local));
        let ts = twice(draw.timesteps.clone());
        let xt: Vec<LatentImage> = (0..2 * b)
            .map(|i| q_sample(x0s[i], ts[i], eps[i], s))
            .collect::<Result<_>>()?;
        let text_k = self.text_batch(&draw.indices);
        let masks = twice(draw.indices.iter().map(|&i| self.text[i].mask.clone()).collect());
        let attended = twice(
            draw.indices
                .iter()
                .map(|&i| attended_tokens(&self.text[i], cfg.tas.token_set))
                .collect::<Vec<_>>(),
        );

        let mut tas_losses = None;
        let (x_hat, eps_hat): (Vec<LatentImage>, Vec<LatentImage>) = if cfg.tas.enabled {
            let xt_refs: Vec<&LatentImage> = xt.iter().collect();
            let g = tas_gradient_batch(
                pair.theta_d(),
                &cfg.model,
                &xt_refs,
                &text_k,
                &masks,
                &attended,
                &ts,
                &self.kernel,
            );
            let mut xh = Vec::with_capacity(2 * b);
            let mut eh = Vec::with_capacity(2 * b);
            for i in 0..2 * b {
                let alpha = alpha_schedule(ts[i], s.len(), &cfg.tas)?;
                let u = apply_update(&xt[i], &g.grads[i], alpha, cfg.tas.max_grad_norm)?;
                eh.push(residual_noise_one(x0s[i], &u, ts[i], s)?);
                xh.push(u);
            }
            tas_losses = Some(g.losses);
            (xh, eh)
        } else {
            (xt.clone(), eps.iter().map(|e| (*e).clone()).collect())
        };

        let graph = Graph::new();
        let pd = Params::new(&graph, pair.theta_d(), false);
        let pg = Params::new(&graph, &pair.theta_g, true);
        let cond = Cond {
            text: graph.leaf_shared(Arc::new(text_k), false),
            masks,
            timesteps: ts.clone(),
        };
        let x = graph.constant(stack_images(&x_hat.iter().collect::<Vec<_>>()));
        let mesh_imgs: Vec<&Image> = branch_major(&draw.indices, |&i| (&data.mesh[i].0, &data.mesh[i].1));
        let mesh = graph.constant(stack_images(&mesh_imgs));
        let base = forward(&cfg.model, &pd, "", x, &cond, None);
        let y_g = guidance_graph(&cfg.model, &pg, x, mesh, &cond);
        let pred = base.eps.add(y_g);
        let (l_g, l_l, total) = branch_losses(pred, &stack_images(&eps_hat.iter().collect::<Vec<_>>()), b, &cfg.train);

        let l_tas = match tas_losses {
            Some(l) => l.iter().sum::<f64>() / l.len() as f64,
            None => {
                let logits = base.logits.value();
                let mut acc = 0.0;
                let mut n = 0usize;
                for (i, idx) in attended.iter().enumerate() {
                    if idx.is_empty() {
                        continue;
                    }
                    let rec = AttentionRecord::from_logits(&logits, i, base.attn_hw, "", ts[i]);
                    acc += tas_loss(&refine_attention(&rec, idx, &cfg.tas)?);
                    n += 1;
                }
                if n == 0 {
                    0.0
                } else {
                    acc / n as f64
                }
            }
        };
        let losses = LossRecord {
            step,
            l_g: l_g.item(),
            l_l: l_l.item(),
            l_total: total.item(),
            l_tas,
        };
        if !losses.l_total.is_finite() {
            return Err(Error::Divergence(format!("guidance loss is {} at step {step}", losses.l_total)));
        }
        let grads = pg.grads(&graph.backward(total));
        let pairs = |v: Vec<LatentImage>| -> Vec<LatentPair> {
            let mut it = v.into_iter();
            let g: Vec<LatentImage> = it.by_ref().take(b).collect();
            g.into_iter().zip(it).map(|(g, l)| LatentPair::new(g, l)).collect()
        };
        Ok((
            StepOutcome {
                losses,
                draw,
                x_hat: pairs(x_hat),
                eps_hat: pairs(eps_hat),
            },
            grads,
        ))
    }
}

/// Trained model plus optimizer state and logs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: Config,
    pub codec: ImageCodec,
    pub pair: GuidancePair,
    pub opt: Adam,
    /// Completed guidance steps.
    pub step: usize,
    pub history: Vec<LossRecord>,
    pub base_history: Vec<BaseLossRecord>,
}

/// Fresh denoiser weights for `cfg`.
pub fn init_denoiser(cfg: &Config) -> ParamStore {
    init_unet(&cfg.model, Vocab::default().len(), &mut rng_for(derive(cfg.seed, INIT_TAG), 0))
}

/// Run the base phase from fresh weights.
pub fn train_base(
    cfg: &Config,
    data: &TrainingData,
    mut on_step: impl FnMut(&BaseLossRecord),
) -> Result<(ParamStore, Vec<BaseLossRecord>)> {
    let schedule = cfg.diffusion.schedule()?;
    let mut theta_d = init_denoiser(cfg);
    let mut opt = Adam::new(cfg.train.base_lr);
    let mut history = Vec::with_capacity(cfg.train.base_steps);
    for step in 0..cfg.train.base_steps {
        let r = base_step(cfg, data, &schedule, &mut theta_d, &mut opt, step)?;
        on_step(&r);
        history.push(r);
    }
    Ok((theta_d, history))
}

impl ModelState {
    /// Guidance phase starting point on top of a trained denoiser.
    pub fn new(config: Config, codec: ImageCodec, theta_d: ParamStore, base_history: Vec<BaseLossRecord>) -> Self {
        let pair = build_guidance(theta_d, &config.model, derive(config.seed, INIT_TAG + 1));
        let opt = Adam::new(config.train.lr);
        Self {
            config,
            codec,
            pair,
            opt,
            step: 0,
            history: Vec::new(),
            base_history,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut t = ParamStore::new();
        t.extend_prefixed("codec.", &self.codec.params);
        t.extend_prefixed("theta_d.", self.pair.theta_d());
        t.extend_prefixed("theta_g.", &self.pair.theta_g);
        t.extend_prefixed("adam.m.", &self.opt.first_moment);
        t.extend_prefixed("adam.v.", &self.opt.second_moment);
        let metadata = json!({
            "kind": "model",
            "config": serde_json::to_value(self.config.portable()).expect("config serializes"),
            "config_hash": self.config.fingerprint(),
            "step": self.step,
            "theta_d_checksum": self.pair.theta_d_checksum(),
            "adam": {
                "lr": self.opt.lr, "beta1": self.opt.beta1, "beta2": self.opt.beta2,
                "eps": self.opt.eps, "step": self.opt.step,
            },
            "history": self.history,
            "base_history": self.base_history,
        });
        Checkpoint { metadata, tensors: t }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: origin.to_path_buf(),
            reason,
        };
        let m = &ckpt.metadata;
        if m["kind"] != "model" {
            return Err(bad(format!("expected a model checkpoint, found kind {}", m["kind"])));
        }
        let config: Config = serde_json::from_value(m["config"].clone())?;
        let stored = m["config_hash"].as_str().unwrap_or_default().to_string();
        if stored != config.fingerprint() {
            return Err(Error::ConfigHash {
                expected: config.fingerprint(),
                found: stored,
            });
        }
        let codec = ImageCodec::from_params(config.codec.channels, section(ckpt, "codec."))?;
        let pair = GuidancePair::from_parts(section(ckpt, "theta_d."), section(ckpt, "theta_g."));
        if m["theta_d_checksum"].as_str() != Some(pair.theta_d_checksum()) {
            return Err(bad("frozen denoiser checksum does not match its weights".into()));
        }
        let a = &m["adam"];
        let num = |v: &serde_json::Value| v.as_f64().ok_or_else(|| bad("bad optimizer metadata".into()));
        let opt = Adam {
            lr: num(&a["lr"])?,
            beta1: num(&a["beta1"])?,
            beta2: num(&a["beta2"])?,
            eps: num(&a["eps"])?,
            step: a["step"].as_u64().ok_or_else(|| bad("bad optimizer step".into()))?,
            first_moment: section(ckpt, "adam.m."),
            second_moment: section(ckpt, "adam.v."),
        };
        Ok(Self {
            config,
            codec,
            pair,
            opt,
            step: m["step"].as_u64().ok_or_else(|| bad("missing step".into()))? as usize,
            history: serde_json::from_value(m["history"].clone())?,
            base_history: serde_json::from_value(m["base_history"].clone())?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?, path)
    }

    /// Load and require the stored fingerprint to match `expected`.
    pub fn load_matching(path: &Path, expected: &Config) -> Result<Self> {
        let state = Self::load(path)?;
        let (want, found) = (expected.fingerprint(), state.config.fingerprint());
        if want != found {
            return Err(Error::ConfigHash { expected: want, found });
        }
        Ok(state)
    }
}

pub fn save_codec(path: &Path, codec: &ImageCodec, cfg: &Config, report: &crate::codec::CodecReport) -> Result<()> {
    let mut t = ParamStore::new();
    t.extend_prefixed("codec.", &codec.params);
    let metadata = json!({
        "kind": "codec",
        "config_hash": cfg.fingerprint(),
        "channels": codec.channels,
        "step": report.losses.len(),
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "latent_scale": report.latent_scale,
    });
    save_checkpoint(path, &Checkpoint { metadata, tensors: t })
}

pub fn load_codec(path: &Path) -> Result<ImageCodec> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.metadata["kind"] != "codec" {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: "expected a codec checkpoint".into(),
        });
    }
    let channels: [usize; 3] = serde_json::from_value(ckpt.metadata["channels"].clone())?;
    ImageCodec::from_params(channels, section(&ckpt, "codec."))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("step,l_g,l_l,l_total,l_tas\n");
    for r in history {
        s.push_str(&format!("{},{},{},{},{}\n", r.step, r.l_g, r.l_l, r.l_total, r.l_tas));
    }
    s
}

pub fn base_loss_csv(history: &[BaseLossRecord]) -> String {
    let mut s = String::from("step,l_g,l_l,l_total\n");
    for r in history {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.l_g, r.l_l, r.l_total));
    }
    s
}

pub fn checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join(format!("step_{step:06}.ckpt"))
}

/// Continue the guidance phase up to `cfg.train.steps`, writing periodic
/// checkpoints, `loss.csv` and `final.ckpt` to `out_dir`.
pub fn train_guidance(
    state: &mut ModelState,
    data: &TrainingData,
    out_dir: &Path,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<()> {
    let cfg = state.config.clone();
    let ctx = GuidanceContext::new(&cfg, data, state.pair.theta_d())?;
    let every = cfg.train.checkpoint_every;
    while state.step < cfg.train.steps {
        let out = ctx.step(&mut state.pair, &mut state.opt, state.step)?;
        on_step(&out.losses);
        state.history.push(out.losses);
        state.step += 1;
        if every > 0 && state.step % every == 0 {
            state.save(&checkpoint_path(out_dir, state.step))?;
            write_text(&out_dir.join("loss.csv"), &loss_csv(&state.history))?;
        }
    }
    state.pair.verify_frozen()?;
    write_text(&out_dir.join("loss.csv"), &loss_csv(&state.history))?;
    state.save(&out_dir.join("final.ckpt"))
}

/// Whole pipeline after codec training: base phase (or resume), then the
/// guidance phase. `samples` must be the dataset the config points at.
pub fn train(
    cfg: &Config,
    samples: &[Sample],
    codec: ImageCodec,
    mut log: impl FnMut(&str),
) -> Result<ModelState> {
    cfg.validate()?;
    let out_dir = cfg.train.out_dir.clone();
    let data = TrainingData::prepare(samples, &codec, cfg.model.max_tokens)?;
    let mut state = match &cfg.train.resume_from {
        Some(path) => {
            let mut s = ModelState::load_matching(path, cfg)?;
            if s.codec != codec {
                return Err(Error::validation("resumed checkpoint was trained with a different codec"));
            }
            s.history.truncate(s.step);
            s.config = cfg.clone();
            log(&format!("resumed from {} at step {}", path.display(), s.step));
            s
        }
        None => {
            let (theta_d, base_history) = train_base(cfg, &data, |r| {
                if r.step % 500 == 0 {
                    log(&format!("base step {} loss {:.5}", r.step, r.l_total));
                }
            })?;
            write_text(&out_dir.join("base_loss.csv"), &base_loss_csv(&base_history))?;
            ModelState::new(cfg.clone(), codec, theta_d, base_history)
        }
    };
    train_guidance(&mut state, &data, &out_dir, |r| {
        if r.step % 500 == 0 {
            log(&format!(
                "step {} loss {:.5} (global {:.5}, local {:.5}, attention {:.4})",
                r.step, r.l_total, r.l_g, r.l_l, r.l_tas
            ));
        }
    })?;
    Ok(state)
}

/// Centered moving average of `window` points, truncated at the ends.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}
