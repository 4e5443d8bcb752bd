#![allow(dead_code)]

use handgen::codec::ImageCodec;
use handgen::config::Config;
use handgen::data::dataset::{synthesize_sample, Sample};
use handgen::training::{init_denoiser, GuidanceContext, ModelState, TrainingData};

pub fn samples(seed: u64, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let g = synthesize_sample(seed, i, 64).unwrap();
            Sample::from_parts(g.record, g.rgb, g.mesh, 0.15).unwrap()
        })
        .collect()
}

pub fn small_config(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.seed = seed;
    cfg.train.base_steps = 10;
    cfg.train.steps = 10;
    cfg.train.checkpoint_every = 0;
    cfg
}

/// Untrained codec and denoiser plus `steps` guidance updates, so the
/// guidance feature is no longer zero.
pub fn model(cfg: &Config, samples: &[Sample], steps: usize) -> (ModelState, TrainingData) {
    let codec = ImageCodec::init(cfg.codec.channels, cfg.seed);
    let data = TrainingData::prepare(samples, &codec, cfg.model.max_tokens).unwrap();
    let mut state = ModelState::new(cfg.clone(), codec, init_denoiser(cfg), Vec::new());
    {
        let ctx = GuidanceContext::new(cfg, &data, state.pair.theta_d()).unwrap();
        for step in 0..steps {
            ctx.step(&mut state.pair, &mut state.opt, step).unwrap();
            state.step += 1;
        }
    }
    (state, data)
}
