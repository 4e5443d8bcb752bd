mod common;

use handgen::codec::encode_prompt;
use handgen::codec::TEXT_TABLE;
use handgen::diffusion::unet_forward;
use handgen::error::Error;
use handgen::training::{train, GuidanceContext, ModelState};

fn mse(a: &ndarray::Array3<f64>, b: &ndarray::Array3<f64>) -> f64 {
    (a - b).mapv(|v| v * v).mean().unwrap()
}

#[test]
fn first_step_loss_equals_frozen_denoiser_loss() {
    let samples = common::samples(21, 4);
    let cfg = common::small_config(21);
    let (state, data) = common::model(&cfg, &samples, 0);
    let ctx = GuidanceContext::new(&cfg, &data, state.pair.theta_d()).unwrap();
    let out = ctx.evaluate(&state.pair, 0).unwrap();
    let b = cfg.train.batch_size;
    let table = state.pair.theta_d().get(TEXT_TABLE).unwrap();
    let (mut l_g, mut l_l) = (0.0, 0.0);
    for i in 0..b {
        let idx = out.draw.indices[i];
        let t = out.draw.timesteps[i];
        let text = encode_prompt(table, cfg.model.max_tokens, &samples[idx].prompt).unwrap();
        for (branch, acc) in [(0, &mut l_g), (1, &mut l_l)] {
            let x = out.x_hat[i].iter().nth(branch).unwrap();
            let target = out.eps_hat[i].iter().nth(branch).unwrap();
            let pred = unet_forward(state.pair.theta_d(), &cfg.model, x, &text, t, false).unwrap();
            *acc += mse(&pred.eps_pred, target) / b as f64;
        }
    }
    assert!((out.losses.l_g - l_g).abs() < 1e-6, "{} vs {l_g}", out.losses.l_g);
    assert!((out.losses.l_l - l_l).abs() < 1e-6, "{} vs {l_l}", out.losses.l_l);
    assert!((out.losses.l_total - (l_g + l_l)).abs() < 1e-6);
}

#[test]
fn loss_weights_decompose_the_total() {
    let samples = common::samples(22, 3);
    let mut cfg = common::small_config(22);
    cfg.train.lambda_g = 1.0;
    cfg.train.lambda_l = 0.0;
    let (state, data) = common::model(&cfg, &samples, 0);
    let ctx = GuidanceContext::new(&cfg, &data, state.pair.theta_d()).unwrap();
    let r = ctx.evaluate(&state.pair, 3).unwrap().losses;
    assert_eq!(r.l_total, r.l_g);

    cfg.train.lambda_g = 0.7;
    cfg.train.lambda_l = 1.3;
    let ctx = GuidanceContext::new(&cfg, &data, state.pair.theta_d()).unwrap();
    let r = ctx.evaluate(&state.pair, 3).unwrap().losses;
    assert!((r.l_total - (0.7 * r.l_g + 1.3 * r.l_l)).abs() < 1e-12);
}

#[test]
fn disabled_attention_stage_keeps_the_sampled_noise() {
    let samples = common::samples(23, 3);
    let mut cfg = common::small_config(23);
    cfg.tas.enabled = false;
    let (state, data) = common::model(&cfg, &samples, 0);
    let ctx = GuidanceContext::new(&cfg, &data, state.pair.theta_d()).unwrap();
    let out = ctx.evaluate(&state.pair, 0).unwrap();
    assert_eq!(out.eps_hat, out.draw.eps);
    cfg.tas.enabled = true;
    let ctx = GuidanceContext::new(&cfg, &data, state.pair.theta_d()).unwrap();
    let with = ctx.evaluate(&state.pair, 0).unwrap();
    assert_eq!(with.draw, out.draw);
    assert_ne!(with.eps_hat, out.eps_hat);
}

#[test]
fn updates_touch_only_guidance_weights() {
    let samples = common::samples(24, 3);
    let cfg = common::small_config(24);
    let (fresh, _) = common::model(&cfg, &samples, 0);
    let (trained, _) = common::model(&cfg, &samples, 5);
    assert_eq!(fresh.pair.theta_d(), trained.pair.theta_d());
    assert_eq!(fresh.codec, trained.codec);
    trained.pair.verify_frozen().unwrap();
    let moved: Vec<_> = trained
        .pair
        .theta_g
        .iter()
        .filter(|(n, a)| fresh.pair.theta_g.get(n.as_str()).map(|b| b.as_ref() != a.as_ref()).unwrap_or(true))
        .map(|(n, _)| n.clone())
        .collect();
    assert!(moved.iter().any(|n| n.starts_with("zc.")));
    assert!(moved.iter().any(|n| n.starts_with("cond.")));
}

#[test]
fn identical_runs_log_identical_numbers() {
    let samples = common::samples(25, 4);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::small_config(25);
    cfg.train.out_dir = dir.path().join("run");
    let codec = handgen::codec::ImageCodec::init(cfg.codec.channels, 1);
    let names = ["loss.csv", "base_loss.csv", "final.ckpt"];
    let read = || names.map(|f| std::fs::read(dir.path().join("run").join(f)).unwrap());
    let a = train(&cfg, &samples, codec.clone(), |_| {}).unwrap();
    let first = read();
    let b = train(&cfg, &samples, codec, |_| {}).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.base_history, b.base_history);
    assert!(first == read());
    let csv = std::fs::read_to_string(dir.path().join("run").join("loss.csv")).unwrap();
    assert!(csv.starts_with("step,l_g,l_l,l_total,l_tas\n"));
    assert_eq!(csv.lines().count(), 1 + cfg.train.steps);
}

#[test]
fn mismatched_config_is_rejected_on_load() {
    let samples = common::samples(26, 2);
    let cfg = common::small_config(26);
    let (state, _) = common::model(&cfg, &samples, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    state.save(&path).unwrap();
    let mut other = cfg.clone();
    other.train.lr *= 2.0;
    assert!(matches!(ModelState::load_matching(&path, &other), Err(Error::ConfigHash { .. })));
    let loaded = ModelState::load_matching(&path, &cfg).unwrap();
    assert_eq!(loaded, state);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[8] = 9;
    std::fs::write(&path, bytes).unwrap();
    let err = ModelState::load(&path).unwrap_err();
    assert!(matches!(err, Error::CheckpointVersion { expected: 1, found: 9 }), "{err}");
}

#[test]
fn unwritable_output_directory_fails() {
    let samples = common::samples(27, 2);
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let mut cfg = common::small_config(27);
    cfg.train.out_dir = blocker.join("sub");
    let codec = handgen::codec::ImageCodec::init(cfg.codec.channels, 1);
    assert!(train(&cfg, &samples, codec, |_| {}).is_err());
}

#[test]
fn checkpoints_are_location_independent_and_resave_identically() {
    let samples = common::samples(28, 3);
    let cfg = common::small_config(28);
    let (state, _) = common::model(&cfg, &samples, 3);
    let dir = tempfile::tempdir().unwrap();
    let mut moved = state.clone();
    moved.config.train.out_dir = dir.path().join("elsewhere");
    moved.config.data.dir = dir.path().join("data");
    let (a, b, c) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"), dir.path().join("c.ckpt"));
    state.save(&a).unwrap();
    moved.save(&b).unwrap();
    ModelState::load(&a).unwrap().save(&c).unwrap();
    let bytes = std::fs::read(&a).unwrap();
    assert!(bytes == std::fs::read(&b).unwrap());
    assert!(bytes == std::fs::read(&c).unwrap());
}
