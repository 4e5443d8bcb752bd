mod common;

use handgen::eval::{eval_run, EvalOptions};
use handgen::sampling::{attention_at, generate, GenerateOptions};
use handgen::vas::GuidancePair;

fn opts(seed: u64, tas: bool, guidance: bool) -> GenerateOptions {
    GenerateOptions {
        steps: 10,
        seed,
        tas,
        guidance,
    }
}

#[test]
fn generation_is_deterministic_and_image_shaped() {
    let samples = common::samples(31, 2);
    let cfg = common::small_config(31);
    let (model, _) = common::model(&cfg, &samples, 3);
    let s = &samples[0];
    for tas in [false, true] {
        let a = generate(&model, &s.mesh_global, &s.bbox, &s.prompt, &opts(5, tas, true)).unwrap();
        let b = generate(&model, &s.mesh_global, &s.bbox, &s.prompt, &opts(5, tas, true)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.image.dim(), (3, 64, 64));
        assert!(a.image.iter().all(|v| (0.0..=1.0).contains(v)));
        let c = generate(&model, &s.mesh_global, &s.bbox, &s.prompt, &opts(6, tas, true)).unwrap();
        assert_ne!(a.image, c.image);
    }
}

#[test]
fn zero_guidance_reproduces_the_base_model() {
    let samples = common::samples(32, 2);
    let cfg = common::small_config(32);
    let (trained, _) = common::model(&cfg, &samples, 4);
    let mut zeroed = trained.clone();
    zeroed.pair = GuidancePair::from_parts(
        trained.pair.theta_d().clone(),
        handgen::vas::build_guidance(trained.pair.theta_d().clone(), &cfg.model, 0).theta_g,
    );
    let s = &samples[1];
    let off = generate(&trained, &s.mesh_global, &s.bbox, &s.prompt, &opts(2, false, false)).unwrap();
    let zero = generate(&zeroed, &s.mesh_global, &s.bbox, &s.prompt, &opts(2, false, true)).unwrap();
    let guided = generate(&trained, &s.mesh_global, &s.bbox, &s.prompt, &opts(2, false, true)).unwrap();
    assert_eq!(off.latent, zero.latent);
    assert_ne!(off.latent, guided.latent);
}

#[test]
fn sampling_leaves_weights_alone_and_checks_inputs() {
    let samples = common::samples(33, 1);
    let cfg = common::small_config(33);
    let (model, _) = common::model(&cfg, &samples, 2);
    let before = model.clone();
    let s = &samples[0];
    generate(&model, &s.mesh_global, &s.bbox, &s.prompt, &opts(1, true, true)).unwrap();
    assert_eq!(model, before);
    model.pair.verify_frozen().unwrap();

    let mut too_many = opts(1, false, true);
    too_many.steps = cfg.diffusion.timesteps + 1;
    assert!(generate(&model, &s.mesh_global, &s.bbox, &s.prompt, &too_many).unwrap_err().is_validation());
    let small = ndarray::Array3::zeros((3, 32, 32));
    assert!(generate(&model, &small, &s.bbox, &s.prompt, &opts(1, false, true)).is_err());
    assert!(generate(&model, &s.mesh_global, &s.bbox, " ", &opts(1, false, true)).is_err());
}

#[test]
fn attention_capture_at_a_visited_step() {
    let samples = common::samples(34, 1);
    let cfg = common::small_config(34);
    let (model, _) = common::model(&cfg, &samples, 1);
    let s = &samples[0];
    let (rec, text) = attention_at(&model, &s.mesh_global, &s.bbox, &s.prompt, 50, &opts(1, false, true)).unwrap();
    assert_eq!(rec.timestep, 49);
    assert_eq!(rec.a.dim(), (4, 4, cfg.model.max_tokens));
    assert_eq!(text.mask.iter().filter(|m| **m).count(), text.num_tokens());
    assert!(attention_at(&model, &s.mesh_global, &s.bbox, &s.prompt, 55, &opts(1, false, true)).is_err());
    assert!(attention_at(&model, &s.mesh_global, &s.bbox, &s.prompt, 0, &opts(1, false, true)).is_err());
}

#[test]
fn reports_are_reproducible_and_consistent() {
    let samples = common::samples(35, 3);
    let cfg = common::small_config(35);
    let (model, _) = common::model(&cfg, &samples, 2);
    let o = EvalOptions {
        n: 3,
        seed: 4,
        steps: 5,
        tas: false,
    };
    let a = eval_run(&model, &samples, &o).unwrap();
    let b = eval_run(&model, &samples, &o).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.per_sample.len(), 3);
    let mean = a.per_sample.iter().map(|s| s.iou).sum::<f64>() / 3.0;
    assert_eq!(a.mean_iou, mean);
    assert_eq!(a.config_hash, cfg.fingerprint());
    assert!(a.per_sample.iter().all(|s| (0.0..=1.0).contains(&s.iou)));
    let json: serde_json::Value = serde_json::from_str(&a.to_json()).unwrap();
    assert_eq!(json["schema_version"], 1);
    assert!(eval_run(&model, &samples, &EvalOptions { n: 4, ..o }).unwrap_err().is_validation());
}
