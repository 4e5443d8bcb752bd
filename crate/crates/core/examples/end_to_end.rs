//! Short training run on four samples followed by generation and scoring.
//!
//! cargo run --example end_to_end -- [out_dir]

use std::path::PathBuf;

use handgen::codec::train_codec;
use handgen::config::Config;
use handgen::data::{generate_dataset, load_dataset};
use handgen::eval::{eval_run, EvalOptions};
use handgen::imaging::{save_png, Image};
use handgen::sampling::{generate, GenerateOptions};
use handgen::training::train;

fn main() -> handgen::error::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("example_run"));
    let mut cfg = Config::default();
    cfg.data.dir = out.join("data");
    cfg.train.out_dir = out.join("model");
    cfg.codec.steps = 300;
    cfg.train.base_steps = 200;
    cfg.train.steps = 100;
    cfg.train.checkpoint_every = 0;

    generate_dataset(4, 11, cfg.data.image_size, &cfg.data.dir)?;
    let samples = load_dataset(&cfg.data.dir, cfg.data.crop_margin)?;
    let images: Vec<&Image> = samples.iter().flat_map(|s| [&s.rgb_global, &s.rgb_local]).collect();
    let (codec, report) = train_codec(&images, &cfg.codec, cfg.seed)?;
    println!("codec mse {:.5} -> {:.5}", report.initial_loss, report.final_loss);

    let model = train(&cfg, &samples, codec, |line| println!("{line}"))?;
    let s = &samples[0];
    let opts = GenerateOptions { steps: 25, seed: 5, tas: false, guidance: true };
    let g = generate(&model, &s.mesh_global, &s.bbox, &s.prompt, &opts)?;
    save_png(&out.join("generated.png"), &g.image)?;

    let r = eval_run(&model, &samples, &EvalOptions { n: 4, seed: 5, steps: 25, tas: false })?;
    println!("silhouette IoU mean {:.3} median {:.3}", r.mean_iou, r.median_iou);
    Ok(())
}
