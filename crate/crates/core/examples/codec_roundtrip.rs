//! Fit a small autoencoder on synthetic images and report reconstruction PSNR.
//!
//! cargo run --example codec_roundtrip -- [steps]

use handgen::codec::{psnr, train_codec_with, CodecConfig};
use handgen::data::dataset::{synthesize_sample, Sample};
use handgen::imaging::Image;

fn main() -> handgen::error::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let samples = (0..8)
        .map(|i| {
            let g = synthesize_sample(7, i, 64)?;
            Sample::from_parts(g.record, g.rgb, g.mesh, 0.15)
        })
        .collect::<handgen::error::Result<Vec<_>>>()?;
    let images: Vec<&Image> = samples.iter().flat_map(|s| [&s.rgb_global, &s.rgb_local]).collect();
    let cfg = CodecConfig { steps, ..Default::default() };
    let (codec, report) = train_codec_with(&images, &cfg, 1, |step, loss| {
        if step % 100 == 0 {
            println!("step {step:5} mse {loss:.5}");
        }
    })?;
    let scores: Vec<f64> = images
        .iter()
        .map(|img| codec.decode(&codec.encode(img)?).map(|r| psnr(img, &r)))
        .collect::<handgen::error::Result<_>>()?;
    println!(
        "mse {:.5} -> {:.5}, latent scale {:.3}, mean PSNR {:.2} dB",
        report.initial_loss,
        report.final_loss,
        report.latent_scale,
        scores.iter().sum::<f64>() / scores.len() as f64
    );
    Ok(())
}
