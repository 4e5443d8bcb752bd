//! Build the guidance copy of a denoiser and check that it starts as a no-op.

use handgen::codec::{encode_prompt, TEXT_TABLE};
use handgen::data::dataset::{synthesize_sample, Sample};
use handgen::data::Vocab;
use handgen::diffusion::{init_unet, unet_forward, LatentPair, ModelConfig};
use handgen::seeding::rng_for;
use handgen::vas::{build_guidance, diffusion_forward, guidance_forward};
use ndarray::Array3;
use rand_distr::{Distribution, StandardNormal};

fn main() -> handgen::error::Result<()> {
    let cfg = ModelConfig::default();
    let mut rng = rng_for(2, 0);
    let theta_d = init_unet(&cfg, Vocab::default().len(), &mut rng);
    let g = synthesize_sample(3, 0, 64)?;
    let sample = Sample::from_parts(g.record, g.rgb, g.mesh, 0.15)?;
    let text = encode_prompt(theta_d.get(TEXT_TABLE).unwrap(), cfg.max_tokens, &sample.prompt)?;
    let pair = build_guidance(theta_d, &cfg, 2);
    println!(
        "denoiser {} scalars, guidance module {} scalars",
        pair.theta_d().num_scalars(),
        pair.theta_g.num_scalars()
    );
    let mut noise = || Array3::from_shape_fn((4, 8, 8), |_| StandardNormal.sample(&mut rng));
    let x = LatentPair::new(noise(), noise());
    let t = 30;
    let y_g = guidance_forward(&pair, &cfg, &x, (&sample.mesh_global, &sample.mesh_local), &text, t)?;
    let y_d = diffusion_forward(&pair, &cfg, &x, &text, t, &y_g)?;
    let base = unet_forward(pair.theta_d(), &cfg, &x.global, &text, t, false)?;
    let gap = (&y_d.global - &base.eps_pred).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    println!("max |guidance feature| {:.2e}", y_g.global.mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b)));
    println!("guided vs plain prediction, max difference {gap:.2e}");
    Ok(())
}
