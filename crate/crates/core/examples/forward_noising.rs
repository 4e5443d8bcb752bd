//! Noise a latent along the schedule and run the denoiser with attention capture.

use handgen::codec::{encode_prompt, TEXT_TABLE};
use handgen::data::Vocab;
use handgen::diffusion::{init_unet, q_sample, unet_forward, DiffusionConfig, ModelConfig};
use handgen::seeding::rng_for;
use ndarray::Array3;
use rand_distr::{Distribution, StandardNormal};

fn main() -> handgen::error::Result<()> {
    let schedule = DiffusionConfig::default().schedule()?;
    let mut rng = rng_for(0, 0);
    let x0 = Array3::from_shape_fn((4, 8, 8), |_| StandardNormal.sample(&mut rng));
    let eps = Array3::from_shape_fn((4, 8, 8), |_| StandardNormal.sample(&mut rng));
    for t in [0, 24, 49, 99] {
        let xt = q_sample(&x0, t, &eps, &schedule)?;
        let corr = (&xt * &x0).sum() / (xt.mapv(|v| v * v).sum() * x0.mapv(|v| v * v).sum()).sqrt();
        println!("t {t:3} alpha_bar {:.4} corr(x_t, x_0) {corr:.3}", schedule.alpha_bar[t]);
    }
    let cfg = ModelConfig::default();
    let store = init_unet(&cfg, Vocab::default().len(), &mut rng);
    let text = encode_prompt(store.get(TEXT_TABLE).unwrap(), cfg.max_tokens, "a hand grasping a cup")?;
    let out = unet_forward(&store, &cfg, &q_sample(&x0, 50, &eps, &schedule)?, &text, 50, true)?;
    let rec = &out.attention[0];
    println!("attention from {} has shape {:?}", rec.layer_id, rec.a.shape());
    Ok(())
}
