//! Refine a denoiser attention map, score it, and take one latent update.

use handgen::codec::{encode_prompt, TEXT_TABLE};
use handgen::data::Vocab;
use handgen::diffusion::{init_unet, unet_forward, LatentPair, ModelConfig};
use handgen::seeding::rng_for;
use handgen::tas::{alpha_schedule, attended_tokens, refine_attention, tas_loss, update_latents_with_alpha, TasConfig};
use ndarray::Array3;
use rand_distr::{Distribution, StandardNormal};

fn main() -> handgen::error::Result<()> {
    let cfg = ModelConfig::default();
    let tas = TasConfig::default();
    let mut rng = rng_for(1, 0);
    let store = init_unet(&cfg, Vocab::default().len(), &mut rng);
    let prompt = "a left hand holding a green bottle";
    let text = encode_prompt(store.get(TEXT_TABLE).unwrap(), cfg.max_tokens, prompt)?;
    let mut noise = || Array3::from_shape_fn((4, 8, 8), |_| StandardNormal.sample(&mut rng));
    let x = LatentPair::new(noise(), noise());
    let t = 60;

    let out = unet_forward(&store, &cfg, &x.global, &text, t, true)?;
    let idx = attended_tokens(&text, tas.token_set);
    let refined = refine_attention(&out.attention[0], &idx, &tas)?;
    let words = handgen::data::tokenize(prompt);
    println!("hand tokens {:?}", idx.iter().map(|&i| &words[i]).collect::<Vec<_>>());
    println!("spatial maxima {:?}", refined.s.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>());
    println!("attention loss {:.4}", tas_loss(&refined));

    let alpha = alpha_schedule(t, 100, &tas)?;
    let (updated, before) = update_latents_with_alpha(&store, &cfg, &x, &text, t, alpha, &tas)?;
    let after = unet_forward(&store, &cfg, &updated.global, &text, t, true)?;
    let after = tas_loss(&refine_attention(&after.attention[0], &idx, &tas)?);
    println!("alpha {alpha:.2}: mean loss over both branches {before:.4}, global branch after update {after:.4}");
    Ok(())
}
