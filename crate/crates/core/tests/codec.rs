use handgen::codec::{psnr, train_codec, CodecConfig};
use handgen::data::dataset::{synthesize_sample, Sample};
use handgen::imaging::Image;

fn images(seed: u64, n: usize) -> Vec<Image> {
    (0..n)
        .flat_map(|i| {
            let g = synthesize_sample(seed, i, 64).unwrap();
            let s = Sample::from_parts(g.record, g.rgb, g.mesh, 0.15).unwrap();
            [s.rgb_global, s.rgb_local]
        })
        .collect()
}

#[test]
fn trained_codec_reconstructs_held_out_images() {
    let train = images(7, 16);
    let held_out = images(99, 8);
    let (codec, report) = train_codec(&train.iter().collect::<Vec<_>>(), &CodecConfig::default(), 1).unwrap();
    assert!(report.final_loss < report.initial_loss);
    let scores: Vec<f64> = held_out.iter().map(|img| psnr(img, &codec.decode(&codec.encode(img).unwrap()).unwrap())).collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    assert!(mean >= 25.0, "held-out PSNR {mean:.2} dB");
}
