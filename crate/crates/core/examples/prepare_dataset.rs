//! Render a few synthetic samples and print their prompts and hand boxes.
//!
//! cargo run --example prepare_dataset -- [out_dir]

use std::path::PathBuf;

use handgen::data::{generate_dataset, load_dataset};

fn main() -> handgen::error::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("example_data"));
    let records = generate_dataset(4, 7, 64, &out)?;
    for r in &records {
        println!(
            "{} [{:?}] bbox ({:.1}, {:.1}, {:.1}, {:.1}) \"{}\"",
            r.id, r.hand_type, r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h, r.prompt
        );
    }
    let samples = load_dataset(&out, 0.15)?;
    println!("reloaded {} samples; local crops are {:?}", samples.len(), samples[0].rgb_local.shape());
    Ok(())
}
