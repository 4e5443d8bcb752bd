//! Show which prompt tokens are treated as hand-related.
//!
//! cargo run --example tag_prompts -- "a left hand gripping a mug"

use handgen::data::{tag_hand_tokens, tokenize};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let prompts = if args.is_empty() {
        vec![
            "a right hand holding a red cup".to_string(),
            "fingers wrapped around a bottle".to_string(),
            "a photo of a wooden table".to_string(),
        ]
    } else {
        args
    };
    for p in prompts {
        let tokens = tokenize(&p);
        let tagged = tag_hand_tokens(&tokens);
        let marked: Vec<String> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| if tagged.contains(&i) { format!("[{t}]") } else { t.clone() })
            .collect();
        println!("{}", marked.join(" "));
    }
}
