//! Synthetic hand data: poses, rendering, crops, captions and token tagging.

pub mod crop;
pub mod dataset;
pub mod pose;
pub mod prompt;
pub mod render;
pub mod text;

pub use crop::{crop_local, BBox, CropTransform};
pub use dataset::{generate_dataset, load_dataset, Sample, SampleRecord};
pub use pose::{HandType, SyntheticHandPose};
pub use prompt::make_prompt;
pub use render::{render_condition, render_rgb};
pub use text::{tag_hand_tokens, tokenize, TokenizedPrompt, Vocab};
