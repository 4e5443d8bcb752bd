//! Noise schedule, forward noising and the cross-attention U-Net.

mod schedule;
pub mod unet;

pub use schedule::{make_schedule, q_sample, q_sample_pair, DiffusionConfig, NoiseSchedule};
pub use unet::{
    init_unet, unet_forward, AttentionLayer, AttentionRecord, DenoiserOutput, ModelConfig,
};

use crate::codec::LatentImage;

/// Global and local branch tensors of the same kind.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPair {
    pub global: LatentImage,
    pub local: LatentImage,
}

impl LatentPair {
    pub fn new(global: LatentImage, local: LatentImage) -> Self {
        Self { global, local }
    }

    pub fn map(&self, mut f: impl FnMut(&LatentImage) -> LatentImage) -> Self {
        Self {
            global: f(&self.global),
            local: f(&self.local),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &LatentImage> {
        [&self.global, &self.local].into_iter()
    }
}
