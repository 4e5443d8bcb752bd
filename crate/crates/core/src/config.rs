//! Versioned TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::codec::CodecConfig;
use crate::diffusion::{DiffusionConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::tas::TasConfig;
use crate::training::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Overrides `train.out_dir` when set.
pub const OUT_DIR_ENV: &str = "HANDGEN_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub image_size: usize,
    /// Square-expansion margin of the local crop, per side, as a fraction.
    pub crop_margin: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            image_size: 64,
            crop_margin: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub codec: CodecConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub tas: TasConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            data: DataConfig::default(),
            codec: CodecConfig::default(),
            model: ModelConfig::default(),
            diffusion: DiffusionConfig::default(),
            tas: TasConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Read a config file. Relative paths inside it resolve against the
    /// file's directory; `HANDGEN_OUT_DIR` replaces `train.out_dir`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.data.dir,
            &mut cfg.codec.checkpoint,
            &mut cfg.train.out_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(r) = cfg.train.resume_from.as_mut() {
            if r.is_relative() {
                *r = base.join(&*r);
            }
        }
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            cfg.train.out_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let s = self.data.image_size;
        if s < 8 || s % 8 != 0 {
            return Err(Error::Config(format!("data.image_size must be a multiple of 8, got {s}")));
        }
        if (s / 8) % 4 != 0 {
            return Err(Error::Config(format!(
                "latent size {} must be divisible by 4 for the denoiser",
                s / 8
            )));
        }
        if !(0.0..1.0).contains(&self.data.crop_margin) {
            return Err(Error::Config("data.crop_margin must lie in [0, 1)".into()));
        }
        self.codec.validate()?;
        self.model.validate()?;
        self.diffusion.schedule()?;
        self.tas.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Copy with every filesystem location reset to its default, as stored
    /// in checkpoints so they do not depend on where a run happened.
    pub fn portable(&self) -> Config {
        let d = Config::default();
        let mut c = self.clone();
        c.data.dir = d.data.dir;
        c.codec.checkpoint = d.codec.checkpoint;
        c.train.out_dir = d.train.out_dir;
        c.train.resume_from = None;
        c
    }

    /// SHA-256 over everything that determines weights and logged numbers:
    /// architecture, schedule, objective, optimizer settings and seed. Paths,
    /// the guidance step count and the checkpoint interval are excluded so a
    /// run can be resumed and extended.
    pub fn fingerprint(&self) -> String {
        let t = &self.train;
        let c = &self.codec;
        let v = json!({
            "version": self.version,
            "seed": self.seed,
            "image_size": self.data.image_size,
            "crop_margin": self.data.crop_margin,
            "codec": { "channels": c.channels, "steps": c.steps, "batch_size": c.batch_size, "lr": c.lr },
            "model": self.model,
            "diffusion": self.diffusion,
            "tas": self.tas,
            "train": {
                "base_steps": t.base_steps, "base_lr": t.base_lr, "lr": t.lr,
                "batch_size": t.batch_size, "lambda_g": t.lambda_g, "lambda_l": t.lambda_l,
            },
        });
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}
