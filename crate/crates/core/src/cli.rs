//! Command-line front end. Exit codes: 0 success, 1 invalid input, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::codec::train_codec_with;
use crate::config::Config;
use crate::data::{generate_dataset, load_dataset, tokenize, BBox, Sample};
use crate::error::{Error, Result};
use crate::eval::{eval_run, export_attention_maps, EvalOptions};
use crate::imaging::{ensure_parent, load_png, save_png, Image};
use crate::sampling::{attention_at, generate, GenerateOptions};
use crate::tas::{attended_tokens, refine_attention, TokenSet};
use crate::training::{load_codec, save_codec, train, ModelState};

#[derive(Debug, Parser)]
#[command(name = "handgen", version, about = "Mesh- and text-conditioned hand image diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Prepare {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Fit the image autoencoder on the configured dataset.
    TrainCodec {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the denoiser and guidance module.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate one image from a condition image, hand box and prompt.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        /// `x,y,w,h` in pixels.
        #[arg(long)]
        bbox: String,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Reverse steps; defaults to the schedule length.
        #[arg(long)]
        steps: Option<usize>,
        /// Attention latent update at every reverse step.
        #[arg(long)]
        tas: bool,
        #[arg(long, default_value = "generated.png")]
        out: PathBuf,
    },
    /// Generate from dataset conditions and score silhouette alignment.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        tas: bool,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Export per-token attention heatmaps at reverse step `t`.
    Attn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        bbox: String,
        #[arg(long)]
        prompt: String,
        /// 1-based reverse step at which maps are captured.
        #[arg(long)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        tas: bool,
        #[arg(long, default_value = "attn")]
        out: PathBuf,
        /// File name prefix.
        #[arg(long, default_value = "sample")]
        name: String,
    },
}

/// Parse, run and map the outcome to an exit code, printing any error as
/// one `ERROR <code>: <message>` line on stderr.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("ERROR usage: {}", first.trim_start_matches("error: "));
            return 1;
        }
    };
    match run(cli.command, &mut |line| println!("{line}")) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ERROR {}: {}", e.code(), e.to_string().replace('\n', " "));
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Validation(format!("{what} {} does not exist", path.display())))
    }
}

fn load_config(path: &Path) -> Result<Config> {
    require_file(path, "config file")?;
    Config::load(path)
}

fn load_samples(cfg: &Config) -> Result<Vec<Sample>> {
    let samples = load_dataset(&cfg.data.dir, cfg.data.crop_margin)?;
    let s = cfg.data.image_size;
    if let Some(bad) = samples.iter().find(|x| x.rgb_global.dim() != (3, s, s)) {
        return Err(Error::Validation(format!(
            "sample {} is {:?}, config expects {s}x{s}",
            bad.id,
            &bad.rgb_global.shape()[1..]
        )));
    }
    Ok(samples)
}

fn load_model(path: &Path) -> Result<ModelState> {
    require_file(path, "checkpoint")?;
    ModelState::load(path)
}

fn load_condition(path: &Path) -> Result<Image> {
    require_file(path, "condition image")?;
    load_png(path)
}

fn write(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn run(command: Command, log: &mut dyn FnMut(&str)) -> Result<()> {
    match command {
        Command::Prepare { n, seed, out, size } => {
            let records = generate_dataset(n, seed, size, &out)?;
            log(&format!("wrote {} samples to {}", records.len(), out.display()));
        }
        Command::TrainCodec { config } => {
            let cfg = load_config(&config)?;
            let samples = load_samples(&cfg)?;
            let images: Vec<&Image> = samples.iter().flat_map(|s| [&s.rgb_global, &s.rgb_local]).collect();
            let mut csv = String::from("step,loss\n");
            let (codec, report) = train_codec_with(&images, &cfg.codec, cfg.seed, |step, loss| {
                csv.push_str(&format!("{step},{loss}\n"));
                if step % 500 == 0 {
                    log(&format!("codec step {step} loss {loss:.6}"));
                }
            })?;
            save_codec(&cfg.codec.checkpoint, &codec, &cfg, &report)?;
            let dir = cfg.codec.checkpoint.parent().unwrap_or(Path::new("."));
            write(&dir.join("codec_loss.csv"), &csv)?;
            log(&format!(
                "codec reconstruction mse {:.6} -> {:.6}, saved {}",
                report.initial_loss,
                report.final_loss,
                cfg.codec.checkpoint.display()
            ));
        }
        Command::Train { config } => {
            let cfg = load_config(&config)?;
            require_file(&cfg.codec.checkpoint, "codec checkpoint")?;
            let codec = load_codec(&cfg.codec.checkpoint)?;
            let samples = load_samples(&cfg)?;
            let state = train(&cfg, &samples, codec, &mut *log)?;
            log(&format!(
                "trained {} steps, saved {}",
                state.step,
                cfg.train.out_dir.join("final.ckpt").display()
            ));
        }
        Command::Generate {
            ckpt,
            mesh,
            bbox,
            prompt,
            seed,
            steps,
            tas,
            out,
        } => {
            let model = load_model(&ckpt)?;
            let mesh = load_condition(&mesh)?;
            let opts = GenerateOptions {
                steps: steps.unwrap_or(model.config.diffusion.timesteps),
                seed,
                tas: tas || model.config.tas.apply_at_inference,
                guidance: true,
            };
            let g = generate(&model, &mesh, &BBox::parse(&bbox)?, &prompt, &opts)?;
            save_png(&out, &g.image)?;
            log(&format!("wrote {}", out.display()));
        }
        Command::Eval {
            ckpt,
            data,
            n,
            seed,
            steps,
            tas,
            out,
        } => {
            let model = load_model(&ckpt)?;
            let samples = load_dataset(&data, model.config.data.crop_margin)?;
            let opts = EvalOptions {
                n,
                seed,
                steps: steps.unwrap_or(model.config.diffusion.timesteps),
                tas,
            };
            let report = eval_run(&model, &samples, &opts)?;
            write(&out, &report.to_json())?;
            log(&format!(
                "mean IoU {:.4}, median IoU {:.4} over {} samples, wrote {}",
                report.mean_iou,
                report.median_iou,
                report.n,
                out.display()
            ));
        }
        Command::Attn {
            ckpt,
            mesh,
            bbox,
            prompt,
            t,
            seed,
            steps,
            tas,
            out,
            name,
        } => {
            let model = load_model(&ckpt)?;
            let mesh = load_condition(&mesh)?;
            let opts = GenerateOptions {
                steps: steps.unwrap_or(model.config.diffusion.timesteps),
                seed,
                tas: tas || model.config.tas.apply_at_inference,
                guidance: true,
            };
            let (record, text) = attention_at(&model, &mesh, &BBox::parse(&bbox)?, &prompt, t, &opts)?;
            let columns = attended_tokens(&text, TokenSet::All);
            let refined = refine_attention(&record, &columns, &model.config.tas)?;
            let words = tokenize(&prompt);
            let tokens: Vec<(usize, String)> = columns.iter().map(|&c| (c, words[c].clone())).collect();
            let files = export_attention_maps(&refined, &tokens, &name, &out, model.config.data.image_size)?;
            log(&format!("wrote {} heatmaps to {}", files.len(), out.display()));
        }
    }
    Ok(())
}
