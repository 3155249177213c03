//! `cdgan` command line. Exit codes: 0 success, 1 runtime failure, 2 usage
//! or configuration error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use cdgan_core::data::{make_synthetic, SyntheticDomainSpec};
use cdgan_core::eval::{classification_accuracy, generate_eval_set, train_judge};
use cdgan_core::model::Tower;
use cdgan_core::tensor::{DomainLabel, ImageBatch};
use cdgan_core::Tensor;
use clap::{Parser, Subcommand};
use image::imageops::FilterType;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset_io::{export_dataset, image_to_pixels, pixels_to_image, read_image, write_image};
use crate::error::{Error, Result};
use crate::experiment::{format_summary, run_matrix, write_outputs};
use crate::training::run_training;

pub const LOG_ENV: &str = "CDGAN_LOG_LEVEL";
pub const EVALUATION_FILE: &str = "evaluation.csv";

#[derive(Debug, Parser)]
#[command(name = "cdgan", version, about = "Multi-domain unsupervised image translation")]
pub struct Cli {
    /// Run config (TOML). Defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the training seed (the dataset seed for `synth`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; every file a command writes goes here.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Config override, e.g. `--set train.max_iterations=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic multi-domain dataset as PNG folders.
    Synth {
        #[arg(long, default_value_t = 4)]
        domains: usize,
        #[arg(long, default_value_t = 200)]
        per_domain: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
    /// Train a model; writes metrics.csv, checkpoints/ and final.ckpt.
    Train {
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate images into a target domain.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target domain name.
        #[arg(long)]
        target: String,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score a checkpoint with a judge trained on the real images.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the configured experiment matrix.
    Ablate,
}

fn init_logging() {
    let env = env_logger::Env::default().filter_or(LOG_ENV, "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth {
            domains,
            per_domain,
            size,
            test_fraction,
        } => synth(cli, *domains, *per_domain, *size, *test_fraction),
        Command::Train { resume } => train(cli, resume.as_deref()),
        Command::Translate {
            checkpoint,
            target,
            inputs,
        } => translate(cli, checkpoint, target, inputs),
        Command::Evaluate { checkpoint } => evaluate(cli, checkpoint),
        Command::Ablate => ablate(cli),
    }
}

fn synth(cli: &Cli, domains: usize, per_domain: usize, size: usize, test_fraction: f64) -> Result<()> {
    let spec = SyntheticDomainSpec {
        n_domains: domains,
        images_per_domain: per_domain,
        image_size: size,
        seed: cli.seed.unwrap_or(0),
        test_fraction,
    };
    spec.validate()?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    let data = make_synthetic(&spec)?;
    let written = export_dataset(&data, &out)?;
    println!("wrote {written} images in {domains} domains to {}", out.display());
    Ok(())
}

fn train(cli: &Cli, resume: Option<&Path>) -> Result<()> {
    let cfg = run_config(cli)?;
    let data = cfg.dataset()?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let resolved = cfg.out.join("config.toml");
    fs::write(&resolved, cfg.to_toml()?).map_err(|e| Error::io(&resolved, e))?;
    let state = run_training(&cfg, &data, resume)?;
    let composite = state.loss_history.last().map_or(f64::NAN, |r| r.eg.composite);
    println!("final_iter={} composite_eg={}", state.iteration, composite);
    Ok(())
}

fn translate(cli: &Cli, ckpt: &Path, target: &str, inputs: &[PathBuf]) -> Result<()> {
    let ck = checkpoint::load(ckpt)?;
    let Some(t) = ck.domains.iter().position(|d| d == target) else {
        return Err(Error::Usage(format!(
            "unknown domain {target:?}; valid domains: {}",
            ck.domains.join(", ")
        )));
    };
    let model = ck.params.config();
    if model.image_channels != 3 {
        return Err(Error::Usage("translate needs an RGB model".into()));
    }
    let size = model.image_size;
    let label = DomainLabel::new(t, model.n_domains)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    for input in inputs {
        let img = read_image(input)?;
        let batch = ImageBatch::new(Tensor::from_vec(&[1, 3, size, size], image_to_pixels(&img, size))?)?;
        let z = ck.params.encode(Tower::X, &batch)?;
        let y = ck.params.generate(Tower::Y, &z, std::slice::from_ref(&label))?;
        let mut translated = pixels_to_image(y.data(), size);
        if translated.dimensions() != img.dimensions() {
            translated = image::imageops::resize(&translated, img.width(), img.height(), FilterType::Triangle);
        }
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let path = out.join(format!("{stem}__to_{target}.png"));
        write_image(&path, &translated)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn evaluate(cli: &Cli, ckpt: &Path) -> Result<()> {
    let cfg = run_config(cli)?;
    let ck = checkpoint::load(ckpt)?;
    let data = cfg.dataset()?;
    if ck.domains != data.domains() {
        return Err(Error::Config(format!(
            "checkpoint domains {:?} differ from the dataset's {:?}",
            ck.domains,
            data.domains()
        )));
    }
    let judge = train_judge(&data, &cfg.eval.judge)?;
    log::info!("judge real-test accuracy {:.4}", judge.real_test_accuracy());
    judge.ensure_usable()?;
    let set = generate_eval_set(&ck.params, &data, cfg.eval.per_domain_count, cfg.eval.seed)?;
    let accuracy = classification_accuracy(&judge, &set.images, &set.targets)?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let path = cfg.out.join(EVALUATION_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["checkpoint", "accuracy", "judge_real_accuracy", "images"])?;
    w.write_record([
        ckpt.display().to_string(),
        accuracy.to_string(),
        judge.real_test_accuracy().to_string(),
        set.targets.len().to_string(),
    ])?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    println!(
        "accuracy={accuracy} judge_real_accuracy={} images={}",
        judge.real_test_accuracy(),
        set.targets.len()
    );
    Ok(())
}

fn ablate(cli: &Cli) -> Result<()> {
    let cfg = run_config(cli)?;
    let data = cfg.dataset()?;
    let judge = train_judge(&data, &cfg.eval.judge)?;
    log::info!("judge real-test accuracy {:.4}", judge.real_test_accuracy());
    judge.ensure_usable()?;
    let matrix = cfg.matrix();
    let run = run_matrix(&matrix, &data, &judge, &cfg.eval.settings(), cfg.eval.curve_every)?;
    let summary = write_outputs(&cfg.out, &run)?;
    print!("{}", format_summary(&summary));
    Ok(())
}
