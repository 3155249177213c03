//! Training driver: metrics CSV, periodic checkpoints, resume.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use cdgan_core::data::MultiDomainDataset;
use cdgan_core::trainer::{self, LossRecord, TrainConfig, TrainObserver, TrainState};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub const METRICS_HEADER: [&str; 10] = [
    "iteration",
    "gan_x",
    "gan_y",
    "rec",
    "lcl",
    "cls_real",
    "cls_fake",
    "cyc",
    "composite_d",
    "composite_eg",
];

/// Adversarial and fake-classification columns come from the
/// encoder/generator phase, `cls_real` from the discriminator phase.
pub fn metrics_row(r: &LossRecord) -> [String; 10] {
    [
        r.iteration.to_string(),
        r.eg.gan_x.to_string(),
        r.eg.gan_y.to_string(),
        r.eg.rec.to_string(),
        r.eg.lcl.to_string(),
        r.d.cls_real.to_string(),
        r.eg.cls_fake.to_string(),
        r.eg.cyc.to_string(),
        r.d.composite.to_string(),
        r.eg.composite.to_string(),
    ]
}

pub fn checkpoint_path(out: &Path, iteration: u64) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("iter_{iteration:08}.ckpt"))
}

/// Writes metrics rows and checkpoints under `out`.
pub struct FileObserver {
    out: PathBuf,
    metrics: csv::Writer<File>,
    train: TrainConfig,
    domains: Vec<String>,
}

fn observer_err(e: impl std::fmt::Display) -> cdgan_core::Error {
    cdgan_core::Error::Observer(e.to_string())
}

impl FileObserver {
    /// Starts `out/metrics.csv` afresh, replaying the logged part of
    /// `history` so a resumed run's file matches an uninterrupted one.
    pub fn create(out: &Path, train: &TrainConfig, domains: &[String], history: &[LossRecord]) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join(METRICS_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut metrics = csv::Writer::from_writer(file);
        metrics.write_record(METRICS_HEADER)?;
        for r in history.iter().filter(|r| r.iteration % train.log_every == 0) {
            metrics.write_record(metrics_row(r))?;
        }
        metrics.flush().map_err(|e| Error::io(&path, e))?;
        Ok(FileObserver {
            out: out.to_path_buf(),
            metrics,
            train: train.clone(),
            domains: domains.to_vec(),
        })
    }
}

impl TrainObserver<f32> for FileObserver {
    fn on_log(&mut self, _state: &TrainState<f32>, record: &LossRecord) -> cdgan_core::Result<()> {
        self.metrics.write_record(metrics_row(record)).map_err(observer_err)?;
        self.metrics.flush().map_err(observer_err)?;
        log::info!(
            "iter {} d={:.4} eg={:.4} rec={:.4}",
            record.iteration,
            record.d.composite,
            record.eg.composite,
            record.eg.rec
        );
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState<f32>) -> cdgan_core::Result<()> {
        let path = checkpoint_path(&self.out, state.iteration);
        checkpoint::save_state(&path, state, &self.train, &self.domains).map_err(observer_err)?;
        log::debug!("checkpoint {}", path.display());
        Ok(())
    }
}

/// Fields that may change between a checkpoint and the run resuming it.
fn resumable(a: &TrainConfig, b: &TrainConfig) -> bool {
    let strip = |c: &TrainConfig| TrainConfig {
        max_iterations: 0,
        checkpoint_every: 1,
        log_every: 1,
        ..c.clone()
    };
    strip(a) == strip(b)
}

/// Trains per `cfg` into `cfg.out` (fresh, or continuing `resume_from`) and
/// writes the final model to `out/final.ckpt`.
pub fn run_training(cfg: &RunConfig, data: &MultiDomainDataset, resume_from: Option<&Path>) -> Result<TrainState<f32>> {
    cfg.validate()?;
    let state = match resume_from {
        None => TrainState::new(&cfg.model, &cfg.train)?,
        Some(p) => {
            let ck = checkpoint::load(p)?;
            if ck.params.config() != &cfg.model {
                return Err(Error::Config(format!("{}: model config differs from the run config", p.display())));
            }
            if ck.domains != data.domains() {
                return Err(Error::Config(format!(
                    "{}: trained on domains {:?}, dataset has {:?}",
                    p.display(),
                    ck.domains,
                    data.domains()
                )));
            }
            let (state, train) = ck.into_state()?;
            if !resumable(&train, &cfg.train) {
                return Err(Error::Config(format!(
                    "{}: only max_iterations, checkpoint_every and log_every may change on resume",
                    p.display()
                )));
            }
            state
        }
    };
    let mut observer = FileObserver::create(&cfg.out, &cfg.train, data.domains(), &state.loss_history)?;
    let state = trainer::resume(state, &cfg.train, data, &mut observer)?;
    checkpoint::save_model(&cfg.out.join(FINAL_CHECKPOINT), &state.params, data.domains())?;
    Ok(state)
}
