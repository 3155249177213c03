//! Translation scoring: a separately trained judge classifies translated
//! images, and accuracy is measured against the intended target domain.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{MultiDomainDataset, Sample};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Tower};
use crate::nn::{self, Activation, ConvGeom, ConvGrads};
use crate::optim::{adam_update, AdamConfig, AdamMoments};
use crate::real::{matmul, matmul_nt, matmul_tn};
use crate::tensor::{DomainLabel, ImageBatch, Tensor};
use crate::trainer::{resume, NoopObserver, TrainConfig, TrainState};

pub const DEFAULT_ACCURACY_FLOOR: f64 = 0.90;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub channels: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub accuracy_floor: f64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig {
            channels: vec![16, 32, 64],
            learning_rate: 1e-3,
            epochs: 8,
            batch_size: 32,
            seed: 0,
            accuracy_floor: DEFAULT_ACCURACY_FLOOR,
        }
    }
}

impl JudgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::InvalidConfig("judge channels must be non-empty and positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "judge learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("judge batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.accuracy_floor) {
            return Err(Error::InvalidConfig(format!(
                "accuracy_floor must lie in [0, 1], got {}",
                self.accuracy_floor
            )));
        }
        Ok(())
    }
}

/// Small CNN: stride-2 conv + LeakyReLU blocks, global average pool, linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgeClassifier {
    n_classes: usize,
    image_channels: usize,
    image_size: usize,
    geoms: Vec<ConvGeom>,
    /// Conv weights and biases, then head weight `[n_classes, C]` and bias.
    params: Vec<Tensor<f32>>,
    real_test_accuracy: f64,
    accuracy_floor: f64,
}

struct JudgeCache {
    inputs: Vec<Tensor<f32>>,
    last: Tensor<f32>,
    pooled: Vec<f32>,
}

impl JudgeClassifier {
    fn init(n_classes: usize, image_channels: usize, image_size: usize, cfg: &JudgeConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut geoms = Vec::new();
        let mut params = Vec::new();
        let mut c_in = image_channels;
        let mut size = image_size;
        for &c_out in &cfg.channels {
            let geom = ConvGeom::conv(c_in, c_out, 3, 2, 1);
            size = geom.out_size(size).ok_or_else(|| {
                Error::InvalidConfig(format!("{image_size}px images are too small for {} judge blocks", cfg.channels.len()))
            })?;
            params.push(he_normal(&mut rng, &geom.weight_shape(), geom.fan_in()));
            params.push(Tensor::zeros(&[c_out]));
            geoms.push(geom);
            c_in = c_out;
        }
        params.push(he_normal(&mut rng, &[n_classes, c_in], c_in));
        params.push(Tensor::zeros(&[n_classes]));
        Ok(JudgeClassifier {
            n_classes,
            image_channels,
            image_size,
            geoms,
            params,
            real_test_accuracy: 0.0,
            accuracy_floor: cfg.accuracy_floor,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn real_test_accuracy(&self) -> f64 {
        self.real_test_accuracy
    }

    pub fn accuracy_floor(&self) -> f64 {
        self.accuracy_floor
    }

    pub fn is_usable(&self) -> bool {
        self.real_test_accuracy >= self.accuracy_floor
    }

    pub fn ensure_usable(&self) -> Result<()> {
        if self.is_usable() {
            Ok(())
        } else {
            Err(Error::JudgeUnusable {
                accuracy: self.real_test_accuracy,
                floor: self.accuracy_floor,
            })
        }
    }

    pub fn parameters(&self) -> &[Tensor<f32>] {
        &self.params
    }

    fn forward(&self, images: &ImageBatch<f32>) -> Result<(Vec<f32>, JudgeCache)> {
        images.expect_image_shape(self.image_channels, self.image_size)?;
        let mut x = images.tensor().clone();
        let mut inputs = Vec::with_capacity(self.geoms.len());
        for (i, geom) in self.geoms.iter().enumerate() {
            let mut y = nn::conv_forward(geom, &x, self.params[2 * i].data(), self.params[2 * i + 1].data());
            nn::activate(Activation::LeakyRelu, &mut y);
            inputs.push(core::mem::replace(&mut x, y));
        }
        let n = x.shape()[0];
        let c = x.shape()[1];
        let pooled = nn::global_avg_pool(&x);
        let head = self.geoms.len() * 2;
        let mut logits = vec![0.0f32; n * self.n_classes];
        matmul_nt(n, c, self.n_classes, &pooled, self.params[head].data(), &mut logits, false);
        for row in logits.chunks_mut(self.n_classes) {
            row.iter_mut().zip(self.params[head + 1].data()).for_each(|(l, b)| *l += *b);
        }
        Ok((logits, JudgeCache { inputs, last: x, pooled }))
    }

    /// Class logits, `[batch * n_classes]` row-major.
    pub fn logits(&self, images: &ImageBatch<f32>) -> Result<Vec<f32>> {
        Ok(self.forward(images)?.0)
    }

    pub fn predict(&self, images: &ImageBatch<f32>) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        Ok(logits.chunks(self.n_classes).map(argmax).collect())
    }

    fn gradients(&self, images: &ImageBatch<f32>, labels: &[usize]) -> Result<(f64, Vec<Vec<f32>>)> {
        let (logits, cache) = self.forward(images)?;
        let n = labels.len();
        let k = self.n_classes;
        let probs = nn::softmax_rows(&logits, k);
        let mut loss = 0.0f64;
        let mut dlogits = probs.clone();
        for (i, &label) in labels.iter().enumerate() {
            loss -= (probs[i * k + label].max(1e-12) as f64).ln();
            dlogits[i * k + label] -= 1.0;
        }
        dlogits.iter_mut().for_each(|g| *g /= n as f32);

        let mut grads: Vec<Vec<f32>> = self.params.iter().map(|p| vec![0.0; p.len()]).collect();
        let head = self.geoms.len() * 2;
        let c = cache.last.shape()[1];
        matmul_tn(k, n, c, &dlogits, &cache.pooled, &mut grads[head], false);
        for row in dlogits.chunks(k) {
            grads[head + 1].iter_mut().zip(row).for_each(|(g, d)| *g += *d);
        }
        let mut dpooled = vec![0.0f32; n * c];
        matmul(n, k, c, &dlogits, self.params[head].data(), &mut dpooled, false);
        let mut dy = nn::global_avg_pool_backward(cache.last.shape(), &dpooled);
        let mut y = cache.last;
        for i in (0..self.geoms.len()).rev() {
            nn::activate_backward(Activation::LeakyRelu, &y, &mut dy);
            let (gw, rest) = grads[2 * i..].split_at_mut(1);
            let dx = nn::conv_backward(
                &self.geoms[i],
                &cache.inputs[i],
                self.params[2 * i].data(),
                &dy,
                Some(ConvGrads {
                    weight: &mut gw[0],
                    bias: &mut rest[0],
                }),
                i > 0,
            );
            if let Some(dx) = dx {
                dy = dx;
                y = cache.inputs[i].clone();
            }
        }
        Ok((loss / n as f64, grads))
    }
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let normal = Normal::new(0.0, libm::sqrt(2.0 / fan_in as f64)).expect("positive std");
    let len = shape.iter().product();
    let data = (0..len).map(|_| normal.sample(rng) as f32).collect();
    Tensor::from_vec(shape, data).expect("consistent shape")
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn labelled_samples(data: &MultiDomainDataset, test: bool) -> Result<Vec<(&Sample, usize)>> {
    let mut out = Vec::new();
    for d in 0..data.n_domains() {
        let split = if test { data.test(d)? } else { data.train(d)? };
        out.extend(split.iter().map(|s| (s, d)));
    }
    Ok(out)
}

/// Trains a judge on the train splits and records its accuracy on the test
/// splits. A judge under the floor is still returned; [`classification_accuracy`]
/// refuses to use it.
pub fn train_judge(data: &MultiDomainDataset, cfg: &JudgeConfig) -> Result<JudgeClassifier> {
    cfg.validate()?;
    if data.n_domains() < 2 {
        return Err(Error::InvalidDataset("need ≥ 2 classes to train a judge".into()));
    }
    let mut judge = JudgeClassifier::init(data.n_domains(), data.image_channels(), data.image_size(), cfg)?;
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        beta1: 0.9,
        beta2: 0.999,
    };
    let mut moments: Vec<AdamMoments<f32>> = judge.params.iter().map(|p| AdamMoments::new(p.len())).collect();
    let train = labelled_samples(data, false)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| train[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].1).collect();
            let images = data.stack::<f32>(&samples)?;
            let (loss, grads) = judge.gradients(&images, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "judge training loss".into(),
                });
            }
            for ((p, g), m) in judge.params.iter_mut().zip(&grads).zip(&mut moments) {
                adam_update(p.data_mut(), g, m, &adam)?;
            }
        }
    }
    let test = labelled_samples(data, true)?;
    judge.real_test_accuracy = if test.is_empty() {
        0.0
    } else {
        let mut correct = 0usize;
        for chunk in test.chunks(64) {
            let samples: Vec<&Sample> = chunk.iter().map(|(s, _)| *s).collect();
            let preds = judge.predict(&data.stack::<f32>(&samples)?)?;
            correct += preds.iter().zip(chunk).filter(|(p, (_, d))| **p == *d).count();
        }
        correct as f64 / test.len() as f64
    };
    Ok(judge)
}

/// Fraction of `predictions` equal to `targets`.
pub fn prediction_accuracy(predictions: &[usize], targets: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if predictions.len() != targets.len() {
        return Err(Error::shape(&[targets.len()], &[predictions.len()]));
    }
    let hits = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Fraction of images whose judge argmax equals the intended label.
pub fn classification_accuracy(judge: &JudgeClassifier, images: &ImageBatch<f32>, intended: &[DomainLabel]) -> Result<f64> {
    judge.ensure_usable()?;
    if images.batch_size() == 0 || intended.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let targets: Vec<usize> = intended.iter().map(|l| l.id()).collect();
    let mut predictions = Vec::with_capacity(targets.len());
    let n = images.batch_size();
    for start in (0..n).step_by(64) {
        let chunk = ImageBatch::new(images.tensor().narrow_batch(start, 64.min(n - start)))?;
        predictions.extend(judge.predict(&chunk)?);
    }
    prediction_accuracy(&predictions, &targets)
}

/// Translated test images with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub images: ImageBatch<f32>,
    pub targets: Vec<DomainLabel>,
    pub sources: Vec<usize>,
    pub names: Vec<String>,
}

/// Translates every test image into every other domain (encoder X, generator
/// Y). `per_domain_count` caps the images per target domain with a seeded
/// subset.
pub fn generate_eval_set(
    params: &ModelParams<f32>,
    data: &MultiDomainDataset,
    per_domain_count: Option<usize>,
    seed: u64,
) -> Result<EvalSet> {
    let n_d = data.n_domains();
    if n_d != params.config().n_domains {
        return Err(Error::InvalidConfig(format!(
            "dataset has {n_d} domains but the model expects {}",
            params.config().n_domains
        )));
    }
    let mut jobs: Vec<(usize, &Sample, usize)> = Vec::new();
    for s in 0..n_d {
        for sample in data.test(s)? {
            for t in (0..n_d).filter(|&t| t != s) {
                jobs.push((s, sample, t));
            }
        }
    }
    if jobs.is_empty() {
        return Err(Error::InvalidDataset("test split is empty".into()));
    }
    if let Some(cap) = per_domain_count {
        let mut keep = vec![false; jobs.len()];
        for t in 0..n_d {
            let mut idx: Vec<usize> = (0..jobs.len()).filter(|&i| jobs[i].2 == t).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            idx.shuffle(&mut rng);
            idx.iter().take(cap).for_each(|&i| keep[i] = true);
        }
        let mut i = 0;
        jobs.retain(|_| {
            i += 1;
            keep[i - 1]
        });
    }
    let mut chunks = Vec::new();
    let mut targets = Vec::with_capacity(jobs.len());
    for job_chunk in jobs.chunks(16) {
        let samples: Vec<&Sample> = job_chunk.iter().map(|j| j.1).collect();
        let labels = job_chunk
            .iter()
            .map(|j| DomainLabel::new(j.2, n_d))
            .collect::<Result<Vec<_>>>()?;
        let z = params.encode(Tower::X, &data.stack::<f32>(&samples)?)?;
        chunks.push(params.generate(Tower::Y, &z, &labels)?.into_tensor());
        targets.extend(labels);
    }
    let images = ImageBatch::new(Tensor::cat_batch(&chunks.iter().collect::<Vec<_>>())?)?;
    Ok(EvalSet {
        images,
        targets,
        sources: jobs.iter().map(|j| j.0).collect(),
        names: jobs
            .iter()
            .map(|j| format!("{}__to_{}", j.1.name, data.domains()[j.2]))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMatrix {
    pub cells: Vec<ExperimentCell>,
    pub seeds: Vec<u64>,
}

/// Rows of the loss ablation: GAN + cycle always on; R, LCL, C toggled.
pub const LOSS_ABLATION_ROWS: [(&str, bool, bool, bool); 8] = [
    ("Baseline", false, false, false),
    ("Baseline + R", true, false, false),
    ("Baseline + LCL", false, true, false),
    ("Baseline + C", false, false, true),
    ("Baseline + R + LCL", true, true, false),
    ("Baseline + R + C", true, false, true),
    ("Baseline + LCL + C", false, true, true),
    ("Baseline + R + LCL + C", true, true, true),
];

impl ExperimentMatrix {
    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.cells.iter().enumerate() {
            a.model.validate()?;
            a.train.validate()?;
            for b in &self.cells[i + 1..] {
                if a.name == b.name {
                    return Err(Error::InvalidConfig(format!("duplicate cell name {:?}", a.name)));
                }
                if a.model == b.model && a.train == b.train {
                    return Err(Error::InvalidConfig(format!(
                        "cells {:?} and {:?} are identical",
                        a.name, b.name
                    )));
                }
            }
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::InvalidConfig("duplicate seeds".into()));
        }
        Ok(())
    }

    /// A loss term is switched off by zeroing its weight; enabled terms keep
    /// the base weights.
    pub fn loss_ablation(model: &ModelConfig, base: &TrainConfig, seeds: Vec<u64>) -> Self {
        let cells = LOSS_ABLATION_ROWS
            .iter()
            .map(|&(name, r, lcl, c)| {
                let mut train = base.clone();
                if !r {
                    train.weights.alpha0 = 0.0;
                }
                if !lcl {
                    train.weights.alpha1 = 0.0;
                }
                if !c {
                    train.weights.alpha2 = 0.0;
                }
                ExperimentCell {
                    name: name.into(),
                    model: model.clone(),
                    train,
                }
            })
            .collect();
        ExperimentMatrix { cells, seeds }
    }

    /// One cell per shared-layer count; `k = 0` disables tying altogether.
    pub fn shared_layer_sweep(model: &ModelConfig, base: &TrainConfig, counts: &[usize], seeds: Vec<u64>) -> Self {
        let cells = counts
            .iter()
            .map(|&k| {
                let mut m = model.clone();
                m.n_shared_layers = k;
                m.share_lowest = k > 0;
                m.share_highest = k > 0;
                ExperimentCell {
                    name: format!("shared_{k}"),
                    model: m,
                    train: base.clone(),
                }
            })
            .collect();
        ExperimentMatrix { cells, seeds }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub per_domain_count: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub accuracy: f64,
    pub iterations: u64,
    /// `(iteration, accuracy)` at each evaluation point, ending at `iterations`.
    pub curve: Vec<(u64, f64)>,
}

/// Trains one cell with `seed` and scores it; `curve_every` adds intermediate
/// evaluations. Pure: no IO, no clocks.
pub fn run_cell(
    cell: &ExperimentCell,
    seed: u64,
    data: &MultiDomainDataset,
    judge: &JudgeClassifier,
    eval: &EvalSettings,
    curve_every: Option<u64>,
) -> Result<CellOutcome> {
    judge.ensure_usable()?;
    let mut cfg = cell.train.clone();
    cfg.seed = seed;
    cfg.validate()?;
    cell.model.validate()?;
    let total = cfg.max_iterations;
    let mut stops: Vec<u64> = match curve_every {
        Some(step) if step > 0 => (1..).map(|i| i * step).take_while(|&s| s < total).collect(),
        _ => Vec::new(),
    };
    stops.push(total);
    let mut state = TrainState::<f32>::new(&cell.model, &cfg)?;
    let mut curve = Vec::with_capacity(stops.len());
    for stop in stops {
        let seg = TrainConfig {
            max_iterations: stop,
            ..cfg.clone()
        };
        state = resume(state, &seg, data, &mut NoopObserver)?;
        let set = generate_eval_set(&state.params, data, eval.per_domain_count, eval.seed)?;
        curve.push((stop, classification_accuracy(judge, &set.images, &set.targets)?));
    }
    Ok(CellOutcome {
        accuracy: curve.last().map(|c| c.1).unwrap_or(f64::NAN),
        iterations: state.iteration,
        curve,
    })
}
