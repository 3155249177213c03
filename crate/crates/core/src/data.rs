//! Multi-domain datasets: in-memory storage, deterministic splits, the
//! synthetic tinted-shapes generator and the epoch-reshuffling sampler.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{DomainLabel, ImageBatch, Tensor};

/// Maps an 8-bit intensity (possibly fractional) linearly onto `[-1, 1]`.
pub fn normalize_pixel(v: f64) -> f64 {
    v / 127.5 - 1.0
}

/// Inverse of [`normalize_pixel`], rounded and saturated to a byte.
pub fn denormalize_pixel(v: f64) -> u8 {
    let p = ((v + 1.0) * 127.5).round();
    p.clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    /// `(C, H, W)` row-major, values in `[-1, 1]`.
    pub pixels: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DomainSplit {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Fraction of each domain's images assigned to the test partition.
    pub test_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { test_fraction: 0.2 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::InvalidConfig(format!(
                "test_fraction must lie in [0, 1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

/// Marks which names go to the test partition. Names are ordered by the
/// SHA-256 of their bytes and the first `round(n · fraction)` are test.
pub fn split_by_name_hash(names: &[String], spec: &SplitSpec) -> Vec<bool> {
    let mut order: Vec<(Vec<u8>, usize)> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (Sha256::digest(n.as_bytes()).to_vec(), i))
        .collect();
    order.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| names[a.1].cmp(&names[b.1])));
    let n_test = libm_round(names.len() as f64 * spec.test_fraction);
    let mut is_test = vec![false; names.len()];
    for (_, i) in order.iter().take(n_test) {
        is_test[*i] = true;
    }
    is_test
}

fn libm_round(v: f64) -> usize {
    num_traits::Float::round(v) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiDomainDataset {
    domains: Vec<String>,
    image_channels: usize,
    image_size: usize,
    splits: Vec<DomainSplit>,
}

impl MultiDomainDataset {
    pub fn new(domains: Vec<String>, image_channels: usize, image_size: usize, splits: Vec<DomainSplit>) -> Result<Self> {
        if domains.is_empty() || domains.len() != splits.len() {
            return Err(Error::InvalidDataset(format!(
                "{} domain names for {} domain splits",
                domains.len(),
                splits.len()
            )));
        }
        let per = image_channels * image_size * image_size;
        for (name, split) in domains.iter().zip(&splits) {
            if split.train.is_empty() {
                return Err(Error::InvalidDataset(format!("domain {name} has no training images")));
            }
            for s in split.train.iter().chain(&split.test) {
                if s.pixels.len() != per {
                    return Err(Error::InvalidDataset(format!(
                        "image {}/{} has {} values, expected {}",
                        name,
                        s.name,
                        s.pixels.len(),
                        per
                    )));
                }
                if s.pixels.iter().any(|v| !v.is_finite() || *v < -1.0 || *v > 1.0) {
                    return Err(Error::InvalidDataset(format!("image {}/{} has values outside [-1, 1]", name, s.name)));
                }
            }
            let mut names: Vec<&str> = split.train.iter().chain(&split.test).map(|s| s.name.as_str()).collect();
            names.sort_unstable();
            if names.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidDataset(format!("domain {name} has duplicate image names")));
            }
        }
        Ok(MultiDomainDataset {
            domains,
            image_channels,
            image_size,
            splits,
        })
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn image_channels(&self) -> usize {
        self.image_channels
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == name)
    }

    pub fn split(&self, domain: usize) -> Result<&DomainSplit> {
        self.splits.get(domain).ok_or(Error::UnknownDomain(domain))
    }

    pub fn train(&self, domain: usize) -> Result<&[Sample]> {
        Ok(&self.split(domain)?.train)
    }

    pub fn test(&self, domain: usize) -> Result<&[Sample]> {
        Ok(&self.split(domain)?.test)
    }

    pub fn total_images(&self) -> usize {
        self.splits.iter().map(|s| s.train.len() + s.test.len()).sum()
    }

    pub fn label(&self, domain: usize) -> Result<DomainLabel> {
        DomainLabel::new(domain, self.n_domains()).map_err(|_| Error::UnknownDomain(domain))
    }

    /// Stacks samples into an `(n, C, H, W)` batch.
    pub fn stack<T: Real>(&self, samples: &[&Sample]) -> Result<ImageBatch<T>> {
        let per = self.image_channels * self.image_size * self.image_size;
        let mut data = Vec::with_capacity(samples.len() * per);
        for s in samples {
            data.extend(s.pixels.iter().map(|v| T::lit(*v as f64)));
        }
        ImageBatch::new(Tensor::from_vec(
            &[samples.len(), self.image_channels, self.image_size, self.image_size],
            data,
        )?)
    }
}

/// Recipe for the synthetic tinted-shapes dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub n_domains: usize,
    pub images_per_domain: usize,
    pub image_size: usize,
    pub seed: u64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

/// Rendering rule that makes one synthetic domain recognizable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainSignature {
    /// Additive RGB offset.
    pub tint: [f64; 3],
    /// Stripe frequency in cycles per image.
    pub stripe_cycles: f64,
    /// Stripe orientation in radians.
    pub stripe_angle: f64,
}

pub const TINT_STRENGTH: f64 = 0.6;
pub const STRIPE_AMPLITUDE: f64 = 0.15;
pub const CONTENT_GAIN: f64 = 0.5;

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_domains < 2 {
            return Err(Error::InvalidConfig("need ≥ 2 domains".into()));
        }
        if self.images_per_domain == 0 {
            return Err(Error::InvalidConfig("images_per_domain must be positive".into()));
        }
        if self.image_size < 4 {
            return Err(Error::InvalidConfig("image_size must be at least 4".into()));
        }
        SplitSpec {
            test_fraction: self.test_fraction,
        }
        .validate()
    }

    /// Domain `d` gets hue `2πd/n` and a stripe pattern of `1 + d` cycles.
    pub fn signature(&self, domain: usize) -> DomainSignature {
        let hue = 2.0 * PI * domain as f64 / self.n_domains as f64;
        let tint = core::array::from_fn(|c| TINT_STRENGTH * libm::cos(hue - 2.0 * PI * c as f64 / 3.0));
        DomainSignature {
            tint,
            stripe_cycles: 1.0 + domain as f64,
            stripe_angle: PI * domain as f64 / self.n_domains as f64,
        }
    }

    pub fn domain_name(domain: usize) -> String {
        format!("domain_{domain}")
    }
}

/// Renders the synthetic dataset. Content (shapes on a background) is drawn
/// from the same distribution for every domain; only the signature differs.
/// Pixels are quantized to 8-bit levels so a PNG export reloads exactly.
pub fn make_synthetic(spec: &SyntheticDomainSpec) -> Result<MultiDomainDataset> {
    spec.validate()?;
    let size = spec.image_size;
    let mut domains = Vec::with_capacity(spec.n_domains);
    let mut splits = Vec::with_capacity(spec.n_domains);
    for d in 0..spec.n_domains {
        let sig = spec.signature(d);
        let names: Vec<String> = (0..spec.images_per_domain).map(|i| format!("img_{i:05}")).collect();
        let is_test = split_by_name_hash(
            &names,
            &SplitSpec {
                test_fraction: spec.test_fraction,
            },
        );
        let mut split = DomainSplit::default();
        for (i, name) in names.into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(((d as u64) << 32) | i as u64);
            let pixels = render(&mut rng, size, &sig);
            let sample = Sample { name, pixels };
            if is_test[i] {
                split.test.push(sample);
            } else {
                split.train.push(sample);
            }
        }
        domains.push(SyntheticDomainSpec::domain_name(d));
        splits.push(split);
    }
    MultiDomainDataset::new(domains, 3, size, splits)
}

fn render(rng: &mut ChaCha8Rng, size: usize, sig: &DomainSignature) -> Vec<f32> {
    let s = size as f64;
    let background: f64 = rng.random_range(-0.3..0.3);
    let mut luminance = vec![background; size * size];
    let n_shapes = rng.random_range(1..=3);
    for _ in 0..n_shapes {
        let level: f64 = rng.random_range(-0.9..0.9);
        let cx: f64 = rng.random_range(0.0..s);
        let cy: f64 = rng.random_range(0.0..s);
        let extent: f64 = rng.random_range(s / 8.0..s / 3.0);
        let circle: bool = rng.random();
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if circle {
                    dx * dx + dy * dy <= extent * extent
                } else {
                    dx.abs() <= extent && dy.abs() <= extent * 0.6
                };
                if inside {
                    luminance[y * size + x] = level;
                }
            }
        }
    }
    let (sin_a, cos_a) = (libm::sin(sig.stripe_angle), libm::cos(sig.stripe_angle));
    let mut pixels = Vec::with_capacity(3 * size * size);
    for tint in sig.tint {
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 * cos_a + y as f64 * sin_a) / s;
                let stripe = STRIPE_AMPLITUDE * libm::sin(2.0 * PI * sig.stripe_cycles * u);
                let v = (CONTENT_GAIN * luminance[y * size + x] + tint + stripe).clamp(-1.0, 1.0);
                pixels.push(normalize_pixel(denormalize_pixel(v) as f64) as f32);
            }
        }
    }
    pixels
}

/// Per-domain sampling without replacement within an epoch; each epoch's
/// order is a seeded permutation, so the sampler state is just draw counts.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSampler {
    seed: u64,
    draws: Vec<u64>,
    cached: Vec<Option<(u64, Vec<usize>)>>,
}

impl BatchSampler {
    pub fn new(seed: u64, n_domains: usize) -> Self {
        BatchSampler {
            seed,
            draws: vec![0; n_domains],
            cached: vec![None; n_domains],
        }
    }

    /// Restores a sampler from its persisted draw counters.
    pub fn from_state(seed: u64, draws: Vec<u64>) -> Self {
        let n = draws.len();
        BatchSampler {
            seed,
            draws,
            cached: vec![None; n],
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn draws(&self) -> &[u64] {
        &self.draws
    }

    fn next_index(&mut self, domain: usize, len: usize) -> usize {
        let draw = self.draws[domain];
        self.draws[domain] += 1;
        let epoch = draw / len as u64;
        let pos = (draw % len as u64) as usize;
        let stale = !matches!(&self.cached[domain], Some((e, p)) if *e == epoch && p.len() == len);
        if stale {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(((domain as u64) << 40) ^ epoch);
            let mut perm: Vec<usize> = (0..len).collect();
            perm.shuffle(&mut rng);
            self.cached[domain] = Some((epoch, perm));
        }
        self.cached[domain].as_ref().expect("just filled").1[pos]
    }

    /// Draws `n` training images of `domain` with the domain's label.
    pub fn sample_batch<T: Real>(
        &mut self,
        dataset: &MultiDomainDataset,
        domain: usize,
        n: usize,
    ) -> Result<(ImageBatch<T>, DomainLabel)> {
        if domain >= dataset.n_domains() || domain >= self.draws.len() {
            return Err(Error::UnknownDomain(domain));
        }
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let train = dataset.train(domain)?;
        let picks: Vec<&Sample> = (0..n).map(|_| &train[self.next_index(domain, train.len())]).collect();
        Ok((dataset.stack(&picks)?, dataset.label(domain)?))
    }
}
