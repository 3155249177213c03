//! Loss terms and the weighted objective, each paired with its gradient.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before `log`.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Reconstruction.
    pub alpha0: f64,
    /// Latent consistency.
    pub alpha1: f64,
    /// Classification.
    pub alpha2: f64,
    /// Cycle consistency.
    pub alpha3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha0: 10.0,
            alpha1: 0.1,
            alpha2: 0.1,
            alpha3: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha0", self.alpha0),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Discriminator update.
    D,
    /// Encoder/generator update.
    EG,
}

/// Norm used by the latent-consistency and cycle terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    L1,
    L2,
}

/// Per-term losses of one phase. Terms not used by a phase stay 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub phase: Phase,
    pub gan_x: f64,
    pub gan_y: f64,
    pub rec: f64,
    pub lcl: f64,
    pub cls_real: f64,
    pub cls_fake: f64,
    pub cyc: f64,
    pub composite: f64,
}

impl LossBreakdown {
    pub fn zero(phase: Phase) -> Self {
        LossBreakdown {
            phase,
            gan_x: 0.0,
            gan_y: 0.0,
            rec: 0.0,
            lcl: 0.0,
            cls_real: 0.0,
            cls_fake: 0.0,
            cyc: 0.0,
            composite: 0.0,
        }
    }

    pub fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("gan_x", self.gan_x),
            ("gan_y", self.gan_y),
            ("rec", self.rec),
            ("lcl", self.lcl),
            ("cls_real", self.cls_real),
            ("cls_fake", self.cls_fake),
            ("cyc", self.cyc),
            ("composite", self.composite),
        ]
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

fn check_prob<T: Real>(op: &'static str, v: T) -> Result<()> {
    if !v.is_finite() || v < T::zero() || v > T::one() {
        return Err(Error::Domain {
            op,
            detail: format!("probability {v:?} outside [0, 1]"),
        });
    }
    Ok(())
}

fn clamp_prob<T: Real>(v: T) -> (T, bool) {
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    if v < lo {
        (lo, true)
    } else if v > hi {
        (hi, true)
    } else {
        (v, false)
    }
}

/// Adversarial loss on discriminator realness scores.
///
/// D phase: `-[mean log(real) + mean log(1 - fake)]`.
/// EG phase: `-mean log(fake)` (non-saturating); `real` is ignored.
pub fn gan_loss<T: Real>(real: &[T], fake: &[T], phase: Phase) -> Result<T> {
    Ok(gan_loss_with_grad(real, fake, phase)?.0)
}

/// [`gan_loss`] plus its gradient w.r.t. `(real, fake)` scores.
pub fn gan_loss_with_grad<T: Real>(real: &[T], fake: &[T], phase: Phase) -> Result<(T, Vec<T>, Vec<T>)> {
    if fake.is_empty() || (phase == Phase::D && real.is_empty()) {
        return Err(Error::EmptyBatch);
    }
    for v in real.iter().chain(fake) {
        check_prob("gan_loss", *v)?;
    }
    let nf = T::lit(fake.len() as f64);
    match phase {
        Phase::D => {
            let nr = T::lit(real.len() as f64);
            let mut loss = T::zero();
            let mut d_real = Vec::with_capacity(real.len());
            for r in real {
                let (c, clamped) = clamp_prob(*r);
                loss -= c.ln() / nr;
                d_real.push(if clamped { T::zero() } else { -T::one() / (nr * c) });
            }
            let mut d_fake = Vec::with_capacity(fake.len());
            for f in fake {
                let (c, clamped) = clamp_prob(*f);
                loss -= (T::one() - c).ln() / nf;
                d_fake.push(if clamped {
                    T::zero()
                } else {
                    T::one() / (nf * (T::one() - c))
                });
            }
            Ok((loss, d_real, d_fake))
        }
        Phase::EG => {
            let mut loss = T::zero();
            let mut d_fake = Vec::with_capacity(fake.len());
            for f in fake {
                let (c, clamped) = clamp_prob(*f);
                loss -= c.ln() / nf;
                d_fake.push(if clamped { T::zero() } else { -T::one() / (nf * c) });
            }
            Ok((loss, alloc::vec![T::zero(); real.len()], d_fake))
        }
    }
}

fn check_same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// Mean over all elements of `(a - b)²`.
pub fn reconstruction_loss<T: Real>(x: &Tensor<T>, x_rec: &Tensor<T>) -> Result<T> {
    distance(x, x_rec, Distance::L2)
}

/// Mean absolute difference.
pub fn latent_consistency_loss<T: Real>(z: &Tensor<T>, z_roundtrip: &Tensor<T>) -> Result<T> {
    distance(z, z_roundtrip, Distance::L1)
}

/// Mean absolute difference.
pub fn cycle_consistency_loss<T: Real>(x: &Tensor<T>, x_cycled: &Tensor<T>) -> Result<T> {
    distance(x, x_cycled, Distance::L1)
}

/// Element-mean distance between two equally shaped tensors.
pub fn distance<T: Real>(a: &Tensor<T>, b: &Tensor<T>, kind: Distance) -> Result<T> {
    check_same_shape(a, b)?;
    let n = T::lit(a.len() as f64);
    let total: T = match kind {
        Distance::L1 => a.data().iter().zip(b.data()).map(|(x, y)| (*x - *y).abs()).sum(),
        Distance::L2 => a.data().iter().zip(b.data()).map(|(x, y)| (*x - *y) * (*x - *y)).sum(),
    };
    Ok(total / n)
}

/// Gradient of [`distance`] w.r.t. `b`, scaled by `weight`. The gradient
/// w.r.t. `a` is its negation. `sign(0)` is taken as 0.
pub fn distance_grad<T: Real>(a: &Tensor<T>, b: &Tensor<T>, kind: Distance, weight: T) -> Result<Tensor<T>> {
    check_same_shape(a, b)?;
    let scale = weight / T::lit(a.len() as f64);
    let two = T::lit(2.0);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *y - *x;
            match kind {
                Distance::L1 => {
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                }
                Distance::L2 => two * d * scale,
            }
        })
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// `-mean log P(label | image)` over row-major `n × n_domains` posteriors.
pub fn classification_loss<T: Real>(posteriors: &[T], labels: &[usize], n_domains: usize) -> Result<T> {
    Ok(classification_loss_with_grad(posteriors, labels, n_domains)?.0)
}

/// [`classification_loss`] plus its gradient w.r.t. the posteriors.
pub fn classification_loss_with_grad<T: Real>(
    posteriors: &[T],
    labels: &[usize],
    n_domains: usize,
) -> Result<(T, Vec<T>)> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if posteriors.len() != labels.len() * n_domains {
        return Err(Error::shape(&[labels.len(), n_domains], &[posteriors.len()]));
    }
    let n = T::lit(labels.len() as f64);
    let mut loss = T::zero();
    let mut grad = alloc::vec![T::zero(); posteriors.len()];
    for (s, &label) in labels.iter().enumerate() {
        if label >= n_domains {
            return Err(Error::InvalidLabel { label, n_domains });
        }
        let row = &posteriors[s * n_domains..(s + 1) * n_domains];
        for v in row {
            check_prob("classification_loss", *v)?;
        }
        let (p, clamped) = clamp_prob(row[label]);
        loss -= p.ln() / n;
        if !clamped {
            grad[s * n_domains + label] = -T::one() / (n * p);
        }
    }
    Ok((loss, grad))
}

/// Weighted objective of one phase.
///
/// D: `gan_x + gan_y + α₂·cls_real`.
/// EG: `gan_x + gan_y + α₀·rec + α₁·lcl + α₂·cls_fake + α₃·cyc`.
pub fn composite_loss(terms: &LossBreakdown, weights: &LossWeights) -> f64 {
    let gan = terms.gan_x + terms.gan_y;
    match terms.phase {
        Phase::D => gan + weights.alpha2 * terms.cls_real,
        Phase::EG => {
            gan + weights.alpha0 * terms.rec
                + weights.alpha1 * terms.lcl
                + weights.alpha2 * terms.cls_fake
                + weights.alpha3 * terms.cyc
        }
    }
}
