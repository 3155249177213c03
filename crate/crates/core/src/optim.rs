//! ADAM with bias correction.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
        }
    }
}

/// First/second moment accumulators of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamMoments<T> {
    pub fn new(len: usize) -> Self {
        AdamMoments {
            m: alloc::vec![T::zero(); len],
            v: alloc::vec![T::zero(); len],
            step: 0,
        }
    }
}

/// One in-place ADAM step on `param`.
pub fn adam_update<T: Real>(param: &mut [T], grad: &[T], moments: &mut AdamMoments<T>, cfg: &AdamConfig) -> Result<()> {
    if param.len() != grad.len() || param.len() != moments.m.len() {
        return Err(Error::shape(&[param.len()], &[grad.len()]));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("gradient at element {i}"),
        });
    }
    moments.step += 1;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one = T::one();
    let t = moments.step as i32;
    let c1 = T::lit(1.0 - cfg.beta1.powi(t));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t));
    let lr = T::lit(cfg.learning_rate);
    let eps = T::lit(ADAM_EPS);
    for (((p, g), m), v) in param.iter_mut().zip(grad).zip(moments.m.iter_mut()).zip(moments.v.iter_mut()) {
        *m = b1 * *m + (one - b1) * *g;
        *v = b2 * *v + (one - b2) * *g * *g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let mut p = [1.0f64, -2.0, 3.5];
        let mut m = AdamMoments::new(3);
        adam_update(&mut p, &[0.0; 3], &mut m, &AdamConfig::default()).unwrap();
        assert_eq!(p, [1.0, -2.0, 3.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 after bias correction, so the step is lr / (1 + eps).
        let mut p = [1.0f64];
        let mut m = AdamMoments::new(1);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        adam_update(&mut p, &[1.0], &mut m, &cfg).unwrap();
        assert!((p[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
        assert!((p[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn identical_inputs_give_identical_outputs() {
        let run = || {
            let mut p = [0.3f32, -0.7];
            let mut m = AdamMoments::new(2);
            for g in [[0.1, 0.2], [-0.5, 0.05]] {
                adam_update(&mut p, &g, &mut m, &AdamConfig::default()).unwrap();
            }
            (p, m)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = [0.0f32];
        let mut m = AdamMoments::new(1);
        assert!(adam_update(&mut p, &[f32::INFINITY], &mut m, &AdamConfig::default()).is_err());
        assert_eq!(m.step, 0);
    }
}
