use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `lr_min + (lr_max - lr_min) (1 + cos(pi epoch / total)) / 2`, with the
/// epoch clamped into `[0, total]`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_epochs == 0 {
        return lr_max;
    }
    let frac = epoch.min(total_epochs) as f64 / total_epochs as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moments are keyed by parameter name and created
/// lazily at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub(crate) moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every parameter that carries a gradient. `lr` maps a
    /// parameter name to its learning rate. Nothing is modified if any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor<T>)], lr: impl Fn(&str) -> f64) -> Result<()> {
        for (name, p) in params.iter() {
            if let Some(g) = p.grad() {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Divergence {
                        epoch: 0,
                        detail: format!("non-finite gradient in {name}[{i}]"),
                    });
                }
            }
        }
        self.step_count += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let eps = T::from_f64(eps);
        for (name, p) in params.iter_mut() {
            let len = p.len();
            let (value, grad) = p.value_and_grad_mut();
            let Some(grad) = grad else { continue };
            let step = T::from_f64(lr(name) / bc1);
            let inv_bc2 = T::from_f64(1.0 / bc2);
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); len], vec![T::zero(); len]));
            if m.len() != len {
                return Err(Error::shape(format!("optimizer state for {name} has the wrong size")));
            }
            for i in 0..len {
                let g = grad[i];
                m[i] = b1 * m[i] + ob1 * g;
                v[i] = b2 * v[i] + ob2 * g * g;
                value[i] = value[i] - step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }

    /// First and second moments for a parameter, if it has been stepped.
    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

impl Error {
    /// Attach the training epoch to a divergence raised below the loop.
    pub fn at_epoch(self, epoch: usize) -> Self {
        match self {
            Error::Divergence { detail, .. } => Error::Divergence { epoch, detail },
            other => other,
        }
    }
}
