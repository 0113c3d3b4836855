//! Central finite-difference checks of the hand-written reverse passes.

use rand::Rng;
use serde::Serialize;

use super::layers::{BatchNorm1d, Conv1d, Layer, Linear};
use super::tensor::Tensor;
use crate::error::Result;
use crate::seed;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of a scalar function at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub(crate) fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Values bounded away from zero, so a ReLU kink is never straddled.
fn away_from_zero(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect()
}

/// A random permutation of well-separated levels, so pooling maxima are
/// unique under the probe step.
fn distinct_values(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 + rng.random_range(0.2..0.8)) / n as f64).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    v
}

fn weighted_sum(layer: &Layer<f64>, x: &Tensor<f64>, train: bool, r: &[f64]) -> f64 {
    let y = layer.compute(x, train).expect("forward in gradient check").0;
    y.data().iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Relative error of input and parameter gradients for `L = sum(r * layer(x))`.
pub fn check_layer_once(layer: &Layer<f64>, x: &Tensor<f64>, train: bool, rng: &mut impl Rng) -> Result<f64> {
    let (y, cache) = layer.compute(x, train)?;
    let r = random_vec(rng, y.len());
    let mut work = layer.clone();
    for (_, p) in work.params_mut() {
        p.enable_grad();
        p.zero_grad();
    }
    let dx = work
        .backward(&cache, &Tensor::from_vec(y.shape(), r.clone())?, true)?
        .expect("input gradient requested");

    let mut analytic = dx.into_data();
    let mut numeric = numeric_grad(x.data(), |xs| {
        let probe = Tensor::from_vec(x.shape(), xs.to_vec()).expect("same shape");
        weighted_sum(layer, &probe, train, &r)
    });

    let n_params = layer.params().len();
    for j in 0..n_params {
        analytic.extend_from_slice(work.params()[j].1.grad().expect("enabled above"));
        let base = layer.params()[j].1.data().to_vec();
        let mut probe_layer = layer.clone();
        numeric.extend(numeric_grad(&base, |ps| {
            probe_layer.params_mut()[j].1.data_mut().copy_from_slice(ps);
            weighted_sum(&probe_layer, x, train, &r)
        }));
    }
    Ok(relative_error(&analytic, &numeric))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerCase {
    Conv1d,
    BatchNormTrain,
    BatchNormEval,
    Relu,
    Abs,
    MaxPool1d,
    AvgPool1d,
    AdaptiveAvgPool1d,
    Flatten,
    Linear,
    L2Normalize,
}

impl LayerCase {
    pub const ALL: [LayerCase; 11] = [
        LayerCase::Conv1d,
        LayerCase::BatchNormTrain,
        LayerCase::BatchNormEval,
        LayerCase::Relu,
        LayerCase::Abs,
        LayerCase::MaxPool1d,
        LayerCase::AvgPool1d,
        LayerCase::AdaptiveAvgPool1d,
        LayerCase::Flatten,
        LayerCase::Linear,
        LayerCase::L2Normalize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerCase::Conv1d => "conv1d",
            LayerCase::BatchNormTrain => "batchnorm1d_train",
            LayerCase::BatchNormEval => "batchnorm1d_eval",
            LayerCase::Relu => "relu",
            LayerCase::Abs => "abs",
            LayerCase::MaxPool1d => "maxpool1d",
            LayerCase::AvgPool1d => "avgpool1d",
            LayerCase::AdaptiveAvgPool1d => "adaptive_avg_pool1d",
            LayerCase::Flatten => "flatten",
            LayerCase::Linear => "linear",
            LayerCase::L2Normalize => "l2_normalize",
        }
    }

    /// A random instance: the layer, its input, and the mode flag.
    fn instance(self, rng: &mut impl Rng) -> Result<(Layer<f64>, Tensor<f64>, bool)> {
        let n = rng.random_range(2..=4);
        let c = rng.random_range(1..=4);
        let l = rng.random_range(2..=9);
        let x3 = |rng: &mut _, v: fn(&mut _, usize) -> Vec<f64>| Tensor::from_vec(&[n, c, l], v(rng, n * c * l));
        Ok(match self {
            LayerCase::Conv1d => {
                let k = [1, 3, 5][rng.random_range(0..3)];
                let cout = rng.random_range(1..=4);
                let mut conv = Conv1d::new(c, cout, k, k / 2, rng)?;
                conv.bias.data_mut().copy_from_slice(&random_vec(rng, cout));
                (Layer::Conv1d(conv), x3(rng, random_vec)?, true)
            }
            LayerCase::BatchNormTrain | LayerCase::BatchNormEval => {
                let mut bn = BatchNorm1d::new(c);
                bn.weight.data_mut().copy_from_slice(&random_vec(rng, c));
                bn.bias.data_mut().copy_from_slice(&random_vec(rng, c));
                let means = random_vec(rng, c);
                bn.running_mean.data_mut().copy_from_slice(&means);
                for v in bn.running_var.data_mut() {
                    *v = rng.random_range(0.2..2.0);
                }
                let train = self == LayerCase::BatchNormTrain;
                let x = if rng.random_bool(0.5) {
                    x3(rng, random_vec)?
                } else {
                    Tensor::from_vec(&[n, c], random_vec(rng, n * c))?
                };
                (Layer::BatchNorm1d(bn), x, train)
            }
            LayerCase::Relu => (Layer::Relu, x3(rng, away_from_zero)?, true),
            LayerCase::Abs => (Layer::Abs, x3(rng, away_from_zero)?, true),
            LayerCase::MaxPool1d => {
                let k = rng.random_range(1..=3).min(l);
                (Layer::MaxPool1d(k), x3(rng, distinct_values)?, true)
            }
            LayerCase::AvgPool1d => {
                let k = rng.random_range(1..=3).min(l);
                (Layer::AvgPool1d(k), x3(rng, random_vec)?, true)
            }
            LayerCase::AdaptiveAvgPool1d => {
                let out = rng.random_range(1..=l);
                (Layer::AdaptiveAvgPool1d(out), x3(rng, random_vec)?, true)
            }
            LayerCase::Flatten => (Layer::Flatten, x3(rng, random_vec)?, true),
            LayerCase::Linear => {
                let fin = rng.random_range(1..=6);
                let fout = rng.random_range(1..=6);
                let mut lin = Linear::new(fin, fout, rng)?;
                lin.bias.data_mut().copy_from_slice(&random_vec(rng, fout));
                (Layer::Linear(lin), Tensor::from_vec(&[n, fin], random_vec(rng, n * fin))?, true)
            }
            LayerCase::L2Normalize => {
                let d = rng.random_range(1..=6);
                (Layer::L2Normalize, Tensor::from_vec(&[n, d], away_from_zero(rng, n * d))?, true)
            }
        })
    }
}

/// Worst relative error of one layer type over `trials` random shapes.
pub fn check_layer(case: LayerCase, trials: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = seed::rng_for(seed, &[case as u64]);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (layer, x, train) = case.instance(&mut rng)?;
        worst = worst.max(check_layer_once(&layer, &x, train, &mut rng)?);
    }
    Ok(GradCheck {
        name: case.name().to_owned(),
        trials,
        max_rel_error: worst,
    })
}

pub fn layer_suite(trials: usize, seed: u64) -> Result<Vec<GradCheck>> {
    LayerCase::ALL.iter().map(|&c| check_layer(c, trials, seed)).collect()
}

/// Losses whose input gradients are checked alongside the layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossCase {
    /// Gradient with respect to the prediction; the target is held fixed.
    NegCosine,
    CrossEntropy,
}

impl LossCase {
    pub const ALL: [LossCase; 2] = [LossCase::NegCosine, LossCase::CrossEntropy];

    pub fn name(self) -> &'static str {
        match self {
            LossCase::NegCosine => "neg_cosine",
            LossCase::CrossEntropy => "cross_entropy",
        }
    }

    fn once(self, rng: &mut impl Rng) -> Result<f64> {
        let n = rng.random_range(1..=6);
        let d = rng.random_range(2..=9);
        let x = random_vec(rng, n * d);
        match self {
            LossCase::NegCosine => {
                let z = Tensor::from_vec(&[n, d], away_from_zero(rng, n * d))?;
                let p = Tensor::from_vec(&[n, d], away_from_zero(rng, n * d))?;
                let (_, g) = crate::simsiam::neg_cosine(&p, &z)?;
                let num = numeric_grad(p.data(), |v| {
                    let pv = Tensor::from_vec(&[n, d], v.to_vec()).expect("shape");
                    crate::simsiam::neg_cosine(&pv, &z).expect("finite").0
                });
                Ok(relative_error(g.data(), &num))
            }
            LossCase::CrossEntropy => {
                let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..d)).collect();
                let logits = Tensor::from_vec(&[n, d], x.iter().map(|v| 3.0 * v).collect())?;
                let (_, g) = crate::finetune::cross_entropy(&logits, &labels)?;
                let num = numeric_grad(logits.data(), |v| {
                    let lv = Tensor::from_vec(&[n, d], v.to_vec()).expect("shape");
                    crate::finetune::cross_entropy(&lv, &labels).expect("finite").0
                });
                Ok(relative_error(g.data(), &num))
            }
        }
    }
}

pub fn check_loss(case: LossCase, trials: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = seed::rng_for(seed, &[100 + case as u64]);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        worst = worst.max(case.once(&mut rng)?);
    }
    Ok(GradCheck {
        name: case.name().to_owned(),
        trials,
        max_rel_error: worst,
    })
}

/// Every layer followed by both losses.
pub fn full_suite(trials: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = layer_suite(trials, seed)?;
    for case in LossCase::ALL {
        out.push(check_loss(case, trials, seed)?);
    }
    Ok(out)
}
