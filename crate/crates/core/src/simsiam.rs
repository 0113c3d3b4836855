//! SimSiam pretraining on residual-channel positive pairs.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chanest::{equalize_received, make_views, AugmentConfig, AugmentMode, EqualizedSample, MmseStatistics};
use crate::channel::ReceivedFrame;
use crate::error::{Error, Result};
use crate::metrics::{clustering_nmi, encode_samples, samples_to_tensor};
use crate::nn::{cosine_lr, Adam, AdamConfig, Model, ModelConfig, ModelState, Scalar, Tensor};
use crate::seed;

/// Norms below this are clamped, so a collapsed all-zero row contributes a
/// finite loss instead of failing the batch.
pub const COSINE_EPS: f64 = 1e-8;

/// `mean_i -(p_i . z_i) / (max(|p_i|, eps) max(|z_i|, eps))` and its gradient
/// with respect to `p`. `z` is a constant.
pub fn neg_cosine<T: Scalar>(p: &Tensor<T>, z: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if p.shape() != z.shape() || p.shape().len() != 2 {
        return Err(Error::shape(format!(
            "negative cosine of {:?} and {:?}",
            p.shape(),
            z.shape()
        )));
    }
    let n = p.shape()[0];
    if n == 0 {
        return Err(Error::shape("negative cosine of an empty batch"));
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for (i, (pr, zr)) in p.rows().zip(z.rows()).enumerate() {
        let pn = pr.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        let zn = zr.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        if !(pn.is_finite() && zn.is_finite()) {
            return Err(Error::Numeric(format!("non-finite row {i} in negative cosine")));
        }
        let (pc, zc) = (pn.max(COSINE_EPS), zn.max(COSINE_EPS));
        let cos = pr.iter().zip(zr).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>() / (pc * zc);
        total -= cos;
        // d(-cos)/dp = -(z_hat - cos * p_hat) / |p|; the clamped branch has a constant |p|.
        let clamped = pn < COSINE_EPS;
        grad.extend(pr.iter().zip(zr).map(|(a, b)| {
            let zh = b.as_f64() / zc;
            let ph = if clamped { 0.0 } else { a.as_f64() / pc };
            T::from_f64(-(zh - cos * ph) / pc * inv_n)
        }));
    }
    Ok((total * inv_n, Tensor::from_vec(p.shape(), grad)?))
}

/// Both halves of the symmetrized loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymmetrizedLoss {
    /// `D(p1, sg(z2))`.
    pub d1: f64,
    /// `D(p2, sg(z1))`.
    pub d2: f64,
}

impl SymmetrizedLoss {
    pub fn loss(&self) -> f64 {
        0.5 * (self.d1 + self.d2)
    }
}

/// `L = D(p1, sg(z2))/2 + D(p2, sg(z1))/2`. Gradients are accumulated into
/// the model; they reach the encoder only through the predictor branches.
pub fn symmetrized_loss<T: Scalar>(
    model: &mut Model<T>,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    train: bool,
) -> Result<SymmetrizedLoss> {
    if x1.shape() != x2.shape() {
        return Err(Error::shape("the two views differ in shape"));
    }
    let (z1, p1, t1) = model.forward_view(x1, train)?;
    let (z2, p2, t2) = model.forward_view(x2, train)?;
    let (d1, g1) = neg_cosine(&p1, &z2)?;
    let (d2, g2) = neg_cosine(&p2, &z1)?;
    let half = T::from_f64(0.5);
    let scale = |g: Tensor<T>| -> Result<Tensor<T>> {
        let shape = g.shape().to_vec();
        Tensor::from_vec(&shape, g.into_data().into_iter().map(|v| v * half).collect())
    };
    model.backward_view(t1, scale(g1)?)?;
    model.backward_view(t2, scale(g2)?)?;
    Ok(SymmetrizedLoss { d1, d2 })
}

/// Loss in evaluation mode, without gradients.
pub fn symmetrized_loss_eval<T: Scalar>(model: &Model<T>, x1: &Tensor<T>, x2: &Tensor<T>) -> Result<SymmetrizedLoss> {
    let view = |x: &Tensor<T>| -> Result<(Tensor<T>, Tensor<T>)> {
        let z = model.projector.infer(&model.encode(x)?)?;
        let p = model.predictor.infer(&z)?;
        Ok((z, p))
    };
    let (z1, p1) = view(x1)?;
    let (z2, p2) = view(x2)?;
    Ok(SymmetrizedLoss {
        d1: neg_cosine(&p1, &z2)?.0,
        d2: neg_cosine(&p2, &z1)?.0,
    })
}

/// Worst relative gap between the encoder gradient of the symmetrized loss
/// and a finite-difference gradient of the surrogate in which `z1`, `z2`
/// are frozen constants. Runs on a tiny 64-bit model.
pub fn stop_gradient_gap(rng_seed: u64) -> Result<f64> {
    use crate::nn::gradcheck::{numeric_grad, random_vec, relative_error};
    let cfg = ModelConfig::tiny(16);
    let mut model = Model::<f64>::new(cfg, rng_seed)?;
    let mut rng = seed::rng_for(rng_seed, &[seed::TAG_EVAL, 0x56]);
    let n = 6;
    let x1 = Tensor::from_vec(&[n, 2, 16], random_vec(&mut rng, n * 32))?;
    let x2 = Tensor::from_vec(&[n, 2, 16], random_vec(&mut rng, n * 32))?;

    model.zero_grad();
    symmetrized_loss(&mut model, &x1, &x2, true)?;
    let (z1, _, _) = model.clone().forward_view(&x1, true)?;
    let (z2, _, _) = model.clone().forward_view(&x2, true)?;

    let surrogate = |m: &Model<f64>| -> f64 {
        let mut m = m.clone();
        let (_, p1, _) = m.forward_view(&x1, true).expect("forward");
        let (_, p2, _) = m.forward_view(&x2, true).expect("forward");
        0.5 * (neg_cosine(&p1, &z2).expect("loss").0 + neg_cosine(&p2, &z1).expect("loss").0)
    };

    let names: Vec<String> = model
        .named_params()
        .iter()
        .filter(|(n, _)| n.starts_with("backbone."))
        .map(|(n, _)| n.clone())
        .collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for name in names {
        let (base, grad) = {
            let params = model.named_params();
            let t = params.iter().find(|(n, _)| *n == name).expect("listed").1;
            (t.data().to_vec(), t.grad().expect("trainable").to_vec())
        };
        analytic.extend(grad);
        let mut probe = model.clone();
        numeric.extend(numeric_grad(&base, |vals| {
            for (n, t) in probe.named_params_mut() {
                if n == name {
                    t.data_mut().copy_from_slice(vals);
                }
            }
            surrogate(&probe)
        }));
    }
    Ok(relative_error(&analytic, &numeric))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub augment: AugmentConfig,
    pub val_fraction: f64,
    pub mode: AugmentMode,
    pub seed: u64,
    /// Epochs at the end of training whose NMI is averaged.
    pub nmi_window: usize,
    pub nmi_restarts: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            lr_max: 1e-3,
            lr_min: 1e-4,
            augment: AugmentConfig::default(),
            val_fraction: 0.1,
            mode: AugmentMode::Mixed,
            seed: 0,
            nmi_window: 10,
            nmi_restarts: 10,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("pretraining batch size must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::config("pretraining needs at least one epoch"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("validation fraction must lie in (0, 1)"));
        }
        if !(self.lr_max > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::config("learning rates must satisfy 0 < lr_min <= lr_max"));
        }
        if let Some((lo, hi)) = self.augment.snr_range_db {
            if lo > hi {
                return Err(Error::config("augmentation SNR range is reversed"));
            }
        }
        if !(0.0..1.0).contains(&self.augment.mask_ratio) {
            return Err(Error::config("mask ratio must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
    pub nmi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub mode: AugmentMode,
    pub epochs: Vec<EpochRecord>,
    pub best_nmi_epoch: Option<usize>,
    pub best_nmi: Option<f64>,
    /// Mean NMI over the final `nmi_window` epochs.
    pub average_nmi: Option<f64>,
    pub nmi_window: usize,
    pub nmi_normalization: String,
    pub total_seconds: f64,
    pub train_packets: usize,
    pub val_packets: usize,
}

impl PretrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,seconds,lr,nmi\n");
        for r in &self.epochs {
            let nmi = r.nmi.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_loss, r.seconds, r.lr, nmi
            ));
        }
        s
    }
}

pub struct PretrainOutcome {
    pub state: ModelState,
    /// Model snapshot at the epoch with the highest validation NMI.
    pub best: Option<Model<f32>>,
    pub report: PretrainReport,
}

/// Deterministic split of `0..n` into (train, val) index lists.
pub fn split_indices(n: usize, val_fraction: f64, rng_seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng_for(rng_seed, &[seed::TAG_SPLIT]));
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn build_views(
    packets: &[ReceivedFrame],
    idx: &[usize],
    stats: &MmseStatistics,
    cfg: &PretrainConfig,
    seed_of: impl Fn(usize) -> u64 + Sync,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let estimators = cfg.mode.estimators();
    let pairs: Vec<(EqualizedSample, EqualizedSample)> = idx
        .par_iter()
        .map(|&i| make_views(&packets[i], stats, estimators, &cfg.augment, seed_of(i)))
        .collect::<Result<_>>()?;
    let (a, b): (Vec<&EqualizedSample>, Vec<&EqualizedSample>) = pairs.iter().map(|(a, b)| (a, b)).unzip();
    Ok((samples_to_tensor(&a)?, samples_to_tensor(&b)?))
}

/// Mean validation loss and, when labels exist, clustering NMI.
fn validate(
    model: &Model<f32>,
    packets: &[ReceivedFrame],
    val: &[usize],
    stats: &MmseStatistics,
    cfg: &PretrainConfig,
    epoch: usize,
) -> Result<(f64, Option<f64>)> {
    let mut total = 0.0;
    for chunk in val.chunks(cfg.batch_size) {
        let (x1, x2) = build_views(packets, chunk, stats, cfg, |i| {
            seed::derive(cfg.seed, &[seed::TAG_VALIDATION, i as u64])
        })?;
        total += symmetrized_loss_eval(model, &x1, &x2)?.loss() * chunk.len() as f64;
    }
    let val_loss = total / val.len() as f64;

    let labeled = val.iter().all(|&i| packets[i].device_id.is_some());
    let nmi = if labeled {
        let est = cfg.mode.feature_estimator();
        let samples: Vec<EqualizedSample> = val
            .par_iter()
            .map(|&i| equalize_received(&packets[i], est, stats))
            .collect::<Result<_>>()?;
        let fm = encode_samples(model, &samples)?;
        if fm.num_classes() >= 2 {
            Some(clustering_nmi(&fm, cfg.nmi_restarts, seed::derive(cfg.seed, &[epoch as u64]))?)
        } else {
            None
        }
    } else {
        None
    };
    Ok((val_loss, nmi))
}

/// Algorithm loop: per epoch, reshuffle, build a positive pair per packet,
/// take an Adam step per mini-batch on the symmetrized loss, then record
/// validation loss and NMI. `on_epoch` sees every epoch's model.
pub fn pretrain(
    packets: &[ReceivedFrame],
    cfg: &PretrainConfig,
    stats: &MmseStatistics,
    model_cfg: ModelConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Model<f32>) -> Result<()>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if packets.len() < 3 {
        return Err(Error::config("pretraining needs at least three packets"));
    }
    let (train, val) = split_indices(packets.len(), cfg.val_fraction, cfg.seed);
    if train.len() < 2 {
        return Err(Error::config("training split is too small for batch statistics"));
    }
    let mut model = Model::<f32>::new(model_cfg, cfg.seed)?;
    let mut adam = Adam::new(AdamConfig::default());
    let mut records: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Model<f32>)> = None;
    let started = Instant::now();

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
        let mut order = train.clone();
        order.shuffle(&mut seed::rng_for(cfg.seed, &[seed::TAG_SHUFFLE, epoch as u64]));

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            // Batch statistics need at least two rows.
            if batch.len() < 2 {
                continue;
            }
            let (x1, x2) = build_views(packets, batch, stats, cfg, |i| {
                seed::derive(cfg.seed, &[seed::TAG_AUGMENT, epoch as u64, i as u64])
            })?;
            model.zero_grad();
            let loss = symmetrized_loss(&mut model, &x1, &x2, true)?.loss();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("loss {loss}"),
                });
            }
            let mut params: Vec<_> = model
                .named_params_mut()
                .into_iter()
                .filter(|(n, _)| !n.starts_with("classifier."))
                .collect();
            adam.step(&mut params, |_| lr).map_err(|e| e.at_epoch(epoch))?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        if !model.all_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: "non-finite parameters".into(),
            });
        }
        let (val_loss, nmi) = validate(&model, packets, &val, stats, cfg, epoch)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            val_loss,
            seconds: t0.elapsed().as_secs_f64(),
            nmi,
        };
        if let Some(v) = nmi {
            if best.as_ref().is_none_or(|b| v > b.1) {
                best = Some((epoch, v, model.clone()));
            }
        }
        on_epoch(&record, &model)?;
        records.push(record);
    }

    let window: Vec<f64> = records
        .iter()
        .rev()
        .take(cfg.nmi_window.max(1))
        .filter_map(|r| r.nmi)
        .collect();
    let average_nmi = (!window.is_empty()).then(|| window.iter().sum::<f64>() / window.len() as f64);
    let report = PretrainReport {
        mode: cfg.mode,
        best_nmi_epoch: best.as_ref().map(|b| b.0),
        best_nmi: best.as_ref().map(|b| b.1),
        average_nmi,
        nmi_window: cfg.nmi_window,
        nmi_normalization: "geometric".into(),
        total_seconds: started.elapsed().as_secs_f64(),
        train_packets: train.len(),
        val_packets: val.len(),
        epochs: records,
    };
    let mut state = ModelState::new(model, cfg.seed);
    state.optimizer = Some(adam);
    state.epoch = cfg.epochs;
    state.rng_state.epoch = cfg.epochs;
    Ok(PretrainOutcome {
        state,
        best: best.map(|b| b.2),
        report,
    })
}
