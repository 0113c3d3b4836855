//! Few-label adaptation: a classifier head on the pretrained encoder,
//! cross-entropy training with a slower backbone, early stopping, and the
//! equal-weight LS/MMSE decision.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chanest::{equalize_received, make_views, AugmentConfig, EqualizedSample, Estimator, MmseStatistics};
use crate::channel::ReceivedFrame;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, confusion, per_class_accuracy, samples_to_tensor};
use crate::nn::{Adam, AdamConfig, Model, ModelState, Scalar, Tensor};
use crate::seed;

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    logits.expect_rank(2, "softmax")?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.rows() {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| T::from_f64(e / s)));
    }
    Tensor::from_vec(logits.shape(), out)
}

/// Mean `-log softmax(z)[label]` and its gradient `(softmax(z) - onehot) / N`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    logits.expect_rank(2, "cross_entropy")?;
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n || n == 0 {
        return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::shape(format!("label {bad} out of range for {c} classes")));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * c);
    for (row, &label) in logits.rows().zip(labels) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
        let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
        loss += lse - row[label].as_f64();
        grad.extend(row.iter().enumerate().map(|(j, v)| {
            let p = (v.as_f64() - lse).exp();
            T::from_f64((p - if j == label { 1.0 } else { 0.0 }) * inv_n)
        }));
    }
    Ok((loss * inv_n, Tensor::from_vec(logits.shape(), grad)?))
}

/// Average two probability vectors and pick the winner, lowest index on ties.
pub fn fuse_probabilities(a: &[f64], b: &[f64]) -> Result<(usize, Vec<f64>)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("probability vectors differ in length"));
    }
    let fused: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
    let mut best = 0;
    for (i, &p) in fused.iter().enumerate() {
        if p > fused[best] {
            best = i;
        }
    }
    Ok((best, fused))
}

fn class_probabilities(model: &Model<f32>, samples: &[&EqualizedSample], chunk: usize) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<Vec<Vec<f64>>> = samples
        .par_chunks(chunk.max(1))
        .map(|chunk| {
            let probs = softmax(&model.classify(&samples_to_tensor(chunk)?)?)?;
            Ok(probs
                .rows()
                .map(|r| r.iter().map(|&v| f64::from(v)).collect())
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Equal-weight fusion of the LS- and MMSE-equalized views of each packet,
/// evaluated `chunk` packets per forward pass.
pub fn hybrid_predict_samples(
    model: &Model<f32>,
    ls: &[&EqualizedSample],
    mmse: &[&EqualizedSample],
    chunk: usize,
) -> Result<Vec<(usize, Vec<f64>)>> {
    if ls.len() != mmse.len() {
        return Err(Error::shape("LS and MMSE view counts differ"));
    }
    let pl = class_probabilities(model, ls, chunk)?;
    let pm = class_probabilities(model, mmse, chunk)?;
    pl.iter().zip(&pm).map(|(a, b)| fuse_probabilities(a, b)).collect()
}

/// Predicted device and fused probabilities for one received packet.
pub fn hybrid_predict(model: &Model<f32>, packet: &ReceivedFrame, stats: &MmseStatistics) -> Result<(usize, Vec<f64>)> {
    let ls = equalize_received(packet, Estimator::Ls, stats)?;
    let mmse = equalize_received(packet, Estimator::Mmse, stats)?;
    Ok(hybrid_predict_samples(model, &[&ls], &[&mmse], 1)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once `patience` consecutive epochs fail to beat the best metric.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if self.best.is_none_or(|(_, b)| metric > b) {
            self.best = Some((epoch, metric));
            self.since_best = 0;
            return StopDecision::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub finetune_batch: usize,
    pub val_batch: usize,
    pub head_lr: f64,
    pub backbone_lr_ratio: f64,
    pub patience: usize,
    pub label_fraction: f64,
    pub max_epochs: usize,
    pub augment_snr_range_db: Option<(i32, i32)>,
    /// Use running batch-norm statistics in the backbone while training.
    pub freeze_bn_stats: bool,
    /// Validation packets per class used for early stopping; `None` uses
    /// the whole validation split. Final metrics always use all of it.
    pub monitor_per_class: Option<usize>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            finetune_batch: 10,
            val_batch: 512,
            head_lr: 1e-3,
            backbone_lr_ratio: 0.01,
            patience: 30,
            label_fraction: 0.01,
            max_epochs: 200,
            augment_snr_range_db: Some(crate::chanest::DEFAULT_SNR_RANGE_DB),
            freeze_bn_stats: false,
            monitor_per_class: None,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction < 1.0) {
            return Err(Error::config("label fraction must lie in (0, 1)"));
        }
        if self.finetune_batch < 2 || self.val_batch == 0 {
            return Err(Error::config("fine-tune batch must be at least 2 and validation batch positive"));
        }
        if !(self.head_lr > 0.0 && self.backbone_lr_ratio >= 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be positive"));
        }
        Ok(())
    }
}

/// Per class, `round(fraction * count)` packets (at least one) go to the
/// labeled split; the rest validate. Both lists are sorted.
pub fn stratified_split(labels: &[usize], fraction: f64, rng_seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut labeled = Vec::new();
    let mut val = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut seed::rng_for(rng_seed, &[seed::TAG_SPLIT, c as u64]));
        let take = ((idx.len() as f64 * fraction).round() as usize).max(1);
        if take >= idx.len() {
            return Err(Error::config(format!("class {c} has no packets left for validation")));
        }
        labeled.extend_from_slice(&idx[..take]);
        val.extend_from_slice(&idx[take..]);
    }
    if labeled.is_empty() || val.is_empty() {
        return Err(Error::config("empty fine-tune split"));
    }
    labeled.sort_unstable();
    val.sort_unstable();
    Ok((labeled, val))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub epochs: Vec<FinetuneEpoch>,
    pub best_epoch: usize,
    /// Monitored accuracy at the best epoch.
    pub best_val_accuracy: f64,
    /// Hybrid accuracy of the restored model on the full validation split.
    pub final_accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
    pub labeled_packets: usize,
    pub val_packets: usize,
    pub monitor_packets: usize,
    pub total_seconds: f64,
}

impl FinetuneReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_accuracy,seconds\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_accuracy, e.seconds));
        }
        s
    }

    pub fn confusion_csv(&self) -> String {
        let c = self.confusion.len();
        let mut s = String::from("truth");
        for j in 0..c {
            s.push_str(&format!(",pred_{j}"));
        }
        s.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            s.push_str(&i.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

pub struct FinetuneOutcome {
    pub state: ModelState,
    pub report: FinetuneReport,
    pub labeled: Vec<usize>,
    pub val: Vec<usize>,
}

/// LS and MMSE equalizations of packets as received.
pub fn equalize_both(
    packets: &[ReceivedFrame],
    idx: &[usize],
    stats: &MmseStatistics,
) -> Result<(Vec<EqualizedSample>, Vec<EqualizedSample>)> {
    let pairs: Vec<(EqualizedSample, EqualizedSample)> = idx
        .par_iter()
        .map(|&i| {
            Ok((
                equalize_received(&packets[i], Estimator::Ls, stats)?,
                equalize_received(&packets[i], Estimator::Mmse, stats)?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

/// Hybrid accuracy and predictions over pre-equalized views.
pub fn hybrid_accuracy(
    model: &Model<f32>,
    ls: &[EqualizedSample],
    mmse: &[EqualizedSample],
    labels: &[usize],
    chunk: usize,
) -> Result<(f64, Vec<usize>)> {
    let lr: Vec<&EqualizedSample> = ls.iter().collect();
    let mr: Vec<&EqualizedSample> = mmse.iter().collect();
    let preds: Vec<usize> = hybrid_predict_samples(model, &lr, &mr, chunk)?.into_iter().map(|p| p.0).collect();
    Ok((accuracy(&preds, labels)?, preds))
}

fn labels_of(packets: &[ReceivedFrame]) -> Result<Vec<usize>> {
    packets
        .iter()
        .map(|p| p.device_id.ok_or_else(|| Error::config("fine-tuning needs labeled packets")))
        .collect()
}

/// Train a fresh classifier head on `backbone`'s encoder with the labeled
/// split, early-stopping on hybrid validation accuracy, and restore the
/// best epoch.
pub fn finetune(
    backbone: &Model<f32>,
    packets: &[ReceivedFrame],
    cfg: &FinetuneConfig,
    stats: &MmseStatistics,
    num_classes: usize,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let labels = labels_of(packets)?;
    if labels.iter().any(|&l| l >= num_classes) {
        return Err(Error::config("packet label exceeds the class count"));
    }
    let (labeled, val) = stratified_split(&labels, cfg.label_fraction, cfg.seed)?;
    let monitor: Vec<usize> = match cfg.monitor_per_class {
        None => val.clone(),
        Some(k) => {
            let mut per = vec![0usize; num_classes];
            val.iter()
                .copied()
                .filter(|&i| {
                    per[labels[i]] += 1;
                    per[labels[i]] <= k
                })
                .collect()
        }
    };

    let mut model = backbone.clone();
    model.attach_classifier(num_classes, cfg.seed)?;
    let (mon_ls, mon_mmse) = equalize_both(packets, &monitor, stats)?;
    let mon_labels: Vec<usize> = monitor.iter().map(|&i| labels[i]).collect();

    let mut adam = Adam::new(AdamConfig::default());
    let aug = AugmentConfig {
        snr_range_db: cfg.augment_snr_range_db,
        mask_ratio: 0.0,
    };
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_model = model.clone();
    let mut epochs = Vec::new();
    let started = Instant::now();
    for epoch in 0..cfg.max_epochs {
        let t0 = Instant::now();
        // Each labeled packet yields an LS and an MMSE view with fresh noise.
        let views: Vec<(EqualizedSample, EqualizedSample)> = labeled
            .par_iter()
            .map(|&i| {
                let s = seed::derive(cfg.seed, &[seed::TAG_AUGMENT, epoch as u64, i as u64]);
                make_views(&packets[i], stats, (Estimator::Ls, Estimator::Mmse), &aug, s)
            })
            .collect::<Result<_>>()?;
        let mut rows: Vec<&EqualizedSample> = views.iter().flat_map(|(a, b)| [a, b]).collect();
        rows.shuffle(&mut seed::rng_for(cfg.seed, &[seed::TAG_SHUFFLE, epoch as u64]));

        let mut loss_sum = 0.0;
        let mut seen = 0;
        for batch in rows.chunks(cfg.finetune_batch) {
            if batch.len() < 2 {
                continue;
            }
            let x = samples_to_tensor(batch)?;
            let y: Vec<usize> = batch.iter().map(|s| s.label.expect("labeled")).collect();
            model.zero_grad();
            let (logits, tapes) = model.forward_classifier(&x, !cfg.freeze_bn_stats)?;
            let (loss, grad) = cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("loss {loss}"),
                });
            }
            model.backward_classifier(tapes, grad)?;
            let mut params: Vec<_> = model
                .named_params_mut()
                .into_iter()
                .filter(|(n, _)| n.starts_with("backbone.") || n.starts_with("classifier."))
                .collect();
            let (head, body) = (cfg.head_lr, cfg.head_lr * cfg.backbone_lr_ratio);
            adam.step(&mut params, |n| if n.starts_with("backbone.") { body } else { head })
                .map_err(|e| e.at_epoch(epoch))?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let (acc, _) = hybrid_accuracy(&model, &mon_ls, &mon_mmse, &mon_labels, cfg.val_batch)?;
        epochs.push(FinetuneEpoch {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val_accuracy: acc,
            seconds: t0.elapsed().as_secs_f64(),
        });
        match stopper.observe(epoch, acc) {
            StopDecision::Improved => best_model = model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }

    let (best_epoch, best_val_accuracy) = stopper.best().expect("at least one epoch");
    let (val_ls, val_mmse) = equalize_both(packets, &val, stats)?;
    let val_labels: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
    let (final_accuracy, preds) = hybrid_accuracy(&best_model, &val_ls, &val_mmse, &val_labels, cfg.val_batch)?;
    let conf = confusion(&preds, &val_labels, num_classes)?;
    let report = FinetuneReport {
        best_epoch,
        best_val_accuracy,
        final_accuracy,
        per_class_accuracy: per_class_accuracy(&conf),
        confusion: conf,
        labeled_packets: labeled.len(),
        val_packets: val.len(),
        monitor_packets: monitor.len(),
        total_seconds: started.elapsed().as_secs_f64(),
        epochs,
    };
    let mut state = ModelState::new(best_model, cfg.seed);
    state.epoch = best_epoch + 1;
    state.rng_state.epoch = best_epoch + 1;
    Ok(FinetuneOutcome {
        state,
        report,
        labeled,
        val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{numeric_grad, random_vec, relative_error, GRAD_TOLERANCE};

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&t(&[1, 7], vec![0.0; 7])).unwrap();
        assert!(u.data().iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-12));
        let a = softmax(&t(&[1, 3], vec![1.0, -2.0, 0.5])).unwrap();
        let b = softmax(&t(&[1, 3], vec![101.0, 98.0, 100.5])).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = softmax(&t(&[1, 2], vec![1.0, 0.0])).unwrap();
        assert!((c.data()[0] - 0.7311).abs() < 1e-4 && (c.data()[1] - 0.2689).abs() < 1e-4);
        let big = softmax(&t(&[1, 2], vec![1e4, -1e4])).unwrap();
        assert!(big.all_finite());
    }

    #[test]
    fn cross_entropy_cases() {
        let (l, _) = cross_entropy(&t(&[2, 7], vec![0.0; 14]), &[0, 6]).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
        let (l, _) = cross_entropy(&t(&[1, 3], vec![60.0, 0.0, 0.0]), &[0]).unwrap();
        assert!(l < 1e-20);
        assert!(cross_entropy(&t(&[1, 3], vec![0.0; 3]), &[3]).is_err());
        let mut rng = seed::rng(2);
        for _ in 0..20 {
            let n = rand::Rng::random_range(&mut rng, 1..5);
            let c = rand::Rng::random_range(&mut rng, 2..8);
            let z = t(&[n, c], random_vec(&mut rng, n * c));
            let y: Vec<usize> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 0..c)).collect();
            let (_, g) = cross_entropy(&z, &y).unwrap();
            let num = numeric_grad(z.data(), |v| cross_entropy(&t(&[n, c], v.to_vec()), &y).unwrap().0);
            assert!(relative_error(g.data(), &num) < GRAD_TOLERANCE);
        }
    }

    #[test]
    fn fusion_arithmetic_and_symmetry() {
        let (c, p) = fuse_probabilities(&[0.6, 0.4], &[0.2, 0.8]).unwrap();
        assert_eq!(c, 1);
        assert!((p[0] - 0.4).abs() < 1e-12 && (p[1] - 0.6).abs() < 1e-12);
        assert_eq!(fuse_probabilities(&[0.2, 0.8], &[0.6, 0.4]).unwrap(), (c, p));
        assert_eq!(fuse_probabilities(&[0.9, 0.1], &[0.7, 0.3]).unwrap().0, 0);
        assert_eq!(fuse_probabilities(&[0.5, 0.5], &[0.5, 0.5]).unwrap().0, 0);
    }

    #[test]
    fn early_stopping_contract() {
        let mut s = EarlyStopping::new(30);
        let mut ran = 0;
        for epoch in 0..1000 {
            ran += 1;
            if s.observe(epoch, 0.5) == StopDecision::Stop {
                break;
            }
        }
        assert_eq!(ran, 31);
        assert_eq!(s.best(), Some((0, 0.5)));

        let mut s = EarlyStopping::new(2);
        assert_eq!(s.observe(0, 0.1), StopDecision::Improved);
        assert_eq!(s.observe(1, 0.3), StopDecision::Improved);
        assert_eq!(s.observe(2, 0.2), StopDecision::Continue);
        assert_eq!(s.observe(3, 0.3), StopDecision::Stop);
        assert_eq!(s.best(), Some((1, 0.3)));
    }

    #[test]
    fn split_takes_ten_per_class() {
        let labels: Vec<usize> = (0..7000).map(|i| i % 7).collect();
        let (a, b) = stratified_split(&labels, 0.01, 3).unwrap();
        assert_eq!((a.len(), b.len()), (70, 6930));
        for c in 0..7 {
            assert_eq!(a.iter().filter(|&&i| labels[i] == c).count(), 10);
        }
        assert_eq!(stratified_split(&labels, 0.01, 3).unwrap(), (a, b));
        assert!(stratified_split(&[0, 1], 0.5, 1).is_err());
    }

    #[test]
    fn layerwise_learning_rates() {
        use crate::nn::ModelConfig;
        let mut model = Model::<f32>::new(ModelConfig::tiny(16), 1).unwrap();
        model.attach_classifier(3, 1).unwrap();
        let before = model.clone();
        for (_, p) in model.named_params_mut() {
            p.grad_mut().unwrap().iter_mut().for_each(|g| *g = 1.0);
        }
        let mut adam = Adam::new(AdamConfig::default());
        let mut params: Vec<_> = model
            .named_params_mut()
            .into_iter()
            .filter(|(n, _)| n.starts_with("backbone.") || n.starts_with("classifier."))
            .collect();
        adam.step(&mut params, |n| if n.starts_with("backbone.") { 1e-5 } else { 1e-3 })
            .unwrap();
        let delta = |prefix: &str| -> f64 {
            let (a, b) = (before.named_params(), model.named_params());
            let d: Vec<f64> = a
                .iter()
                .zip(&b)
                .filter(|(x, _)| x.0.starts_with(prefix))
                .flat_map(|(x, y)| x.1.data().iter().zip(y.1.data()).map(|(u, v)| f64::from((u - v).abs())))
                .collect();
            d.iter().sum::<f64>() / d.len() as f64
        };
        let ratio = delta("backbone.") / delta("classifier.");
        assert!((ratio - 0.01).abs() < 1e-3, "{ratio}");
        assert_eq!(delta("projector."), 0.0);
    }
}
