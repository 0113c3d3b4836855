use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm1d, Conv1d, Layer, Linear, Sequential, Tape};
use super::tensor::{Scalar, Tensor};
use crate::chanest::{SAMPLE_COLS, SAMPLE_ROWS};
use crate::error::{Error, Result};
use crate::seed;

/// Downsampling at the end of each backbone block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    /// Preserves mean amplitudes, where the IQ gain ratio lives; max pooling
    /// tracks noise peaks instead.
    #[default]
    Avg,
}

/// Convolutional encoder layout: an optional constellation fold, then
/// `widths.len()` blocks of conv -> batchnorm -> ReLU -> pool, then global
/// average pooling, flattening and L2 normalization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub input_length: usize,
    pub widths: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub pool_factors: Vec<usize>,
    pub pooling: PoolKind,
    /// Take `|I|, |Q|` of each equalized symbol before the first block. This
    /// strips the random QPSK payload, which otherwise dominates what the
    /// two views of a packet have in common, and keeps the I/Q gain ratio.
    pub fold_constellation: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: SAMPLE_ROWS,
            input_length: SAMPLE_COLS,
            widths: vec![64, 128, 320, 512],
            kernel_sizes: vec![3; 4],
            pool_factors: vec![2; 4],
            pooling: PoolKind::default(),
            fold_constellation: true,
        }
    }
}

impl BackboneConfig {
    pub fn embedding_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.widths.len();
        if n == 0 || self.kernel_sizes.len() != n || self.pool_factors.len() != n {
            return Err(Error::config(
                "backbone needs matching, non-empty widths, kernel_sizes and pool_factors",
            ));
        }
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::config("backbone channel counts must be positive"));
        }
        if self.kernel_sizes.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::config("kernel sizes must be odd so padding preserves length"));
        }
        if self.pool_factors.contains(&0) {
            return Err(Error::config("pool factors must be positive"));
        }
        let reduced = self.pool_factors.iter().try_fold(self.input_length, |len, &p| {
            (len / p > 0).then_some(len / p)
        });
        if reduced.is_none() {
            return Err(Error::config(format!(
                "input length {} collapses to zero under pooling",
                self.input_length
            )));
        }
        Ok(())
    }

    /// Trainable parameter count of the backbone this config builds.
    pub fn param_count(&self) -> usize {
        let mut prev = self.in_channels;
        let mut total = 0;
        for (&w, &k) in self.widths.iter().zip(&self.kernel_sizes) {
            total += w * prev * k + w + 2 * w;
            prev = w;
        }
        total
    }

    /// Parameter bytes at 32-bit precision, in MB (10^6 bytes).
    pub fn footprint_mb(&self) -> f64 {
        (self.param_count() * 4) as f64 / 1e6
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub projector_hidden: usize,
    pub projector_out: usize,
    pub predictor_hidden: usize,
    pub classifier_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            projector_hidden: 512,
            projector_out: 512,
            predictor_hidden: 128,
            classifier_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if [self.projector_hidden, self.projector_out, self.predictor_hidden, self.classifier_hidden].contains(&0) {
            return Err(Error::config("head widths must be positive"));
        }
        Ok(())
    }

    /// A few-hundred-parameter model for gradient checks and smoke tests.
    pub fn tiny(input_length: usize) -> Self {
        Self {
            backbone: BackboneConfig {
                in_channels: SAMPLE_ROWS,
                input_length,
                widths: vec![3, 4],
                kernel_sizes: vec![3, 3],
                pool_factors: vec![2, 2],
                pooling: PoolKind::Max,
                fold_constellation: false,
            },
            projector_hidden: 5,
            projector_out: 4,
            predictor_hidden: 6,
            classifier_hidden: 5,
        }
    }
}

/// Encoder, SimSiam projection and prediction heads, and an optional
/// classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub backbone: Sequential<T>,
    pub projector: Sequential<T>,
    pub predictor: Sequential<T>,
    pub classifier: Option<Sequential<T>>,
}

/// Forward record of encoder then classifier head.
pub type ClassifierTape<T> = (Tape<T>, Tape<T>);

/// Forward record of one view through encoder, projector and predictor.
pub struct ViewTape<T> {
    backbone: Tape<T>,
    projector: Tape<T>,
    predictor: Tape<T>,
}

const PARTS: [&str; 4] = ["backbone", "projector", "predictor", "classifier"];

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let bb = &config.backbone;
        let mut rng = seed::rng_for(seed, &[seed::TAG_INIT, 0]);
        let mut layers = Vec::new();
        if bb.fold_constellation {
            layers.push(Layer::Abs);
        }
        let mut prev = bb.in_channels;
        for ((&w, &k), &p) in bb.widths.iter().zip(&bb.kernel_sizes).zip(&bb.pool_factors) {
            layers.push(Layer::Conv1d(Conv1d::new(prev, w, k, k / 2, &mut rng)?));
            layers.push(Layer::BatchNorm1d(BatchNorm1d::new(w)));
            layers.push(Layer::Relu);
            layers.push(match bb.pooling {
                PoolKind::Max => Layer::MaxPool1d(p),
                PoolKind::Avg => Layer::AvgPool1d(p),
            });
            prev = w;
        }
        layers.extend([Layer::AdaptiveAvgPool1d(1), Layer::Flatten, Layer::L2Normalize]);
        let backbone = Sequential::new(layers);

        let d = bb.embedding_dim();
        let mut rng = seed::rng_for(seed, &[seed::TAG_INIT, 1]);
        let projector = Sequential::new(vec![
            Layer::Linear(Linear::new(d, config.projector_hidden, &mut rng)?),
            Layer::BatchNorm1d(BatchNorm1d::new(config.projector_hidden)),
            Layer::Relu,
            Layer::Linear(Linear::new(config.projector_hidden, config.projector_out, &mut rng)?),
            Layer::BatchNorm1d(BatchNorm1d::new(config.projector_out)),
        ]);
        let mut rng = seed::rng_for(seed, &[seed::TAG_INIT, 2]);
        let predictor = Sequential::new(vec![
            Layer::Linear(Linear::new(config.projector_out, config.predictor_hidden, &mut rng)?),
            Layer::BatchNorm1d(BatchNorm1d::new(config.predictor_hidden)),
            Layer::Relu,
            Layer::Linear(Linear::new(config.predictor_hidden, config.projector_out, &mut rng)?),
        ]);
        Ok(Self {
            config,
            backbone,
            projector,
            predictor,
            classifier: None,
        })
    }

    /// Replace the classification head with a freshly initialized one.
    pub fn attach_classifier(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::config("a classifier needs at least two classes"));
        }
        let d = self.config.backbone.embedding_dim();
        let h = self.config.classifier_hidden;
        let mut rng = seed::rng_for(seed, &[seed::TAG_INIT, 3]);
        self.classifier = Some(Sequential::new(vec![
            Layer::Linear(Linear::new(d, h, &mut rng)?),
            Layer::Relu,
            Layer::Linear(Linear::new(h, num_classes, &mut rng)?),
        ]));
        Ok(())
    }

    pub fn num_classes(&self) -> Option<usize> {
        let head = self.classifier.as_ref()?;
        match head.layers.last()? {
            Layer::Linear(l) => Some(l.bias.len()),
            _ => None,
        }
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let bb = &self.config.backbone;
        if x.shape().len() != 3 || x.shape()[1] != bb.in_channels || x.shape()[2] != bb.input_length {
            return Err(Error::shape(format!(
                "encoder expects [N, {}, {}], got {:?}",
                bb.in_channels,
                bb.input_length,
                x.shape()
            )));
        }
        Ok(())
    }

    /// L2-normalized embeddings in evaluation mode.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.backbone.infer(x)
    }

    /// Raw class logits in evaluation mode.
    pub fn classify(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let head = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::config("model has no classifier head"))?;
        head.infer(&self.encode(x)?)
    }

    /// Projection `z` and prediction `p` for one view, recording a tape.
    pub fn forward_view(&mut self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, Tensor<T>, ViewTape<T>)> {
        self.check_input(x)?;
        let (feat, backbone) = self.backbone.forward(x, train)?;
        let (z, projector) = self.projector.forward(&feat, train)?;
        let (p, predictor) = self.predictor.forward(&z, train)?;
        Ok((
            z,
            p,
            ViewTape {
                backbone,
                projector,
                predictor,
            },
        ))
    }

    /// Backpropagate a gradient on `p`; `z` is held constant (no gradient
    /// enters through the projection output directly).
    pub fn backward_view(&mut self, tape: ViewTape<T>, grad_p: Tensor<T>) -> Result<()> {
        let gz = self
            .predictor
            .backward(tape.predictor, grad_p, true)?
            .expect("requested input gradient");
        let gf = self
            .projector
            .backward(tape.projector, gz, true)?
            .expect("requested input gradient");
        self.backbone.backward(tape.backbone, gf, false)?;
        Ok(())
    }

    /// Logits with a tape through encoder and classifier.
    pub fn forward_classifier(&mut self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, ClassifierTape<T>)> {
        self.check_input(x)?;
        let head = self
            .classifier
            .as_mut()
            .ok_or_else(|| Error::config("model has no classifier head"))?;
        let (feat, bt) = self.backbone.forward(x, train)?;
        let (logits, ht) = head.forward(&feat, train)?;
        Ok((logits, (bt, ht)))
    }

    pub fn backward_classifier(&mut self, tapes: (Tape<T>, Tape<T>), grad_logits: Tensor<T>) -> Result<()> {
        let head = self
            .classifier
            .as_mut()
            .ok_or_else(|| Error::config("model has no classifier head"))?;
        let gf = head.backward(tapes.1, grad_logits, true)?.expect("requested input gradient");
        self.backbone.backward(tapes.0, gf, false)?;
        Ok(())
    }

    fn parts(&self) -> [Option<&Sequential<T>>; 4] {
        [
            Some(&self.backbone),
            Some(&self.projector),
            Some(&self.predictor),
            self.classifier.as_ref(),
        ]
    }

    fn parts_mut(&mut self) -> [Option<&mut Sequential<T>>; 4] {
        [
            Some(&mut self.backbone),
            Some(&mut self.projector),
            Some(&mut self.predictor),
            self.classifier.as_mut(),
        ]
    }

    /// Trainable tensors keyed `part.layer.name`.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (part, seq) in PARTS.iter().zip(self.parts()) {
            if let Some(seq) = seq {
                out.extend(seq.named_params().into_iter().map(|(n, t)| (format!("{part}.{n}"), t)));
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (part, seq) in PARTS.iter().zip(self.parts_mut()) {
            if let Some(seq) = seq {
                out.extend(seq.named_params_mut().into_iter().map(|(n, t)| (format!("{part}.{n}"), t)));
            }
        }
        out
    }

    pub fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (part, seq) in PARTS.iter().zip(self.parts()) {
            if let Some(seq) = seq {
                out.extend(seq.named_buffers().into_iter().map(|(n, t)| (format!("{part}.{n}"), t)));
            }
        }
        out
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (part, seq) in PARTS.iter().zip(self.parts_mut()) {
            if let Some(seq) = seq {
                out.extend(seq.named_buffers_mut().into_iter().map(|(n, t)| (format!("{part}.{n}"), t)));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameters and buffers together, for bulk loading.
    pub fn named_state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (part, seq) in PARTS.iter().zip(self.parts_mut()) {
            if let Some(seq) = seq {
                out.extend(seq.named_state_mut().into_iter().map(|(n, t)| (format!("{part}.{n}"), t)));
            }
        }
        out
    }

    pub fn backbone_param_count(&self) -> usize {
        self.backbone.param_count()
    }

    /// Backbone parameter bytes at 32-bit precision, in MB.
    pub fn backbone_footprint_mb(&self) -> f64 {
        (self.backbone_param_count() * 4) as f64 / 1e6
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named_params()
            .iter()
            .chain(self.named_buffers().iter())
            .all(|(_, t)| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            backbone: self.backbone.cast(),
            projector: self.projector.cast(),
            predictor: self.predictor.cast(),
            classifier: self.classifier.as_ref().map(Sequential::cast),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_footprint_in_band() {
        let cfg = ModelConfig::default();
        let model = Model::<f32>::new(cfg.clone(), 1).unwrap();
        assert_eq!(model.backbone_param_count(), cfg.backbone.param_count());
        let mb = model.backbone_footprint_mb();
        assert!((2.3..=2.9).contains(&mb), "footprint {mb} MB");
        assert_eq!(cfg.backbone.embedding_dim(), 512);
        assert_eq!(cfg.backbone.widths.len(), 4);
    }

    #[test]
    fn encoder_rows_unit_norm_and_logit_shape() {
        let mut model = Model::<f32>::new(ModelConfig::tiny(32), 3).unwrap();
        model.attach_classifier(7, 3).unwrap();
        let mut rng = seed::rng(9);
        let x = Tensor::from_vec(
            &[5, 2, 32],
            (0..320).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect(),
        )
        .unwrap();
        let e = model.encode(&x).unwrap();
        for row in e.rows() {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        assert_eq!(model.classify(&x).unwrap().shape(), &[5, 7]);
        assert!(model.encode(&Tensor::zeros(&[5, 3, 32])).is_err());
        assert!(model.encode(&Tensor::zeros(&[5, 2, 31])).is_err());
    }

    #[test]
    fn identical_inputs_give_identical_rows_in_eval() {
        let model = Model::<f32>::new(ModelConfig::tiny(16), 4).unwrap();
        let row: Vec<f32> = (0..32).map(|i| (i as f32 * 0.37).sin()).collect();
        let x = Tensor::from_vec(&[3, 2, 16], row.repeat(3)).unwrap();
        let e = model.encode(&x).unwrap();
        let rows: Vec<&[f32]> = e.rows().collect();
        assert_eq!(rows[0], rows[1]);
        assert_eq!(rows[1], rows[2]);
    }

    #[test]
    fn folded_encoder_ignores_symbol_signs() {
        let mut cfg = ModelConfig::tiny(16);
        cfg.backbone.fold_constellation = true;
        cfg.backbone.pooling = PoolKind::Avg;
        let model = Model::<f32>::new(cfg, 5).unwrap();
        let row: Vec<f32> = (0..32).map(|i| (i as f32 * 0.37).sin()).collect();
        let flipped: Vec<f32> = row.iter().enumerate().map(|(i, v)| if i % 3 == 0 { -v } else { *v }).collect();
        let x = Tensor::from_vec(&[2, 2, 16], [row, flipped].concat()).unwrap();
        let e = model.encode(&x).unwrap();
        let rows: Vec<&[f32]> = e.rows().collect();
        assert_eq!(rows[0], rows[1]);
    }

    #[test]
    fn bad_configs_rejected() {
        let mut c = ModelConfig::default();
        c.backbone.kernel_sizes = vec![3, 3];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.backbone.kernel_sizes[0] = 4;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(3);
        c.backbone.pool_factors = vec![2, 2];
        assert!(c.validate().is_err());
    }
}
