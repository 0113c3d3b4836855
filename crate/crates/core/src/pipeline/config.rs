//! JSON run configuration. Every field has a default, so `{}` is a valid
//! file describing the full-scale experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chanest::{AugmentConfig, AugmentMode, MIN_MMSE_SAMPLES};
use crate::channel::ChannelConfig;
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::nn::ModelConfig;
use crate::seed;
use crate::simsiam::PretrainConfig;
use crate::waveform::{DeviceProfile, DeviceSet};

/// Training regime selected for `pretrain`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    LsOnly,
    MmseOnly,
    Mixed,
    /// No contrastive stage: backbone and head trained with labels.
    Supervised,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::LsOnly => "ls_only",
            RunMode::MmseOnly => "mmse_only",
            RunMode::Mixed => "mixed",
            RunMode::Supervised => "supervised",
        }
    }

    /// Pair construction used by contrastive pretraining.
    pub fn augment_mode(self) -> Option<AugmentMode> {
        match self {
            RunMode::LsOnly => Some(AugmentMode::LsOnly),
            RunMode::MmseOnly => Some(AugmentMode::MmseOnly),
            RunMode::Mixed => Some(AugmentMode::Mixed),
            RunMode::Supervised => None,
        }
    }
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ls_only" => Ok(RunMode::LsOnly),
            "mmse_only" => Ok(RunMode::MmseOnly),
            "mixed" => Ok(RunMode::Mixed),
            "supervised" => Ok(RunMode::Supervised),
            other => Err(Error::config(format!(
                "unknown mode {other:?}; expected ls_only, mmse_only, mixed or supervised"
            ))),
        }
    }
}

/// Either an evenly spaced grid of `count` devices or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceSpec {
    pub count: usize,
    pub profiles: Option<Vec<DeviceProfile>>,
}

impl Default for DeviceSpec {
    fn default() -> Self {
        Self {
            count: 7,
            profiles: None,
        }
    }
}

impl DeviceSpec {
    pub fn build(&self) -> Result<DeviceSet> {
        match &self.profiles {
            Some(p) => DeviceSet::new(p.clone()),
            None => DeviceSet::evenly_spaced(self.count),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub packets_per_device: usize,
    pub target_packets_per_device: usize,
    pub source_channel: ChannelConfig,
    pub target_channel: ChannelConfig,
    /// Channel realizations behind each MMSE covariance estimate.
    pub mmse_samples: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            packets_per_device: 1000,
            target_packets_per_device: 1000,
            source_channel: ChannelConfig::default(),
            target_channel: ChannelConfig {
                rms_delay_ns: 50.0,
                ..ChannelConfig::default()
            },
            mmse_samples: MIN_MMSE_SAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub augment: AugmentConfig,
    pub val_fraction: f64,
    pub nmi_window: usize,
    pub nmi_restarts: usize,
    /// Write a checkpoint after every epoch, not only the final and best.
    pub save_every_epoch: bool,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr_max: d.lr_max,
            lr_min: d.lr_min,
            augment: d.augment,
            val_fraction: d.val_fraction,
            nmi_window: d.nmi_window,
            nmi_restarts: d.nmi_restarts,
            save_every_epoch: false,
        }
    }
}

/// Overrides applied to the fine-tune settings for the supervised baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedSection {
    pub label_fraction: f64,
    pub backbone_lr_ratio: f64,
}

impl Default for SupervisedSection {
    fn default() -> Self {
        Self {
            label_fraction: 0.7,
            backbone_lr_ratio: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// SNRs at which validation packets are re-noised and classified.
    pub snr_db: Vec<f64>,
    pub nmi_restarts: usize,
    pub export_features: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            nmi_restarts: 10,
            export_features: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: RunMode,
    pub seed: u64,
    pub deterministic: bool,
    pub out_dir: PathBuf,
    pub devices: DeviceSpec,
    pub data: DataSection,
    pub model: ModelConfig,
    pub pretrain: PretrainSection,
    /// Its `seed` field is ignored; seeds derive from the run seed.
    pub finetune: FinetuneConfig,
    pub supervised: SupervisedSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::Mixed,
            seed: 2025,
            deterministic: false,
            out_dir: PathBuf::from("out"),
            devices: DeviceSpec::default(),
            data: DataSection::default(),
            model: ModelConfig::default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneConfig::default(),
            supervised: SupervisedSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Sub-seed tags for the run's independent random streams.
const STREAM_SOURCE: u64 = 1;
const STREAM_TARGET: u64 = 2;
const STREAM_MMSE_SOURCE: u64 = 3;
const STREAM_MMSE_TARGET: u64 = 4;
const STREAM_PRETRAIN: u64 = 5;
const STREAM_FINETUNE: u64 = 6;
const STREAM_EVAL: u64 = 7;

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let devices = self.devices.build()?;
        if devices.len() < 2 {
            return Err(Error::config("at least two devices are needed"));
        }
        if self.data.packets_per_device == 0 || self.data.target_packets_per_device == 0 {
            return Err(Error::config("packets per device must be positive"));
        }
        self.data.source_channel.validate()?;
        self.data.target_channel.validate()?;
        if self.data.source_channel == self.data.target_channel {
            return Err(Error::config(
                "target channel must differ from the source channel for cross-scenario evaluation",
            ));
        }
        if self.data.mmse_samples < MIN_MMSE_SAMPLES {
            return Err(Error::config(format!(
                "mmse_samples must be at least {MIN_MMSE_SAMPLES}"
            )));
        }
        self.model.validate()?;
        if self.model.backbone.input_length != crate::chanest::SAMPLE_COLS {
            return Err(Error::config(format!(
                "backbone input_length must be {}",
                crate::chanest::SAMPLE_COLS
            )));
        }
        self.pretrain_config(AugmentMode::Mixed).validate()?;
        self.finetune_config().validate()?;
        if !(self.supervised.label_fraction > 0.0 && self.supervised.label_fraction < 1.0) {
            return Err(Error::config("supervised label_fraction must lie in (0, 1)"));
        }
        if !(self.supervised.backbone_lr_ratio > 0.0) {
            return Err(Error::config("supervised backbone_lr_ratio must be positive"));
        }
        if self.eval.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::config("eval SNRs must be finite"));
        }
        if self.eval.nmi_restarts == 0 {
            return Err(Error::config("eval nmi_restarts must be positive"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, with the output directory
    /// blanked so relocating a run keeps its hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    pub fn source_seed(&self) -> u64 {
        seed::derive(self.seed, &[STREAM_SOURCE])
    }

    pub fn target_seed(&self) -> u64 {
        seed::derive(self.seed, &[STREAM_TARGET])
    }

    pub fn mmse_seed(&self, target: bool) -> u64 {
        let tag = if target { STREAM_MMSE_TARGET } else { STREAM_MMSE_SOURCE };
        seed::derive(self.seed, &[tag])
    }

    pub fn eval_seed(&self) -> u64 {
        seed::derive(self.seed, &[STREAM_EVAL])
    }

    pub fn pretrain_config(&self, mode: AugmentMode) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr_max: p.lr_max,
            lr_min: p.lr_min,
            augment: p.augment.clone(),
            val_fraction: p.val_fraction,
            mode,
            seed: seed::derive(self.seed, &[STREAM_PRETRAIN]),
            nmi_window: p.nmi_window,
            nmi_restarts: p.nmi_restarts,
        }
    }

    /// Fine-tune settings; the supervised baseline swaps in its label
    /// fraction and backbone learning-rate ratio.
    pub fn finetune_config(&self) -> FinetuneConfig {
        let mut f = self.finetune.clone();
        f.seed = seed::derive(self.seed, &[STREAM_FINETUNE]);
        if self.mode == RunMode::Supervised {
            f.label_fraction = self.supervised.label_fraction;
            f.backbone_lr_ratio = self.supervised.backbone_lr_ratio;
        }
        f
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
        assert_eq!(c.devices.build().unwrap().len(), 7);
        assert_eq!(c.data.packets_per_device, 1000);
    }

    #[test]
    fn round_trip_and_hash() {
        let c = RunConfig::default();
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
        let mut moved = c.clone();
        moved.out_dir = PathBuf::from("elsewhere");
        assert_eq!(moved.hash(), c.hash());
        let mut reseeded = c.clone();
        reseeded.seed += 1;
        assert_ne!(reseeded.hash(), c.hash());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(matches!(RunConfig::from_json("{\"bogus\": 1}"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json("not json"), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.data.target_channel = c.data.source_channel.clone();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.data.mmse_samples = 10;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.devices.count = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn modes_parse_and_supervised_overrides() {
        for m in [RunMode::LsOnly, RunMode::MmseOnly, RunMode::Mixed, RunMode::Supervised] {
            assert_eq!(m.as_str().parse::<RunMode>().unwrap(), m);
        }
        assert!("bogus".parse::<RunMode>().is_err());
        let mut c = RunConfig::default();
        c.mode = RunMode::Supervised;
        let f = c.finetune_config();
        assert_eq!(f.label_fraction, 0.7);
        assert_eq!(f.backbone_lr_ratio, 1.0);
        assert!(RunMode::Supervised.augment_mode().is_none());
    }
}
