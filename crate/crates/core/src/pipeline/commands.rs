//! The five pipeline commands. Each reads and writes files under the run's
//! output directory and returns a summary for the caller to print.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use crate::chanest::{estimate_mmse_statistics, Estimator, MmseStatistics, MMSE_MAGIC};
use crate::channel::{add_awgn, ReceivedFrame};
use crate::error::{Error, Result};
use crate::finetune::{equalize_both, finetune, hybrid_accuracy, stratified_split};
use crate::io::peek_magic;
use crate::metrics::{clustering_nmi, confusion, encode_samples, per_class_accuracy, MetricsSummary};
use crate::nn::checkpoint::CHECKPOINT_MAGIC;
use crate::nn::{CheckpointKind, Model, ModelState};
use crate::pipeline::config::{RunConfig, RunMode};
use crate::pipeline::dataset::{Dataset, DatasetRole, DATASET_MAGIC};
use crate::seed;
use crate::simsiam::{pretrain, EpochRecord};

pub const SOURCE_DATASET: &str = "source.rffd";
pub const TARGET_DATASET: &str = "target.rffd";
pub const SOURCE_MMSE: &str = "source.mmse";
pub const TARGET_MMSE: &str = "target.mmse";
pub const BACKBONE_BEST: &str = "backbone_best.ckpt";
pub const BACKBONE_FINAL: &str = "backbone_final.ckpt";
pub const MODEL_CHECKPOINT: &str = "model.ckpt";
pub const FEATURES_CSV: &str = "features.csv";
pub const METRICS_JSON: &str = "metrics.json";

/// Receives one human-readable progress line at a time.
pub type Progress<'a> = &'a mut dyn FnMut(&str);

/// Cap the global worker pool: one thread when deterministic, otherwise
/// `RFF_THREADS` if set. Results do not depend on the thread count; the
/// single-thread mode only makes scheduling reproducible too.
pub fn configure_threads(deterministic: bool) -> Result<usize> {
    let requested = if deterministic {
        Some(1)
    } else {
        match std::env::var("RFF_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| Error::config(format!("RFF_THREADS must be a positive integer, got {v:?}")))?,
            ),
            Err(_) => None,
        }
    };
    if let Some(n) = requested {
        // A pool built earlier in the process wins; that is harmless here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

/// Per-mode subdirectory holding checkpoints and reports.
pub fn mode_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join(cfg.mode.as_str())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{what} not found at {}; run the earlier command first", path.display()),
        )))
    }
}

fn load_dataset(path: &Path, what: &str) -> Result<Dataset> {
    require(path, what)?;
    Dataset::read(path)
}

fn load_stats(path: &Path) -> Result<MmseStatistics> {
    require(path, "MMSE statistics")?;
    MmseStatistics::load(path)
}

#[derive(Debug, Clone, Serialize)]
pub struct GenSummary {
    pub source: PathBuf,
    pub target: PathBuf,
    pub source_packets: usize,
    pub target_packets: usize,
    pub redraws: usize,
    pub config_hash: String,
}

/// Simulate the source and target datasets and their MMSE statistics.
pub fn cmd_gen(cfg: &RunConfig, progress: Progress) -> Result<GenSummary> {
    cfg.validate()?;
    let hash = cfg.hash();
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.json"), cfg.to_json())?;
    let devices = cfg.devices.build()?;
    let mut redraws = 0;
    let mut counts = [0usize; 2];
    let plan = [
        (DatasetRole::Source, &cfg.data.source_channel, cfg.data.packets_per_device, cfg.source_seed(), SOURCE_DATASET, SOURCE_MMSE),
        (DatasetRole::Target, &cfg.data.target_channel, cfg.data.target_packets_per_device, cfg.target_seed(), TARGET_DATASET, TARGET_MMSE),
    ];
    for (i, (role, channel, ppd, seed, file, mmse_file)) in plan.into_iter().enumerate() {
        progress(&format!("generating {ppd} packets per device for {} devices ({role:?})", devices.len()));
        let mut ds = Dataset::generate(&devices, channel, ppd, seed, role)?;
        ds.header.config_hash = Some(hash.clone());
        ds.write(cfg.out_dir.join(file))?;
        redraws += ds.header.redraws;
        counts[i] = ds.len();
        progress(&format!("estimating MMSE statistics from {} channel draws", cfg.data.mmse_samples));
        let stats = estimate_mmse_statistics(channel, cfg.data.mmse_samples, cfg.mmse_seed(role == DatasetRole::Target))?;
        stats.save(cfg.out_dir.join(mmse_file), Some(&hash))?;
    }
    Ok(GenSummary {
        source: cfg.out_dir.join(SOURCE_DATASET),
        target: cfg.out_dir.join(TARGET_DATASET),
        source_packets: counts[0],
        target_packets: counts[1],
        redraws,
        config_hash: hash,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainSummary {
    pub mode: RunMode,
    pub backbone: PathBuf,
    pub best_nmi: Option<f64>,
    pub average_nmi: Option<f64>,
    pub best_nmi_epoch: Option<usize>,
    pub total_seconds: f64,
    pub config_hash: String,
}

/// Contrastive pretraining on the source dataset. The supervised mode skips
/// it and stores a freshly initialized backbone for `finetune` to train.
pub fn cmd_pretrain(cfg: &RunConfig, progress: Progress) -> Result<PretrainSummary> {
    cfg.validate()?;
    let hash = cfg.hash();
    let dir = mode_dir(cfg);
    fs::create_dir_all(&dir)?;
    let best_path = dir.join(BACKBONE_BEST);
    let meta = |extra: serde_json::Value| json!({ "mode": cfg.mode.as_str(), "stage": "pretrain", "extra": extra });

    let Some(aug_mode) = cfg.mode.augment_mode() else {
        progress("supervised mode: skipping contrastive pretraining");
        let init_seed = seed::derive(cfg.seed, &[seed::TAG_INIT]);
        let state = ModelState::new(Model::new(cfg.model.clone(), init_seed)?, init_seed);
        state.save(&best_path, CheckpointKind::Backbone, Some(&hash), meta(json!("random initialization")))?;
        return Ok(PretrainSummary {
            mode: cfg.mode,
            backbone: best_path,
            best_nmi: None,
            average_nmi: None,
            best_nmi_epoch: None,
            total_seconds: 0.0,
            config_hash: hash,
        });
    };

    let data = load_dataset(&cfg.out_dir.join(SOURCE_DATASET), "source dataset")?;
    let stats = load_stats(&cfg.out_dir.join(SOURCE_MMSE))?;
    let pcfg = cfg.pretrain_config(aug_mode);
    let save_every = cfg.pretrain.save_every_epoch;
    let mut on_epoch = |r: &EpochRecord, model: &Model<f32>| -> Result<()> {
        let nmi = r.nmi.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        progress(&format!(
            "epoch {:>3} lr {:.2e} train {:+.4} val {:+.4} nmi {nmi} ({:.1}s)",
            r.epoch, r.lr, r.train_loss, r.val_loss, r.seconds
        ));
        if save_every {
            let state = ModelState::new(model.clone(), pcfg.seed);
            state.save(
                dir.join(format!("epoch_{:03}.ckpt", r.epoch)),
                CheckpointKind::Backbone,
                Some(&hash),
                meta(json!({ "epoch": r.epoch })),
            )?;
        }
        Ok(())
    };
    let outcome = pretrain(&data.packets, &pcfg, &stats, cfg.model.clone(), &mut on_epoch)?;
    let report = &outcome.report;
    outcome
        .state
        .save(dir.join(BACKBONE_FINAL), CheckpointKind::Full, Some(&hash), meta(json!("final epoch")))?;
    let mut best = ModelState::new(outcome.best.clone().unwrap_or_else(|| outcome.state.model.clone()), pcfg.seed);
    best.epoch = report.best_nmi_epoch.unwrap_or(outcome.state.epoch);
    best.save(&best_path, CheckpointKind::Backbone, Some(&hash), meta(json!({ "best_nmi": report.best_nmi })))?;
    write_json(&dir.join("pretrain_report.json"), &json!({ "config_hash": hash, "report": report }))?;
    fs::write(dir.join("pretrain_epochs.csv"), report.to_csv())?;
    Ok(PretrainSummary {
        mode: cfg.mode,
        backbone: best_path,
        best_nmi: report.best_nmi,
        average_nmi: report.average_nmi,
        best_nmi_epoch: report.best_nmi_epoch,
        total_seconds: report.total_seconds,
        config_hash: hash,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneSummary {
    pub mode: RunMode,
    pub model: PathBuf,
    pub labeled_packets: usize,
    pub val_packets: usize,
    pub best_epoch: usize,
    pub final_accuracy: f64,
    pub total_seconds: f64,
    pub config_hash: String,
}

/// Train a classifier on the labeled slice of the target dataset, starting
/// from the mode's pretrained backbone.
pub fn cmd_finetune(cfg: &RunConfig, progress: Progress) -> Result<FinetuneSummary> {
    cfg.validate()?;
    let hash = cfg.hash();
    let dir = mode_dir(cfg);
    let backbone_path = dir.join(BACKBONE_BEST);
    require(&backbone_path, "pretrained backbone")?;
    let (backbone, _) = ModelState::load(&backbone_path)?;
    let data = load_dataset(&cfg.out_dir.join(TARGET_DATASET), "target dataset")?;
    let stats = load_stats(&cfg.out_dir.join(TARGET_MMSE))?;
    let fcfg = cfg.finetune_config();
    progress(&format!(
        "fine-tuning on {:.1}% of {} target packets",
        100.0 * fcfg.label_fraction,
        data.len()
    ));
    let outcome = finetune(&backbone.model, &data.packets, &fcfg, &stats, data.num_classes())?;
    let report = &outcome.report;
    for e in &report.epochs {
        progress(&format!(
            "epoch {:>3} loss {:.4} monitor acc {:.4} ({:.1}s)",
            e.epoch, e.train_loss, e.val_accuracy, e.seconds
        ));
    }
    let model_path = dir.join(MODEL_CHECKPOINT);
    outcome.state.save(
        &model_path,
        CheckpointKind::Full,
        Some(&hash),
        json!({ "mode": cfg.mode.as_str(), "stage": "finetune", "best_epoch": report.best_epoch }),
    )?;
    write_json(
        &dir.join("finetune_report.json"),
        &json!({ "config_hash": hash, "report": report, "labeled": outcome.labeled }),
    )?;
    fs::write(dir.join("finetune_epochs.csv"), report.to_csv())?;
    fs::write(dir.join("confusion.csv"), report.confusion_csv())?;
    Ok(FinetuneSummary {
        mode: cfg.mode,
        model: model_path,
        labeled_packets: report.labeled_packets,
        val_packets: report.val_packets,
        best_epoch: report.best_epoch,
        final_accuracy: report.final_accuracy,
        total_seconds: report.total_seconds,
        config_hash: hash,
    })
}

/// Lower a packet's SNR from its current value to `snr_db` by adding the
/// missing noise power. Packets already at or below `snr_db` are returned
/// unchanged.
pub fn renoise(packet: &ReceivedFrame, snr_db: f64, rng_seed: u64) -> ReceivedFrame {
    if snr_db >= packet.snr_db {
        return packet.clone();
    }
    let have = 10f64.powf(-packet.snr_db / 10.0);
    let want = 10f64.powf(-snr_db / 10.0);
    // add_awgn scales by the received power, which already includes `have`.
    let extra_db = -10.0 * ((want - have) / (1.0 + have)).log10();
    ReceivedFrame {
        rx: add_awgn(&packet.rx, extra_db, rng_seed),
        snr_db,
        ..packet.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnrPoint {
    pub snr_db: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: RunMode,
    #[serde(flatten)]
    pub summary: MetricsSummary,
    pub val_packets: usize,
    pub feature_estimator: Estimator,
    pub snr_sweep: Vec<SnrPoint>,
    /// Relative to the mode directory.
    pub features_csv: Option<PathBuf>,
}

/// Hybrid accuracy over an SNR sweep, clustering NMI of the backbone
/// features, and an optional feature export, all on the validation split.
pub fn cmd_eval(cfg: &RunConfig, progress: Progress) -> Result<EvalReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let dir = mode_dir(cfg);
    let model_path = dir.join(MODEL_CHECKPOINT);
    require(&model_path, "fine-tuned model")?;
    let (state, _) = ModelState::load(&model_path)?;
    let model = &state.model;
    if model.num_classes().is_none() {
        return Err(Error::config(format!("{} has no classifier head", model_path.display())));
    }
    let data = load_dataset(&cfg.out_dir.join(TARGET_DATASET), "target dataset")?;
    let stats = load_stats(&cfg.out_dir.join(TARGET_MMSE))?;
    let fcfg = cfg.finetune_config();
    let labels = data.labels();
    let (_, val) = stratified_split(&labels, fcfg.label_fraction, fcfg.seed)?;
    let val_labels: Vec<usize> = val.iter().map(|&i| labels[i]).collect();

    let (ls, mmse) = equalize_both(&data.packets, &val, &stats)?;
    let (accuracy, predictions) = hybrid_accuracy(model, &ls, &mmse, &val_labels, fcfg.val_batch)?;
    let classes = data.num_classes();
    let conf = confusion(&predictions, &val_labels, classes)?;
    progress(&format!("hybrid accuracy {accuracy:.4} on {} validation packets", val.len()));

    let mut snr_sweep = Vec::with_capacity(cfg.eval.snr_db.len());
    for (k, &snr) in cfg.eval.snr_db.iter().enumerate() {
        let noisy: Vec<ReceivedFrame> = val
            .iter()
            .map(|&i| renoise(&data.packets[i], snr, seed::derive(cfg.eval_seed(), &[k as u64, i as u64])))
            .collect();
        let all: Vec<usize> = (0..noisy.len()).collect();
        let (l, m) = equalize_both(&noisy, &all, &stats)?;
        let (acc, _) = hybrid_accuracy(model, &l, &m, &val_labels, fcfg.val_batch)?;
        progress(&format!("snr {snr:>5.1} dB accuracy {acc:.4}"));
        snr_sweep.push(SnrPoint { snr_db: snr, accuracy: acc });
    }

    let feature_estimator = cfg.mode.augment_mode().map_or(Estimator::Ls, |m| m.feature_estimator());
    let features = encode_samples(model, if feature_estimator == Estimator::Mmse { &mmse } else { &ls })?;
    let nmi = clustering_nmi(&features, cfg.eval.nmi_restarts, seed::derive(cfg.eval_seed(), &[seed::TAG_KMEANS]))?;
    progress(&format!("feature NMI {nmi:.4}"));
    let features_csv = if cfg.eval.export_features {
        features.write_csv(dir.join(FEATURES_CSV))?;
        Some(PathBuf::from(FEATURES_CSV))
    } else {
        None
    };
    let report = EvalReport {
        mode: cfg.mode,
        summary: MetricsSummary {
            nmi: Some(nmi),
            accuracy: Some(accuracy),
            per_class_accuracy: per_class_accuracy(&conf),
            config_hash: Some(hash),
        },
        val_packets: val.len(),
        feature_estimator,
        snr_sweep,
        features_csv,
    };
    write_json(&dir.join(METRICS_JSON), &report)?;
    Ok(report)
}

/// Kinds of file `inspect` understands, keyed by magic bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    Dataset,
    Checkpoint,
    MmseStatistics,
}

/// Describe a dataset, checkpoint or MMSE file.
pub fn cmd_inspect(path: &Path) -> Result<(FileKind, serde_json::Value)> {
    let magic = peek_magic(path)?.ok_or_else(|| Error::format(format!("{}: file too short", path.display())))?;
    if &magic == DATASET_MAGIC {
        let header = Dataset::read(path)?.header;
        let info = json!({
            "packets_per_device": header.packets_per_device,
            "devices": header.devices.len(),
            "header": header,
        });
        Ok((FileKind::Dataset, info))
    } else if &magic == CHECKPOINT_MAGIC {
        let manifest = ModelState::read_manifest(path)?;
        let (state, _) = ModelState::load(path)?;
        let model = &state.model;
        let info = json!({
            "kind": manifest.kind,
            "epoch": manifest.epoch,
            "num_classes": manifest.num_classes,
            "config_hash": manifest.config_hash,
            "architecture": manifest.architecture,
            "stored_tensors": manifest.tensors.iter().map(|t| json!({ "name": t.name, "shape": t.shape })).collect::<Vec<_>>(),
            "backbone_params": model.backbone_param_count(),
            "total_params": model.param_count(),
            "backbone_footprint_mb": model.backbone_footprint_mb(),
            "metadata": manifest.metadata,
        });
        Ok((FileKind::Checkpoint, info))
    } else if &magic == MMSE_MAGIC {
        let stats = MmseStatistics::load(path)?;
        let info = json!({
            "dims": [stats.dim(), stats.dim()],
            "sample_count": stats.sample_count,
            "channel_config": stats.channel_config,
            "seed": stats.seed,
        });
        Ok((FileKind::MmseStatistics, info))
    } else {
        Err(Error::format(format!(
            "{}: unrecognized magic bytes {:?}",
            path.display(),
            String::from_utf8_lossy(&magic)
        )))
    }
}
