//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! blocking criterion fails.
//!
//! `RFFI_ACCEPT_FULL=1` additionally runs the full-scale soft target, which
//! takes hours on one core and never affects the exit status.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rffi::chanest::{estimate_mmse_statistics, estimator_mse, MIN_MMSE_SAMPLES};
use rffi::channel::ChannelConfig;
use rffi::metrics::nmi;
use rffi::nn::gradcheck::{full_suite, GRAD_TOLERANCE};
use rffi::nn::{Model, ModelConfig};
use rffi::pipeline::commands::{cmd_eval, cmd_finetune, cmd_gen, cmd_pretrain, METRICS_JSON};
use rffi::pipeline::{RunConfig, RunMode};
use rffi::simsiam::stop_gradient_gap;

const LS_MSE_TOLERANCE: f64 = 0.05;
const LS_MSE_TRIALS: usize = 100_000;
const PAIRED_TRIALS: usize = 100_000;
const ESTIMATOR_SNRS_DB: [f64; 3] = [10.0, 15.0, 20.0];
const GRAD_TRIALS: usize = 20;
const STOP_GRADIENT_TOLERANCE: f64 = 1e-3;
const INDEPENDENT_NMI_MAX: f64 = 0.05;
const MIXED_ACCURACY_FLOOR: f64 = 0.60;
const FULL_MIXED_RANGE: (f64, f64) = (0.70, 0.92);
const FULL_SUPERVISED_RANGE: (f64, f64) = (0.80, 0.95);
const FOOTPRINT_MB: (f64, f64) = (2.3, 2.9);

struct Line {
    id: &'static str,
    pass: bool,
    blocking: bool,
    detail: String,
}

fn line(id: &'static str, pass: bool, detail: impl Into<String>) -> Line {
    Line {
        id,
        pass,
        blocking: true,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn quiet(_: &str) {}

fn ls_mse() -> Line {
    let start = Instant::now();
    let cfg = ChannelConfig::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, &snr) in ESTIMATOR_SNRS_DB.iter().enumerate() {
        match estimator_mse(&cfg, None, snr, LS_MSE_TRIALS, 100 + i as u64) {
            Ok(r) => {
                let expected = 10f64.powf(-snr / 10.0);
                let rel = (r.ls - expected).abs() / expected;
                ok &= rel < LS_MSE_TOLERANCE;
                parts.push(format!("{snr} dB: {:.5} vs {expected:.5} ({:.2}%)", r.ls, 100.0 * rel));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{snr} dB: {e}"));
            }
        }
    }
    let t = start.elapsed();
    line("1 LS MSE = 1/SNR", ok && within(t, 60), format!("{} in {:.1}s", parts.join("; "), t.as_secs_f64()))
}

fn mmse_dominance() -> Line {
    let start = Instant::now();
    let cfg = ChannelConfig::default();
    let run = || -> rffi::Result<(bool, Vec<String>)> {
        let stats = estimate_mmse_statistics(&cfg, MIN_MMSE_SAMPLES, 7)?;
        let mut ok = true;
        let mut parts = Vec::new();
        for (i, &snr) in ESTIMATOR_SNRS_DB.iter().enumerate() {
            let r = estimator_mse(&cfg, Some(&stats), snr, PAIRED_TRIALS, 200 + i as u64)?;
            let mmse = r.mmse.unwrap_or(f64::INFINITY);
            ok &= mmse < r.ls;
            parts.push(format!("{snr} dB: mmse {mmse:.5} < ls {:.5}", r.ls));
        }
        Ok((ok, parts))
    };
    match run() {
        Ok((ok, parts)) => {
            let t = start.elapsed();
            line("2 MMSE beats LS", ok && within(t, 120), format!("{} in {:.1}s", parts.join("; "), t.as_secs_f64()))
        }
        Err(e) => line("2 MMSE beats LS", false, e.to_string()),
    }
}

fn gradients() -> Line {
    let start = Instant::now();
    match full_suite(GRAD_TRIALS, 11) {
        Ok(checks) => {
            let t = start.elapsed();
            let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
            let failed: Vec<&str> = checks
                .iter()
                .filter(|c| !c.passed(GRAD_TOLERANCE))
                .map(|c| c.name.as_str())
                .collect();
            line(
                "3 gradient suite",
                failed.is_empty() && within(t, 300),
                format!(
                    "{} checks x {GRAD_TRIALS} shapes, worst rel err {worst:.2e}, failing {failed:?}, {:.1}s",
                    checks.len(),
                    t.as_secs_f64()
                ),
            )
        }
        Err(e) => line("3 gradient suite", false, e.to_string()),
    }
}

fn stop_gradient() -> Line {
    match stop_gradient_gap(13) {
        Ok(gap) => line(
            "4 stop-gradient surrogate",
            gap < STOP_GRADIENT_TOLERANCE,
            format!("relative gap {gap:.2e}"),
        ),
        Err(e) => line("4 stop-gradient surrogate", false, e.to_string()),
    }
}

/// Seven devices, 200 source packets each, 40 epochs; the target keeps
/// 1000 packets per device so the 1% split gives ten labels per device.
fn reduced_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 7;
    cfg.out_dir = out.to_path_buf();
    cfg.data.packets_per_device = 200;
    cfg.pretrain.epochs = 40;
    cfg.finetune.monitor_per_class = Some(30);
    cfg
}

struct ModeResult {
    mode: RunMode,
    average_nmi: f64,
    accuracy: f64,
    pretrain_seconds: f64,
}

fn run_mode(base: &RunConfig, mode: RunMode) -> rffi::Result<ModeResult> {
    let mut cfg = base.clone();
    cfg.mode = mode;
    let mut progress = |l: &str| eprintln!("    [{}] {l}", mode.as_str());
    let p = cmd_pretrain(&cfg, &mut progress)?;
    let f = cmd_finetune(&cfg, &mut quiet)?;
    eprintln!(
        "    [{}] average NMI {:?}, accuracy {:.4}, pretrain {:.0}s",
        mode.as_str(),
        p.average_nmi,
        f.final_accuracy,
        p.total_seconds
    );
    Ok(ModeResult {
        mode,
        average_nmi: p.average_nmi.unwrap_or(f64::NAN),
        accuracy: f.final_accuracy,
        pretrain_seconds: p.total_seconds,
    })
}

fn reduced_ordering() -> (Line, Line) {
    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = reduced_config(dir.path());
    let start = Instant::now();
    let results = cmd_gen(&cfg, &mut quiet).and_then(|_| {
        [RunMode::LsOnly, RunMode::MmseOnly, RunMode::Mixed]
            .into_iter()
            .map(|m| run_mode(&cfg, m))
            .collect::<rffi::Result<Vec<_>>>()
    });
    let results = match results {
        Ok(r) => r,
        Err(e) => {
            return (
                line("5 reduced-scale ordering", false, e.to_string()),
                line("7 pretraining time ordering", false, e.to_string()),
            )
        }
    };
    let [ls, mmse, mixed] = [&results[0], &results[1], &results[2]];
    let t = start.elapsed();
    let nmi_order = mixed.average_nmi > mmse.average_nmi && mmse.average_nmi > ls.average_nmi;
    let acc_order = mixed.accuracy > mmse.accuracy && mmse.accuracy > ls.accuracy;
    let floor = mixed.accuracy >= MIXED_ACCURACY_FLOOR;
    let summary = |f: fn(&ModeResult) -> f64| {
        results
            .iter()
            .map(|r| format!("{} {:.4}", r.mode.as_str(), f(r)))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let c5 = line(
        "5 reduced-scale ordering",
        nmi_order && acc_order && floor,
        format!(
            "NMI [{}] ordered={nmi_order}; accuracy [{}] ordered={acc_order}, mixed>={MIXED_ACCURACY_FLOOR}={floor}; {:.0}s total",
            summary(|r| r.average_nmi),
            summary(|r| r.accuracy),
            t.as_secs_f64()
        ),
    );
    let time_order = ls.pretrain_seconds < mixed.pretrain_seconds && mixed.pretrain_seconds < mmse.pretrain_seconds;
    let c7 = line(
        "7 pretraining time ordering",
        time_order,
        format!("seconds [{}]", summary(|r| r.pretrain_seconds)),
    );
    (c5, c7)
}

fn full_scale() -> Line {
    let mut l = if std::env::var("RFFI_ACCEPT_FULL").is_ok_and(|v| v == "1") {
        let dir = tempfile::tempdir().expect("temp dir");
        let mut cfg = RunConfig::default();
        cfg.out_dir = dir.path().to_path_buf();
        let run = || -> rffi::Result<(f64, f64)> {
            cmd_gen(&cfg, &mut quiet)?;
            let mixed = run_mode(&cfg, RunMode::Mixed)?.accuracy;
            let supervised = run_mode(&cfg, RunMode::Supervised)?.accuracy;
            Ok((mixed, supervised))
        };
        match run() {
            Ok((m, s)) => {
                let ok = (FULL_MIXED_RANGE.0..=FULL_MIXED_RANGE.1).contains(&m)
                    && (FULL_SUPERVISED_RANGE.0..=FULL_SUPERVISED_RANGE.1).contains(&s);
                line("6 full-scale accuracy (soft)", ok, format!("mixed {m:.4}, supervised {s:.4}"))
            }
            Err(e) => line("6 full-scale accuracy (soft)", false, e.to_string()),
        }
    } else {
        line("6 full-scale accuracy (soft)", true, "skipped; set RFFI_ACCEPT_FULL=1 to run")
    };
    l.blocking = false;
    l
}

fn nmi_oracle() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut checks = Vec::new();
    let a: Vec<usize> = (0..500).map(|_| rng.random_range(0..7)).collect();
    checks.push(("identical = 1", (nmi(&a, &a).unwrap() - 1.0).abs() < 1e-12));
    let x: Vec<usize> = (0..200_000).map(|_| rng.random_range(0..7)).collect();
    let y: Vec<usize> = (0..200_000).map(|_| rng.random_range(0..7)).collect();
    let indep = nmi(&x, &y).unwrap();
    checks.push(("independent < 0.05", indep < INDEPENDENT_NMI_MAX));
    checks.push(("4-point case = 0", nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-12));
    let mut symmetric = true;
    let mut permutation = true;
    for _ in 0..100 {
        let n = rng.random_range(2..300);
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let q: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let pq = nmi(&p, &q).unwrap();
        symmetric &= (pq - nmi(&q, &p).unwrap()).abs() < 1e-12;
        let relabel = [3usize, 0, 4, 1, 2];
        let p2: Vec<usize> = p.iter().map(|&v| relabel[v]).collect();
        permutation &= (pq - nmi(&p2, &q).unwrap()).abs() < 1e-12;
    }
    checks.push(("symmetry", symmetric));
    checks.push(("permutation invariance", permutation));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    line(
        "8 NMI oracle",
        failed.is_empty(),
        format!("independent NMI {indep:.2e}; failing {failed:?}"),
    )
}

/// Two devices, 50 packets each, three epochs, run twice single-threaded.
fn smoke_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 3;
    cfg.deterministic = true;
    cfg.out_dir = out.to_path_buf();
    cfg.devices.count = 2;
    cfg.data.packets_per_device = 50;
    cfg.data.target_packets_per_device = 50;
    cfg.pretrain.epochs = 3;
    cfg.pretrain.nmi_window = 3;
    cfg.finetune.label_fraction = 0.1;
    cfg.finetune.max_epochs = 5;
    cfg.finetune.patience = 3;
    cfg
}

fn determinism() -> Line {
    let run = |dir: &Path| -> rffi::Result<(Vec<u8>, Duration)> {
        let start = Instant::now();
        let cfg = smoke_config(dir);
        cmd_gen(&cfg, &mut quiet)?;
        cmd_pretrain(&cfg, &mut quiet)?;
        cmd_finetune(&cfg, &mut quiet)?;
        cmd_eval(&cfg, &mut quiet)?;
        let bytes = std::fs::read(dir.join(cfg.mode.as_str()).join(METRICS_JSON))?;
        Ok((bytes, start.elapsed()))
    };
    let (d1, d2) = (tempfile::tempdir().expect("temp dir"), tempfile::tempdir().expect("temp dir"));
    match (run(d1.path()), run(d2.path())) {
        (Ok((a, t1)), Ok((b, t2))) => line(
            "9 deterministic metrics",
            a == b,
            format!(
                "{} bytes, identical={}; smoke runs {:.0}s and {:.0}s",
                a.len(),
                a == b,
                t1.as_secs_f64(),
                t2.as_secs_f64()
            ),
        ),
        (Err(e), _) | (_, Err(e)) => line("9 deterministic metrics", false, e.to_string()),
    }
}

fn footprint() -> Line {
    match Model::<f32>::new(ModelConfig::default(), 0) {
        Ok(m) => {
            let mb = m.backbone_footprint_mb();
            line(
                "10 backbone footprint",
                (FOOTPRINT_MB.0..=FOOTPRINT_MB.1).contains(&mb),
                format!("{} parameters, {mb:.3} MB", m.backbone_param_count()),
            )
        }
        Err(e) => line("10 backbone footprint", false, e.to_string()),
    }
}

fn main() -> ExitCode {
    // RFFI_ACCEPT_ONLY=1,3,8 restricts the run to the listed criteria.
    let only: Option<Vec<u32>> = std::env::var("RFFI_ACCEPT_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |ids: &[u32]| only.as_ref().is_none_or(|o| ids.iter().any(|i| o.contains(i)));
    let single: [(u32, fn() -> Line); 8] = [
        (1, ls_mse),
        (2, mmse_dominance),
        (3, gradients),
        (4, stop_gradient),
        (6, full_scale),
        (8, nmi_oracle),
        (9, determinism),
        (10, footprint),
    ];
    let mut lines: Vec<Line> = single
        .iter()
        .filter(|(id, _)| wanted(&[*id]))
        .map(|(_, f)| f())
        .collect();
    if wanted(&[5, 7]) {
        let (c5, c7) = reduced_ordering();
        lines.push(c5);
        lines.push(c7);
    }
    lines.sort_by_key(|l| l.id.split(' ').next().and_then(|n| n.parse::<u32>().ok()));

    let mut failed = 0;
    for l in &lines {
        let tag = match (l.pass, l.blocking) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (non-blocking)",
        };
        println!("{tag} criterion {}: {}", l.id, l.detail);
        failed += usize::from(!l.pass && l.blocking);
    }
    if failed == 0 {
        println!("acceptance: all blocking criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} blocking criteria failed");
        ExitCode::FAILURE
    }
}
