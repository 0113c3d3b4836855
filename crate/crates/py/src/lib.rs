//! Python bindings: dataset generation, file inspection, estimator error,
//! clustering metrics and the pipeline commands.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use rffi::chanest::{estimate_mmse_statistics, estimator_mse, MIN_MMSE_SAMPLES};
use rffi::channel::ChannelConfig;
use rffi::pipeline::commands::{cmd_eval, cmd_finetune, cmd_gen, cmd_inspect, cmd_pretrain};
use rffi::pipeline::{Dataset, DatasetRole, RunConfig};
use rffi::waveform::DeviceSet;
use rffi::Error;

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        2 | 5 => PyValueError::new_err(e.to_string()),
        3 => PyIOError::new_err(e.to_string()),
        _ => PyArithmeticError::new_err(e.to_string()),
    }
}

fn json_text(v: &impl serde::Serialize) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// `(device_id, A_dB, P_deg, g_I, g_Q, theta_rad)` for an evenly spaced grid.
#[pyfunction]
fn device_grid(count: usize) -> PyResult<Vec<(usize, f64, f64, f64, f64, f64)>> {
    let set = DeviceSet::evenly_spaced(count).map_err(to_py)?;
    Ok(set
        .devices
        .iter()
        .map(|d| {
            let (gi, gq, th) = d.iq_parameters();
            (d.device_id, d.amp_imbalance_db, d.phase_imbalance_deg, gi, gq, th)
        })
        .collect())
}

/// Simulate a labeled dataset and write it to `path`; returns the packet count.
#[pyfunction]
#[pyo3(signature = (path, devices=7, packets_per_device=1000, seed=0, rms_delay_ns=30.0, base_snr_db=20.0, target=false))]
fn generate_dataset(
    py: Python<'_>,
    path: PathBuf,
    devices: usize,
    packets_per_device: usize,
    seed: u64,
    rms_delay_ns: f64,
    base_snr_db: f64,
    target: bool,
) -> PyResult<usize> {
    py.detach(|| {
        let set = DeviceSet::evenly_spaced(devices)?;
        let channel = ChannelConfig {
            rms_delay_ns,
            base_snr_db,
            ..ChannelConfig::default()
        };
        let role = if target { DatasetRole::Target } else { DatasetRole::Source };
        let ds = Dataset::generate(&set, &channel, packets_per_device, seed, role)?;
        ds.write(&path)?;
        Ok(ds.len())
    })
    .map_err(to_py)
}

/// Labels of every packet in a dataset file, in file order.
#[pyfunction]
fn dataset_labels(path: PathBuf) -> PyResult<Vec<usize>> {
    Ok(Dataset::read(path).map_err(to_py)?.labels())
}

/// JSON description of a dataset, checkpoint or MMSE statistics file.
#[pyfunction]
fn inspect(path: PathBuf) -> PyResult<String> {
    let (kind, info) = cmd_inspect(&path).map_err(to_py)?;
    json_text(&serde_json::json!({ "kind": kind, "info": info }))
}

/// Monte-Carlo `(ls_mse, mmse_mse)` over the default channel at `snr_db`.
#[pyfunction]
#[pyo3(signature = (snr_db, trials=10_000, seed=0))]
fn estimator_error(py: Python<'_>, snr_db: f64, trials: usize, seed: u64) -> PyResult<(f64, f64)> {
    py.detach(|| {
        let cfg = ChannelConfig::default();
        let stats = estimate_mmse_statistics(&cfg, MIN_MMSE_SAMPLES, seed ^ 0x5eed)?;
        let r = estimator_mse(&cfg, Some(&stats), snr_db, trials, seed)?;
        Ok((r.ls, r.mmse.unwrap_or(f64::NAN)))
    })
    .map_err(to_py)
}

/// Normalized mutual information of two labelings.
#[pyfunction]
fn nmi(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    rffi::metrics::nmi(&a, &b).map_err(to_py)
}

/// Run a pipeline command (`gen`, `pretrain`, `finetune` or `eval`) with a
/// JSON configuration; returns the command's summary as JSON.
#[pyfunction]
#[pyo3(signature = (command, config_json="{}", out_dir=None))]
fn run(py: Python<'_>, command: &str, config_json: &str, out_dir: Option<PathBuf>) -> PyResult<String> {
    let mut cfg = RunConfig::from_json(config_json).map_err(to_py)?;
    if let Some(dir) = out_dir {
        cfg.out_dir = dir;
    }
    let command = command.to_owned();
    let text = py.detach(move || -> rffi::Result<String> {
        let mut quiet = |_: &str| {};
        let v = match command.as_str() {
            "gen" => serde_json::to_value(cmd_gen(&cfg, &mut quiet)?)?,
            "pretrain" => serde_json::to_value(cmd_pretrain(&cfg, &mut quiet)?)?,
            "finetune" => serde_json::to_value(cmd_finetune(&cfg, &mut quiet)?)?,
            "eval" => serde_json::to_value(cmd_eval(&cfg, &mut quiet)?)?,
            other => return Err(Error::Config(format!("unknown command {other:?}"))),
        };
        Ok(v.to_string())
    });
    text.map_err(to_py)
}

#[pymodule]
fn rffi_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(device_grid, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_labels, m)?)?;
    m.add_function(wrap_pyfunction!(inspect, m)?)?;
    m.add_function(wrap_pyfunction!(estimator_error, m)?)?;
    m.add_function(wrap_pyfunction!(nmi, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
