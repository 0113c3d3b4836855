//! Pilot-based LS and MMSE channel estimation, equalization, and the
//! residual-channel augmentation that turns one received packet into a
//! positive pair.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use crate::channel::{add_awgn_with, sample_channel, ChannelConfig, ReceivedFrame};
use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use crate::seed;
use crate::waveform::{lts, NUM_SUBCARRIERS, SYMBOLS_PER_PACKET};

/// Estimates closer to zero than this on any subcarrier are deep fades.
pub const DEEP_FADE_THRESHOLD: f64 = 1e-9;
/// Fewest channel draws accepted for covariance estimation.
pub const MIN_MMSE_SAMPLES: usize = 10_000;
pub const DEFAULT_MASK_RATIO: f64 = 0.1;
pub const DEFAULT_SNR_RANGE_DB: (i32, i32) = (10, 20);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Ls,
    Mmse,
    /// Genie estimate from simulation ground truth; tests only.
    Perfect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEstimate {
    pub h_hat: Vec<Complex64>,
    pub method: Estimator,
    pub snr_db_used: Option<f64>,
}

/// `h_LS = y_p / x_p` per subcarrier.
pub fn ls_estimate(pilot_rx: &[Complex64], pilot_tx: &[Complex64]) -> Result<ChannelEstimate> {
    if pilot_rx.len() != pilot_tx.len() {
        return Err(Error::shape(format!(
            "pilot lengths differ: rx {} vs tx {}",
            pilot_rx.len(),
            pilot_tx.len()
        )));
    }
    let h_hat = pilot_rx
        .iter()
        .zip(pilot_tx)
        .enumerate()
        .map(|(k, (y, x))| {
            if x.norm_sqr() == 0.0 {
                Err(Error::DegeneratePilot(k))
            } else {
                Ok(y / x)
            }
        })
        .collect::<Result<_>>()?;
    Ok(ChannelEstimate {
        h_hat,
        method: Estimator::Ls,
        snr_db_used: None,
    })
}

/// Second-order channel statistics on the pilot subcarriers.
#[derive(Debug, Clone, PartialEq)]
pub struct MmseStatistics {
    pub r_hh: CMatrix,
    /// Cross-covariance of the true channel with its LS estimate. LS noise is
    /// independent of `h`, so this equals `r_hh`; kept separate anyway.
    pub r_h_hls: CMatrix,
    pub sample_count: usize,
    pub channel_config: Option<ChannelConfig>,
    pub seed: Option<u64>,
}

impl MmseStatistics {
    /// Empirical `E[h h^H]` over the given channel vectors, Hermitian by
    /// construction.
    pub fn from_samples<I>(samples: I) -> Result<Self>
    where
        I: IntoIterator,
        I::Item: AsRef<[Complex64]>,
    {
        let mut acc: Option<CMatrix> = None;
        let mut count = 0usize;
        for h in samples {
            let h = h.as_ref();
            let m = acc.get_or_insert_with(|| CMatrix::zeros(h.len()));
            if h.len() != m.dim() {
                return Err(Error::shape("channel samples differ in length"));
            }
            m.add_outer(h);
            count += 1;
        }
        let mut r_hh = acc.ok_or_else(|| Error::config("no channel samples"))?;
        r_hh.scale(1.0 / count as f64);
        let r_hh = r_hh.hermitian_part();
        Ok(Self {
            r_h_hls: r_hh.clone(),
            r_hh,
            sample_count: count,
            channel_config: None,
            seed: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.r_hh.dim()
    }

    pub fn save(&self, path: impl AsRef<Path>, config_hash: Option<&str>) -> Result<()> {
        let header = MmseHeader {
            format_version: MMSE_FORMAT_VERSION,
            dims: [self.dim(), self.dim()],
            sample_count: self.sample_count,
            channel_config: self.channel_config.clone(),
            seed: self.seed,
            config_hash: config_hash.map(str::to_owned),
            matrices: vec!["r_hh".into(), "r_h_hls".into()],
        };
        let mut w = BufWriter::new(File::create(path)?);
        crate::io::write_container(&mut w, MMSE_MAGIC, &serde_json::to_vec(&header)?)?;
        for m in [&self.r_hh, &self.r_h_hls] {
            for z in m.as_slice() {
                w.write_all(&z.re.to_le_bytes())?;
                w.write_all(&z.im.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let header_bytes = crate::io::read_container(&mut r, MMSE_MAGIC)?;
        let header: MmseHeader = serde_json::from_slice(&header_bytes)?;
        if header.format_version != MMSE_FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported statistics version {}",
                header.format_version
            )));
        }
        let [n, m] = header.dims;
        if n != m || n == 0 {
            return Err(Error::format(format!("bad statistics dims {n}x{m}")));
        }
        let mut read_matrix = || -> Result<CMatrix> {
            let mut buf = vec![0u8; n * n * 16];
            r.read_exact(&mut buf)
                .map_err(|_| Error::format("statistics payload truncated"))?;
            let data = buf
                .chunks_exact(16)
                .map(|c| {
                    let re = f64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
                    let im = f64::from_le_bytes(c[8..].try_into().expect("8 bytes"));
                    Complex64::new(re, im)
                })
                .collect();
            CMatrix::from_vec(n, data)
        };
        let r_hh = read_matrix()?;
        let r_h_hls = read_matrix()?;
        Ok(Self {
            r_hh,
            r_h_hls,
            sample_count: header.sample_count,
            channel_config: header.channel_config,
            seed: header.seed,
        })
    }
}

pub(crate) const MMSE_MAGIC: &[u8; 8] = b"RFFIMMSE";
const MMSE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct MmseHeader {
    pub format_version: u32,
    pub dims: [usize; 2],
    pub sample_count: usize,
    pub channel_config: Option<ChannelConfig>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub matrices: Vec<String>,
}

/// Pilot-row covariance from `n` fresh channel draws.
pub fn estimate_mmse_statistics(cfg: &ChannelConfig, n: usize, rng_seed: u64) -> Result<MmseStatistics> {
    cfg.validate()?;
    if n < MIN_MMSE_SAMPLES {
        return Err(Error::config(format!(
            "MMSE statistics need at least {MIN_MMSE_SAMPLES} realizations, got {n}"
        )));
    }
    let samples = (0..n as u64).map(|i| {
        let ch = sample_channel(cfg, seed::derive(rng_seed, &[seed::TAG_MMSE, i]));
        ch.h_freq.into_iter().next().expect("pilot row")
    });
    let mut stats = MmseStatistics::from_samples(samples)?;
    stats.channel_config = Some(cfg.clone());
    stats.seed = Some(rng_seed);
    Ok(stats)
}

/// Weight matrix `R_{h h_LS} (R_hh + I / SNR)^-1`.
pub fn mmse_weights(stats: &MmseStatistics, snr_db: f64) -> Result<CMatrix> {
    if !snr_db.is_finite() {
        return Err(Error::Numeric(format!("MMSE needs a finite SNR, got {snr_db}")));
    }
    let snr = 10f64.powf(snr_db / 10.0);
    let mut regularized = stats.r_hh.clone();
    regularized.add_diagonal(1.0 / snr);
    Ok(stats.r_h_hls.matmul(&regularized.inverse()?))
}

pub fn mmse_estimate(ls: &ChannelEstimate, stats: &MmseStatistics, snr_db: f64) -> Result<ChannelEstimate> {
    if ls.method != Estimator::Ls {
        return Err(Error::config("MMSE refinement expects an LS estimate"));
    }
    if ls.h_hat.len() != stats.dim() {
        return Err(Error::shape(format!(
            "estimate has {} subcarriers, statistics {}",
            ls.h_hat.len(),
            stats.dim()
        )));
    }
    let h_hat = mmse_weights(stats, snr_db)?.matvec(&ls.h_hat);
    if h_hat.iter().any(|h| !h.re.is_finite() || !h.im.is_finite()) {
        return Err(Error::Numeric("non-finite MMSE estimate".into()));
    }
    Ok(ChannelEstimate {
        h_hat,
        method: Estimator::Mmse,
        snr_db_used: Some(snr_db),
    })
}

/// Mean per-subcarrier squared error of paired LS and MMSE pilot estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimatorMse {
    pub snr_db: f64,
    pub trials: usize,
    pub ls: f64,
    pub mmse: Option<f64>,
}

/// Monte-Carlo estimator error over fresh channel draws. Each trial sends the
/// pilot through one realization with noise `CN(0, 1/SNR)`; both estimators
/// see the same received pilot. `stats` enables the MMSE branch.
pub fn estimator_mse(
    cfg: &ChannelConfig,
    stats: Option<&MmseStatistics>,
    snr_db: f64,
    trials: usize,
    rng_seed: u64,
) -> Result<EstimatorMse> {
    use rayon::prelude::*;
    if trials == 0 {
        return Err(Error::config("need at least one trial"));
    }
    let weights = stats.map(|s| mmse_weights(s, snr_db)).transpose()?;
    let sigma = (0.5 / 10f64.powf(snr_db / 10.0)).sqrt();
    let pilot = lts();
    let (ls, mmse) = (0..trials as u64)
        .into_par_iter()
        .map(|t| -> Result<(f64, f64)> {
            let ch = sample_channel(cfg, seed::derive(rng_seed, &[seed::TAG_CHANNEL, t]));
            let h = ch.pilot_gains();
            let mut rng = seed::rng_for(rng_seed, &[seed::TAG_NOISE, t]);
            let y: Vec<Complex64> = pilot
                .iter()
                .zip(h)
                .map(|(x, h)| {
                    let n: (f64, f64) = (rng.sample(rand_distr::StandardNormal), rng.sample(rand_distr::StandardNormal));
                    x * h + Complex64::new(n.0, n.1) * sigma
                })
                .collect();
            let est = ls_estimate(&y, &pilot)?;
            let err = |hat: &[Complex64]| hat.iter().zip(h).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / h.len() as f64;
            let e_mmse = weights.as_ref().map_or(0.0, |w| err(&w.matvec(&est.h_hat)));
            Ok((err(&est.h_hat), e_mmse))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold((0.0, 0.0), |acc, (a, b)| (acc.0 + a, acc.1 + b));
    let n = trials as f64;
    Ok(EstimatorMse {
        snr_db,
        trials,
        ls: ls / n,
        mmse: weights.map(|_| mmse / n),
    })
}

pub const SAMPLE_ROWS: usize = 2;
pub const SAMPLE_COLS: usize = SYMBOLS_PER_PACKET;

/// Equalized packet laid out as `2 x 260` reals: row 0 holds I, row 1 Q,
/// columns run frame-major over the data symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct EqualizedSample {
    pub values: Vec<f64>,
    pub method: Estimator,
    pub label: Option<usize>,
    pub mask_spec: Vec<Range<usize>>,
}

impl EqualizedSample {
    pub fn from_symbols(symbols: &[Complex64], method: Estimator) -> Result<Self> {
        if symbols.len() != SAMPLE_COLS {
            return Err(Error::shape(format!(
                "{} symbols, expected {SAMPLE_COLS}",
                symbols.len()
            )));
        }
        let mut values = vec![0.0; SAMPLE_ROWS * SAMPLE_COLS];
        for (c, s) in symbols.iter().enumerate() {
            values[c] = s.re;
            values[SAMPLE_COLS + c] = s.im;
        }
        Ok(Self {
            values,
            method,
            label: None,
            mask_spec: Vec::new(),
        })
    }

    pub fn symbol(&self, col: usize) -> Complex64 {
        Complex64::new(self.values[col], self.values[SAMPLE_COLS + col])
    }

    pub fn symbols(&self) -> Vec<Complex64> {
        (0..SAMPLE_COLS).map(|c| self.symbol(c)).collect()
    }

    pub fn is_masked(&self, col: usize) -> bool {
        self.mask_spec.iter().any(|r| r.contains(&col))
    }
}

/// `x_hat = y / h_hat`, one pilot-derived estimate for all five data frames.
pub fn equalize(data_rx: &[Complex64], estimate: &ChannelEstimate) -> Result<EqualizedSample> {
    if data_rx.len() != SAMPLE_COLS || estimate.h_hat.len() != NUM_SUBCARRIERS {
        return Err(Error::shape(format!(
            "equalize: {} data symbols with a {}-subcarrier estimate",
            data_rx.len(),
            estimate.h_hat.len()
        )));
    }
    if let Some((index, h)) = estimate
        .h_hat
        .iter()
        .enumerate()
        .find(|(_, h)| !(h.norm() > DEEP_FADE_THRESHOLD))
    {
        return Err(Error::DeepFade {
            index,
            magnitude: h.norm(),
        });
    }
    let symbols: Vec<Complex64> = data_rx
        .iter()
        .enumerate()
        .map(|(c, y)| y / estimate.h_hat[c % NUM_SUBCARRIERS])
        .collect();
    EqualizedSample::from_symbols(&symbols, estimate.method)
}

/// Zero one contiguous run of `round(ratio * 260)` columns in both rows.
pub fn block_mask(sample: &EqualizedSample, ratio: f64, rng_seed: u64) -> Result<EqualizedSample> {
    let mut rng = seed::rng_for(rng_seed, &[seed::TAG_AUGMENT, 0xB10C]);
    block_mask_with(sample, ratio, &mut rng)
}

fn block_mask_with(sample: &EqualizedSample, ratio: f64, rng: &mut impl Rng) -> Result<EqualizedSample> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let mut out = sample.clone();
    let len = (ratio * SAMPLE_COLS as f64).round() as usize;
    if len == 0 {
        return Ok(out);
    }
    let start = rng.random_range(0..=SAMPLE_COLS - len);
    for c in start..start + len {
        out.values[c] = 0.0;
        out.values[SAMPLE_COLS + c] = 0.0;
    }
    out.mask_spec.push(start..start + len);
    Ok(out)
}

/// Which estimator produces each view of a positive pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    Mixed,
    LsOnly,
    MmseOnly,
}

impl AugmentMode {
    pub fn estimators(self) -> (Estimator, Estimator) {
        match self {
            AugmentMode::Mixed => (Estimator::Ls, Estimator::Mmse),
            AugmentMode::LsOnly => (Estimator::Ls, Estimator::Ls),
            AugmentMode::MmseOnly => (Estimator::Mmse, Estimator::Mmse),
        }
    }

    /// Estimator used to present packets to the encoder at evaluation time.
    pub fn feature_estimator(self) -> Estimator {
        match self {
            AugmentMode::Mixed | AugmentMode::LsOnly => Estimator::Ls,
            AugmentMode::MmseOnly => Estimator::Mmse,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentMode::Mixed => "mixed",
            AugmentMode::LsOnly => "ls_only",
            AugmentMode::MmseOnly => "mmse_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Inclusive integer SNR range for the added AWGN; `None` adds no noise.
    pub snr_range_db: Option<(i32, i32)>,
    pub mask_ratio: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            snr_range_db: Some(DEFAULT_SNR_RANGE_DB),
            mask_ratio: DEFAULT_MASK_RATIO,
        }
    }
}

/// Estimate the channel of `y` from its pilot and equalize the data.
pub fn estimate_and_equalize(
    rx: &crate::waveform::FrequencyFrame,
    estimator: Estimator,
    snr_db: f64,
    stats: &MmseStatistics,
    truth: Option<&crate::channel::ChannelRealization>,
) -> Result<EqualizedSample> {
    let estimate = match estimator {
        Estimator::Ls => ls_estimate(&rx.pilot, &lts())?,
        Estimator::Mmse => mmse_estimate(&ls_estimate(&rx.pilot, &lts())?, stats, snr_db)?,
        Estimator::Perfect => {
            let truth = truth.ok_or_else(|| Error::config("perfect estimate needs channel truth"))?;
            ChannelEstimate {
                h_hat: truth.pilot_gains().to_vec(),
                method: Estimator::Perfect,
                snr_db_used: None,
            }
        }
    };
    equalize(&rx.data, &estimate)
}

/// Equalize a received packet as-is: no added noise, no mask.
pub fn equalize_received(
    y: &ReceivedFrame,
    estimator: Estimator,
    stats: &MmseStatistics,
) -> Result<EqualizedSample> {
    let mut s = estimate_and_equalize(&y.rx, estimator, y.snr_db, stats, y.truth.as_ref())?;
    s.label = y.device_id;
    Ok(s)
}

/// One augmented view: AWGN at a drawn integer SNR, equalization with the
/// given estimator at that SNR, then block masking.
pub fn augment_view(
    y: &ReceivedFrame,
    estimator: Estimator,
    aug: &AugmentConfig,
    stats: &MmseStatistics,
    rng: &mut impl Rng,
) -> Result<EqualizedSample> {
    let (rx, snr_db) = match aug.snr_range_db {
        Some((lo, hi)) => {
            let snr = f64::from(rng.random_range(lo..=hi));
            (add_awgn_with(&y.rx, snr, rng), snr)
        }
        None => (y.rx.clone(), y.snr_db),
    };
    let mut view = estimate_and_equalize(&rx, estimator, snr_db, stats, y.truth.as_ref())?;
    view.label = y.device_id;
    block_mask_with(&view, aug.mask_ratio, rng)
}

/// Positive pair `(view_1, view_2)` of one packet under the given estimator
/// assignment. Each view draws its own SNR, noise and mask.
pub fn make_views(
    y: &ReceivedFrame,
    stats: &MmseStatistics,
    estimators: (Estimator, Estimator),
    aug: &AugmentConfig,
    rng_seed: u64,
) -> Result<(EqualizedSample, EqualizedSample)> {
    let mut rng1 = seed::rng_for(rng_seed, &[seed::TAG_AUGMENT, 1]);
    let mut rng2 = seed::rng_for(rng_seed, &[seed::TAG_AUGMENT, 2]);
    let v1 = augment_view(y, estimators.0, aug, stats, &mut rng1)?;
    let v2 = augment_view(y, estimators.1, aug, stats, &mut rng2)?;
    Ok((v1, v2))
}

/// The residual-channel pair `(x_LS, x_MMSE)` with 10% block masking.
pub fn make_pair(
    y: &ReceivedFrame,
    stats: &MmseStatistics,
    snr_range_db: (i32, i32),
    rng_seed: u64,
) -> Result<(EqualizedSample, EqualizedSample)> {
    let aug = AugmentConfig {
        snr_range_db: Some(snr_range_db),
        mask_ratio: DEFAULT_MASK_RATIO,
    };
    make_views(y, stats, AugmentMode::Mixed.estimators(), &aug, rng_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{add_awgn, apply_channel, sample_channel_with_doppler, ChannelRealization};
    use crate::waveform::{apply_iq_imbalance, build_frame, DeviceProfile};

    fn unit() -> Complex64 {
        Complex64::new(1.0, 0.0)
    }

    fn received(
        profile: &DeviceProfile,
        ch: &ChannelRealization,
        snr_db: Option<f64>,
        s: u64,
    ) -> (ReceivedFrame, Vec<Complex64>) {
        let impaired = apply_iq_imbalance(&build_frame(s), profile);
        let clean = apply_channel(&impaired, ch).unwrap();
        let rx = match snr_db {
            Some(snr) => add_awgn(&clean, snr, s),
            None => clean,
        };
        let frame = ReceivedFrame {
            rx,
            device_id: Some(profile.device_id),
            snr_db: snr_db.unwrap_or(300.0),
            truth: Some(ch.clone()),
        };
        (frame, impaired.frame.data)
    }

    fn tdl_stats() -> MmseStatistics {
        estimate_mmse_statistics(&ChannelConfig::default(), MIN_MMSE_SAMPLES, 5).unwrap()
    }

    #[test]
    fn ls_identity_and_exact_inversion() {
        let p = lts();
        let est = ls_estimate(&p, &p).unwrap();
        assert!(est.h_hat.iter().all(|h| (h - unit()).norm() < 1e-15));
        let ch = sample_channel(&ChannelConfig::default(), 2);
        let y: Vec<_> = p.iter().zip(ch.pilot_gains()).map(|(x, h)| x * h).collect();
        let est = ls_estimate(&y, &p).unwrap();
        for (a, b) in est.h_hat.iter().zip(ch.pilot_gains()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn ls_rejects_zero_pilot() {
        let mut p = lts();
        p[7] = Complex64::new(0.0, 0.0);
        assert!(matches!(ls_estimate(&lts(), &p), Err(Error::DegeneratePilot(7))));
    }

    #[test]
    fn ls_mse_is_inverse_snr() {
        // Unit channel, 20 dB: MSE = 1/100.
        let p = lts();
        let pilot_frame = crate::waveform::FrequencyFrame { pilot: p.clone(), data: p.clone() };
        let trials = 100_000u64;
        let mut err = 0.0;
        for t in 0..trials {
            let y = add_awgn(&pilot_frame, 20.0, t);
            let est = ls_estimate(&y.pilot, &p).unwrap();
            err += est.h_hat.iter().map(|h| (h - unit()).norm_sqr()).sum::<f64>() / 52.0;
        }
        let mse = err / trials as f64;
        assert!((mse - 0.01).abs() < 0.05 * 0.01, "{mse}");
    }

    #[test]
    fn flat_channel_covariance_is_all_ones() {
        let cfg = ChannelConfig {
            num_taps: 1,
            ..Default::default()
        };
        let stats = estimate_mmse_statistics(&cfg, MIN_MMSE_SAMPLES, 1).unwrap();
        let mean_diag: f64 = (0..52).map(|i| stats.r_hh[(i, i)].re).sum::<f64>() / 52.0;
        for i in 0..52 {
            for j in 0..52 {
                // Fully correlated: every entry equals the common power.
                assert!((stats.r_hh[(i, j)] - mean_diag).norm() < 1e-9);
            }
        }
        assert!((mean_diag - 1.0).abs() < 0.05);
        assert_eq!(stats.r_hh, stats.r_hh.conj_transpose());
    }

    #[test]
    fn iid_channel_covariance_is_identity() {
        let mut rng = seed::rng(8);
        let samples: Vec<Vec<Complex64>> = (0..20_000)
            .map(|_| {
                (0..52)
                    .map(|_| {
                        let re: f64 = rng.sample(rand_distr::StandardNormal);
                        let im: f64 = rng.sample(rand_distr::StandardNormal);
                        Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
                    })
                    .collect()
            })
            .collect();
        let stats = MmseStatistics::from_samples(&samples).unwrap();
        assert!(stats.r_hh.max_abs_diff(&CMatrix::identity(52)) < 0.05);
    }

    #[test]
    fn statistics_require_enough_samples() {
        assert!(matches!(
            estimate_mmse_statistics(&ChannelConfig::default(), 100, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn statistics_round_trip() {
        let stats = tdl_stats();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.bin");
        stats.save(&path, Some("abc")).unwrap();
        let back = MmseStatistics::load(&path).unwrap();
        assert_eq!(back, stats);
        std::fs::write(&path, b"NOTSTATS........").unwrap();
        assert!(matches!(MmseStatistics::load(&path), Err(Error::Format(_))));
    }

    fn full_rank_stats() -> MmseStatistics {
        // Exponentially correlated subcarriers: Toeplitz, positive definite.
        let mut r = CMatrix::zeros(52);
        for i in 0..52 {
            for j in 0..52 {
                r[(i, j)] = Complex64::new(0.8f64.powi((i as i32 - j as i32).abs()), 0.0);
            }
        }
        MmseStatistics {
            r_h_hls: r.clone(),
            r_hh: r,
            sample_count: 0,
            channel_config: None,
            seed: None,
        }
    }

    #[test]
    fn mmse_limits() {
        let stats = full_rank_stats();
        let ls = ls_estimate(&lts(), &lts()).unwrap();
        let hi = mmse_estimate(&ls, &stats, 300.0).unwrap();
        for (a, b) in hi.h_hat.iter().zip(&ls.h_hat) {
            assert!((a - b).norm() < 1e-6);
        }
        let lo = mmse_estimate(&ls, &stats, -200.0).unwrap();
        let norm: f64 = lo.h_hat.iter().map(|h| h.norm_sqr()).sum::<f64>().sqrt();
        assert!(norm < 1e-10, "{norm}");
        assert_eq!(lo.method, Estimator::Mmse);
        assert!(mmse_estimate(&lo, &stats, 10.0).is_err());
    }

    #[test]
    fn mmse_beats_ls_at_10db() {
        let cfg = ChannelConfig::default();
        let stats = tdl_stats();
        let p = lts();
        let (mut e_ls, mut e_mmse) = (0.0, 0.0);
        for t in 0..10_000u64 {
            let ch = sample_channel(&cfg, 1_000_000 + t);
            let clean = crate::waveform::FrequencyFrame {
                pilot: p.iter().zip(ch.pilot_gains()).map(|(x, h)| x * h).collect(),
                data: vec![unit(); SYMBOLS_PER_PACKET],
            };
            let y = add_awgn(&clean, 10.0, t);
            let ls = ls_estimate(&y.pilot, &p).unwrap();
            let mmse = mmse_estimate(&ls, &stats, 10.0).unwrap();
            for k in 0..52 {
                e_ls += (ls.h_hat[k] - ch.pilot_gains()[k]).norm_sqr();
                e_mmse += (mmse.h_hat[k] - ch.pilot_gains()[k]).norm_sqr();
            }
        }
        assert!(e_mmse < e_ls, "mmse {e_mmse} vs ls {e_ls}");
    }

    #[test]
    fn equalization_identities() {
        let profile = DeviceProfile::new(3, 0.3, 1.0).unwrap();
        let ch = sample_channel(&ChannelConfig::default(), 17);
        let frozen = ChannelRealization {
            h_freq: vec![ch.h_freq[0].clone(); crate::channel::FRAME_TIMES],
            ..ch
        };
        let (y, x_bb) = received(&profile, &frozen, None, 4);
        let exact = ChannelEstimate {
            h_hat: frozen.pilot_gains().to_vec(),
            method: Estimator::Perfect,
            snr_db_used: None,
        };
        let eq = equalize(y.data_rx(), &exact).unwrap();
        for (a, b) in eq.symbols().iter().zip(&x_bb) {
            assert!((a - b).norm() < 1e-9);
        }
        let doubled = ChannelEstimate {
            h_hat: exact.h_hat.iter().map(|h| h * 2.0).collect(),
            ..exact.clone()
        };
        let eq2 = equalize(y.data_rx(), &doubled).unwrap();
        for (a, b) in eq2.symbols().iter().zip(&x_bb) {
            assert!((a - b * 0.5).norm() < 1e-9);
        }
        let mut faded = exact;
        faded.h_hat[9] = Complex64::new(1e-12, 0.0);
        assert!(matches!(
            equalize(y.data_rx(), &faded),
            Err(Error::DeepFade { index: 9, .. })
        ));
    }

    #[test]
    fn ls_and_mmse_residuals_differ() {
        let stats = tdl_stats();
        let profile = DeviceProfile::new(0, -0.6, 2.0).unwrap();
        let ch = sample_channel_with_doppler(&ChannelConfig::default(), 0.0, 3);
        let (y, x_bb) = received(&profile, &ch, Some(15.0), 6);
        let a = equalize_received(&y, Estimator::Ls, &stats).unwrap();
        let b = equalize_received(&y, Estimator::Mmse, &stats).unwrap();
        let res = |s: &EqualizedSample| -> f64 {
            s.symbols().iter().zip(&x_bb).map(|(u, v)| (u - v).norm_sqr()).sum()
        };
        let (ra, rb) = (res(&a), res(&b));
        assert!(ra > 0.0 && rb > 0.0);
        assert!((ra - rb).abs() > 1e-6);
    }

    #[test]
    fn masking() {
        let profile = DeviceProfile::new(0, 0.0, 0.0).unwrap();
        let (y, _) = received(&profile, &ChannelRealization::constant(unit()), None, 1);
        let stats = full_rank_stats();
        let s = equalize_received(&y, Estimator::Ls, &stats).unwrap();
        assert_eq!(block_mask(&s, 0.0, 3).unwrap(), s);
        let m = block_mask(&s, 0.1, 3).unwrap();
        let zeroed = (0..SAMPLE_COLS)
            .filter(|&c| m.values[c] == 0.0 && m.values[SAMPLE_COLS + c] == 0.0)
            .count();
        assert_eq!(zeroed, 26);
        assert_eq!(m.mask_spec.len(), 1);
        assert_eq!(m.mask_spec[0].len(), 26);
        for c in 0..SAMPLE_COLS {
            if m.is_masked(c) {
                assert_eq!(m.symbol(c), Complex64::new(0.0, 0.0));
            } else {
                assert_eq!(m.symbol(c), s.symbol(c));
            }
        }
        assert_eq!(block_mask(&s, 0.1, 3).unwrap(), m);
        assert!(block_mask(&s, 1.0, 3).is_err());
    }

    #[test]
    fn pair_of_a_quiet_flat_packet_agrees() {
        let stats = tdl_stats();
        let cfg = ChannelConfig {
            num_taps: 1,
            ..Default::default()
        };
        let profile = DeviceProfile::new(1, 0.6, -2.0).unwrap();
        let ch = sample_channel_with_doppler(&cfg, 0.0, 12);
        let (y, _) = received(&profile, &ch, Some(20.0), 2);
        let aug = AugmentConfig {
            snr_range_db: Some((20, 20)),
            mask_ratio: 0.0,
        };
        let (a, b) = make_views(&y, &stats, AugmentMode::Mixed.estimators(), &aug, 9).unwrap();
        let dot: f64 = a.values.iter().zip(&b.values).map(|(u, v)| u * v).sum();
        let na: f64 = a.values.iter().map(|u| u * u).sum::<f64>().sqrt();
        let nb: f64 = b.values.iter().map(|u| u * u).sum::<f64>().sqrt();
        assert!(dot / (na * nb) > 0.9, "{}", dot / (na * nb));
        let (m1, m2) = make_pair(&y, &stats, (20, 20), 9).unwrap();
        assert_eq!(m1.method, Estimator::Ls);
        assert_eq!(m2.method, Estimator::Mmse);
        assert_eq!(m1.mask_spec[0].len(), 26);
    }

    #[test]
    fn pair_without_randomness_is_identical() {
        let stats = full_rank_stats();
        let profile = DeviceProfile::new(2, -0.3, 1.0).unwrap();
        let ch = sample_channel_with_doppler(&ChannelConfig::default(), 0.0, 4);
        let (y, _) = received(&profile, &ch, None, 3);
        let aug = AugmentConfig {
            snr_range_db: None,
            mask_ratio: 0.0,
        };
        let (a, b) =
            make_views(&y, &stats, (Estimator::Perfect, Estimator::Perfect), &aug, 1).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn pair_is_deterministic() {
        let stats = tdl_stats();
        let profile = DeviceProfile::new(4, 0.3, 1.0).unwrap();
        let ch = sample_channel(&ChannelConfig::default(), 40);
        let (y, _) = received(&profile, &ch, Some(20.0), 5);
        assert_eq!(make_pair(&y, &stats, (10, 20), 77).unwrap(), make_pair(&y, &stats, (10, 20), 77).unwrap());
    }

    #[test]
    fn ls_view_carries_more_residual_energy() {
        // E[1/|h_LS|^2] diverges for a Gaussian estimate, so sample means are
        // ruled by deep-fade outliers; compare medians and the paired win rate.
        let stats = tdl_stats();
        let cfg = ChannelConfig::default();
        let devices = crate::waveform::DeviceSet::default();
        let aug = AugmentConfig {
            snr_range_db: Some((10, 20)),
            mask_ratio: 0.0,
        };
        let (mut e_ls, mut e_mmse) = (Vec::new(), Vec::new());
        for t in 0..1000u64 {
            let profile = devices.devices[(t % 7) as usize];
            let ch = sample_channel(&cfg, 500 + t);
            let (y, x_bb) = received(&profile, &ch, Some(20.0), t);
            let (a, b) = make_views(&y, &stats, AugmentMode::Mixed.estimators(), &aug, t).unwrap();
            let energy = |s: &EqualizedSample| -> f64 {
                s.symbols().iter().zip(&x_bb).map(|(u, v)| (u - v).norm_sqr()).sum()
            };
            e_ls.push(energy(&a));
            e_mmse.push(energy(&b));
        }
        let wins = e_ls.iter().zip(&e_mmse).filter(|(a, b)| a >= b).count();
        let median = |v: &mut Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let (m_ls, m_mmse) = (median(&mut e_ls), median(&mut e_mmse));
        assert!(m_ls >= m_mmse, "median ls {m_ls} vs mmse {m_mmse}");
        assert!(wins > 500, "LS residual larger in only {wins} of 1000 pairs");
    }
}
