//! Tapped-delay-line multipath channel with an exponential power delay
//! profile and Jakes-correlated Doppler evolution, applied per subcarrier,
//! plus AWGN at a target SNR.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::seed;
use crate::waveform::{
    FrequencyFrame, ImpairedFrame, FFT_LEN, NUM_DATA_FRAMES, NUM_SUBCARRIERS,
};

/// Rows of a realization: the pilot time followed by each data frame.
pub const FRAME_TIMES: usize = NUM_DATA_FRAMES + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    pub rms_delay_ns: f64,
    pub sample_period_ns: f64,
    pub num_taps: usize,
    pub doppler_hz_range: [f64; 2],
    pub frame_interval_s: f64,
    pub base_snr_db: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            rms_delay_ns: 30.0,
            // 20 MHz sampling.
            sample_period_ns: 50.0,
            num_taps: 8,
            doppler_hz_range: [0.0, 5.0],
            frame_interval_s: 1e-3,
            base_snr_db: 20.0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rms_delay_ns > 0.0) || !self.rms_delay_ns.is_finite() {
            return Err(Error::config("rms_delay_ns must be positive"));
        }
        if !(self.sample_period_ns > 0.0) || !self.sample_period_ns.is_finite() {
            return Err(Error::config("sample_period_ns must be positive"));
        }
        if self.num_taps == 0 {
            return Err(Error::config("num_taps must be at least 1"));
        }
        let [lo, hi] = self.doppler_hz_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::config(format!(
                "doppler range [{lo}, {hi}] must be non-negative and ordered"
            )));
        }
        if !(self.frame_interval_s >= 0.0) || !self.frame_interval_s.is_finite() {
            return Err(Error::config("frame_interval_s must be non-negative"));
        }
        if !self.base_snr_db.is_finite() {
            return Err(Error::config("base_snr_db must be finite"));
        }
        if self.num_taps > 1 && self.rms_delay_ns >= max_rms_delay(self) {
            return Err(Error::config(format!(
                "{} taps at {} ns cannot reach an RMS delay spread of {} ns",
                self.num_taps, self.sample_period_ns, self.rms_delay_ns
            )));
        }
        Ok(())
    }

    /// Tap powers `p_l ∝ exp(-l T_s / tau)`, normalized to unit sum. The decay
    /// constant `tau` is solved so the discrete profile's RMS delay spread
    /// equals `rms_delay_ns`.
    pub fn power_delay_profile(&self) -> Vec<f64> {
        if self.num_taps == 1 {
            return vec![1.0];
        }
        let tau = self.decay_constant_ns();
        exponential_pdp(self.num_taps, self.sample_period_ns, tau)
    }

    /// Decay constant of the exponential profile, in ns.
    pub fn decay_constant_ns(&self) -> f64 {
        let target = self.rms_delay_ns;
        let (mut lo, mut hi) = (1e-6 * self.sample_period_ns, 1e6 * self.sample_period_ns);
        // rms spread is increasing in tau; bisect in log space.
        for _ in 0..80 {
            let mid = (lo * hi).sqrt();
            let pdp = exponential_pdp(self.num_taps, self.sample_period_ns, mid);
            if rms_delay_spread(&pdp, self.sample_period_ns) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo * hi).sqrt()
    }

    pub fn tap_delays_ns(&self) -> Vec<f64> {
        (0..self.num_taps)
            .map(|l| l as f64 * self.sample_period_ns)
            .collect()
    }
}

fn exponential_pdp(taps: usize, period_ns: f64, tau_ns: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..taps)
        .map(|l| (-(l as f64) * period_ns / tau_ns).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

/// Largest spread reachable with the given taps (flat profile).
fn max_rms_delay(cfg: &ChannelConfig) -> f64 {
    let flat = vec![1.0 / cfg.num_taps as f64; cfg.num_taps];
    rms_delay_spread(&flat, cfg.sample_period_ns)
}

/// `sqrt(sum p tau^2 / sum p - (sum p tau / sum p)^2)` for taps spaced by `period_ns`.
pub fn rms_delay_spread(powers: &[f64], period_ns: f64) -> f64 {
    let total: f64 = powers.iter().sum();
    let (m1, m2) = powers.iter().enumerate().fold((0.0, 0.0), |(m1, m2), (l, p)| {
        let t = l as f64 * period_ns;
        (m1 + p * t, m2 + p * t * t)
    });
    let (m1, m2) = (m1 / total, m2 / total);
    (m2 - m1 * m1).max(0.0).sqrt()
}

/// FFT bin of each active subcarrier: -26..=-1 then 1..=26.
pub fn active_subcarrier_bins() -> [i32; NUM_SUBCARRIERS] {
    let half = (NUM_SUBCARRIERS / 2) as i32;
    let mut bins = [0i32; NUM_SUBCARRIERS];
    for (i, b) in bins.iter_mut().enumerate() {
        let i = i as i32;
        *b = if i < half { i - half } else { i - half + 1 };
    }
    bins
}

/// DFT of a tap vector evaluated on the active subcarriers.
pub fn taps_to_subcarriers(taps: &[Complex64]) -> Vec<Complex64> {
    apply_dft(&dft_matrix(taps.len()), taps)
}

/// Row-major `NUM_SUBCARRIERS x taps` matrix of `exp(-2 pi i k l / FFT_LEN)`.
fn dft_matrix(taps: usize) -> Vec<Complex64> {
    active_subcarrier_bins()
        .iter()
        .flat_map(|&k| {
            (0..taps).map(move |l| Complex64::from_polar(1.0, -2.0 * PI * f64::from(k) * l as f64 / FFT_LEN as f64))
        })
        .collect()
}

fn apply_dft(matrix: &[Complex64], taps: &[Complex64]) -> Vec<Complex64> {
    matrix
        .chunks_exact(taps.len())
        .map(|row| row.iter().zip(taps).map(|(w, t)| w * t).sum())
        .collect()
}

/// Bessel function of the first kind, order zero.
pub fn bessel_j0(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 8.0 {
        let y = x * x;
        let num = 57_568_490_574.0
            + y * (-13_362_590_354.0
                + y * (651_619_640.7
                    + y * (-11_214_424.18 + y * (77_392.330_17 + y * (-184.905_245_6)))));
        let den = 57_568_490_411.0
            + y * (1_029_532_985.0
                + y * (9_494_680.718 + y * (59_272.648_53 + y * (267.853_271_2 + y))));
        num / den
    } else {
        let z = 8.0 / ax;
        let y = z * z;
        let xx = ax - 0.785_398_164;
        let p = 1.0
            + y * (-0.109_862_862_7e-2
                + y * (0.273_451_040_7e-4 + y * (-0.207_337_063_9e-5 + y * 0.209_388_721_1e-6)));
        let q = -0.156_249_999_5e-1
            + y * (0.143_048_876_5e-3
                + y * (-0.691_114_765_1e-5 + y * (0.762_109_516_1e-6 - y * 0.934_935_152e-7)));
        (std::f64::consts::FRAC_2_PI / ax).sqrt() * (xx.cos() * p - z * xx.sin() * q)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    /// `FRAME_TIMES x num_taps`; row 0 is the pilot time.
    pub taps: Vec<Vec<Complex64>>,
    /// `FRAME_TIMES x 52` per-subcarrier gains.
    pub h_freq: Vec<Vec<Complex64>>,
    pub doppler_hz: f64,
}

impl ChannelRealization {
    pub fn pilot_gains(&self) -> &[Complex64] {
        &self.h_freq[0]
    }

    pub fn data_gains(&self, frame: usize) -> &[Complex64] {
        &self.h_freq[frame + 1]
    }

    /// A frequency-flat, time-invariant channel with gain `h`.
    pub fn constant(h: Complex64) -> Self {
        Self {
            taps: vec![vec![h]; FRAME_TIMES],
            h_freq: vec![vec![h; NUM_SUBCARRIERS]; FRAME_TIMES],
            doppler_hz: 0.0,
        }
    }
}

fn complex_gaussian(rng: &mut impl Rng, variance: f64) -> Complex64 {
    let s = (0.5 * variance).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// Draw a channel with Doppler frequency uniform over the configured range.
pub fn sample_channel(cfg: &ChannelConfig, rng_seed: u64) -> ChannelRealization {
    let mut rng = seed::rng_for(rng_seed, &[seed::TAG_CHANNEL]);
    let [lo, hi] = cfg.doppler_hz_range;
    let doppler = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    sample_with_rng(cfg, doppler, &mut rng)
}

/// Draw a channel with a fixed Doppler frequency.
pub fn sample_channel_with_doppler(
    cfg: &ChannelConfig,
    doppler_hz: f64,
    rng_seed: u64,
) -> ChannelRealization {
    let mut rng = seed::rng_for(rng_seed, &[seed::TAG_CHANNEL, 1]);
    sample_with_rng(cfg, doppler_hz, &mut rng)
}

fn sample_with_rng(cfg: &ChannelConfig, doppler_hz: f64, rng: &mut impl Rng) -> ChannelRealization {
    let pdp = cfg.power_delay_profile();
    // Gauss-Markov step matching the Jakes autocorrelation at the frame spacing.
    let rho = bessel_j0(2.0 * PI * doppler_hz * cfg.frame_interval_s);
    let innovation = (1.0 - rho * rho).max(0.0).sqrt();

    let mut taps = Vec::with_capacity(FRAME_TIMES);
    let first: Vec<Complex64> = pdp.iter().map(|&p| complex_gaussian(rng, p)).collect();
    taps.push(first);
    for r in 1..FRAME_TIMES {
        let next = taps[r - 1]
            .iter()
            .zip(&pdp)
            .map(|(&prev, &p)| {
                let w = complex_gaussian(rng, p);
                if innovation == 0.0 {
                    prev
                } else {
                    prev * rho + w * innovation
                }
            })
            .collect();
        taps.push(next);
    }
    let dft = dft_matrix(cfg.num_taps);
    let h_freq = taps.iter().map(|t| apply_dft(&dft, t)).collect();
    ChannelRealization {
        taps,
        h_freq,
        doppler_hz,
    }
}

/// Noiseless part of `y = h x_BB + n`: per-subcarrier products, pilot row for
/// the LTS and row `r + 1` for data frame `r`.
pub fn apply_channel(frame: &ImpairedFrame, ch: &ChannelRealization) -> Result<FrequencyFrame> {
    let x = &frame.frame;
    x.check_shape()?;
    if ch.h_freq.len() != FRAME_TIMES || ch.h_freq.iter().any(|r| r.len() != NUM_SUBCARRIERS) {
        return Err(Error::shape(format!(
            "channel realization must be {FRAME_TIMES} x {NUM_SUBCARRIERS}"
        )));
    }
    let pilot = x
        .pilot
        .iter()
        .zip(ch.pilot_gains())
        .map(|(s, h)| s * h)
        .collect();
    let data = (0..NUM_DATA_FRAMES)
        .flat_map(|r| {
            x.data_row(r)
                .iter()
                .zip(ch.data_gains(r))
                .map(|(s, h)| s * h)
        })
        .collect();
    Ok(FrequencyFrame { pilot, data })
}

/// Add circular complex Gaussian noise with `sigma^2 = P_sig / 10^(snr/10)`,
/// `P_sig` being the mean per-symbol power of `signal`.
pub fn add_awgn(signal: &FrequencyFrame, snr_db: f64, rng_seed: u64) -> FrequencyFrame {
    let mut rng = seed::rng_for(rng_seed, &[seed::TAG_NOISE]);
    add_awgn_with(signal, snr_db, &mut rng)
}

pub(crate) fn add_awgn_with(signal: &FrequencyFrame, snr_db: f64, rng: &mut impl Rng) -> FrequencyFrame {
    let variance = signal.mean_power() / 10f64.powf(snr_db / 10.0);
    signal.map(|s| s + complex_gaussian(rng, variance))
}

/// A packet as seen by the receiver, with simulation-only ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedFrame {
    pub rx: FrequencyFrame,
    pub device_id: Option<usize>,
    pub snr_db: f64,
    pub truth: Option<ChannelRealization>,
}

impl ReceivedFrame {
    pub fn pilot_rx(&self) -> &[Complex64] {
        &self.rx.pilot
    }

    pub fn data_rx(&self) -> &[Complex64] {
        &self.rx.data
    }
}
