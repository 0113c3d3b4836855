//! QPSK/OFDM packet generation and transmitter IQ imbalance.
//!
//! Packets live entirely in the frequency domain: one known long training
//! sequence (LTS) on the 52 active subcarriers followed by five QPSK data
//! frames. The 64-point FFT grid is bookkeeping only.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::seed;

pub const FFT_LEN: usize = 64;
pub const NUM_SUBCARRIERS: usize = 52;
pub const NUM_DATA_FRAMES: usize = 5;
/// Data symbols per packet (5 frames x 52 subcarriers).
pub const SYMBOLS_PER_PACKET: usize = NUM_DATA_FRAMES * NUM_SUBCARRIERS;

pub const AMP_IMBALANCE_RANGE_DB: (f64, f64) = (-0.9, 0.9);
pub const PHASE_IMBALANCE_RANGE_DEG: (f64, f64) = (-3.0, 3.0);

/// Frozen LTS content as QPSK dibits (first bit in the high position).
const LTS_DIBITS: [u8; NUM_SUBCARRIERS] = [
    1, 2, 1, 3, 0, 2, 0, 3, 3, 1, 1, 0, 2, 2, 3, 1, 0, 0, 0, 2, 3, 2, 2, 0, 2, 3, 0, 1, 1, 2,
    0, 1, 2, 3, 1, 0, 3, 2, 1, 2, 0, 1, 3, 1, 3, 2, 0, 0, 2, 0, 3, 2,
];

/// Gray-mapped QPSK: first bit selects the sign of I, second the sign of Q.
fn qpsk_symbol(b0: bool, b1: bool) -> Complex64 {
    let re = if b0 { -FRAC_1_SQRT_2 } else { FRAC_1_SQRT_2 };
    let im = if b1 { -FRAC_1_SQRT_2 } else { FRAC_1_SQRT_2 };
    Complex64::new(re, im)
}

/// Map `2 * count` bits onto `count` unit-modulus QPSK symbols.
pub fn qpsk_modulate(bits: &[bool], count: usize) -> Result<Vec<Complex64>> {
    if bits.len() != 2 * count {
        return Err(Error::shape(format!(
            "qpsk_modulate: {} bits for {} symbols (need {})",
            bits.len(),
            count,
            2 * count
        )));
    }
    Ok(bits
        .chunks_exact(2)
        .map(|pair| qpsk_symbol(pair[0], pair[1]))
        .collect())
}

/// The long training sequence shared by every packet.
pub fn lts() -> Vec<Complex64> {
    LTS_DIBITS
        .iter()
        .map(|&d| qpsk_symbol(d & 0b10 != 0, d & 0b01 != 0))
        .collect()
}

/// Complex per-subcarrier symbols of one packet: pilot plus five data frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyFrame {
    pub pilot: Vec<Complex64>,
    /// Frame-major, `NUM_DATA_FRAMES * NUM_SUBCARRIERS` entries.
    pub data: Vec<Complex64>,
}

impl FrequencyFrame {
    pub fn new(pilot: Vec<Complex64>, data: Vec<Complex64>) -> Result<Self> {
        let frame = Self { pilot, data };
        frame.check_shape()?;
        Ok(frame)
    }

    pub fn check_shape(&self) -> Result<()> {
        if self.pilot.len() != NUM_SUBCARRIERS || self.data.len() != SYMBOLS_PER_PACKET {
            return Err(Error::shape(format!(
                "frame has pilot {} / data {}, expected {} / {}",
                self.pilot.len(),
                self.data.len(),
                NUM_SUBCARRIERS,
                SYMBOLS_PER_PACKET
            )));
        }
        Ok(())
    }

    pub const fn fft_len(&self) -> usize {
        FFT_LEN
    }

    pub fn data_row(&self, frame: usize) -> &[Complex64] {
        &self.data[frame * NUM_SUBCARRIERS..(frame + 1) * NUM_SUBCARRIERS]
    }

    pub fn data_rows(&self) -> usize {
        self.data.len() / NUM_SUBCARRIERS
    }

    /// Mean per-symbol power over pilot and data.
    pub fn mean_power(&self) -> f64 {
        let total: f64 = self.pilot.iter().chain(&self.data).map(|s| s.norm_sqr()).sum();
        total / (self.pilot.len() + self.data.len()) as f64
    }

    pub(crate) fn map(&self, mut f: impl FnMut(Complex64) -> Complex64) -> Self {
        Self {
            pilot: self.pilot.iter().map(|&s| f(s)).collect(),
            data: self.data.iter().map(|&s| f(s)).collect(),
        }
    }
}

/// Assemble one packet: the fixed LTS followed by seeded random QPSK data.
pub fn build_frame(rng_seed: u64) -> FrequencyFrame {
    let mut rng = seed::rng_for(rng_seed, &[seed::TAG_FRAME]);
    let bits: Vec<bool> = (0..2 * SYMBOLS_PER_PACKET).map(|_| rng.random()).collect();
    let data = qpsk_modulate(&bits, SYMBOLS_PER_PACKET).expect("bit count matches");
    FrequencyFrame { pilot: lts(), data }
}

/// Transmitter IQ imbalance of one device: the fingerprint ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: usize,
    pub amp_imbalance_db: f64,
    pub phase_imbalance_deg: f64,
}

impl DeviceProfile {
    pub fn new(device_id: usize, amp_imbalance_db: f64, phase_imbalance_deg: f64) -> Result<Self> {
        let profile = Self {
            device_id,
            amp_imbalance_db,
            phase_imbalance_deg,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        let (a_lo, a_hi) = AMP_IMBALANCE_RANGE_DB;
        let (p_lo, p_hi) = PHASE_IMBALANCE_RANGE_DEG;
        // Evenly spaced grids land on the end points up to rounding.
        let tol = 1e-9;
        if !(a_lo - tol..=a_hi + tol).contains(&self.amp_imbalance_db) {
            return Err(Error::config(format!(
                "device {}: amplitude imbalance {} dB outside [{a_lo}, {a_hi}]",
                self.device_id, self.amp_imbalance_db
            )));
        }
        if !(p_lo - tol..=p_hi + tol).contains(&self.phase_imbalance_deg) {
            return Err(Error::config(format!(
                "device {}: phase imbalance {} deg outside [{p_lo}, {p_hi}]",
                self.device_id, self.phase_imbalance_deg
            )));
        }
        Ok(())
    }

    /// Branch gains and rotation `(g_I, g_Q, theta)`.
    pub fn iq_parameters(&self) -> (f64, f64, f64) {
        let g_i = 10f64.powf(0.5 * self.amp_imbalance_db / 20.0);
        let g_q = 10f64.powf(-0.5 * self.amp_imbalance_db / 20.0);
        let theta = 0.5 * self.phase_imbalance_deg * PI / 180.0;
        (g_i, g_q, theta)
    }

    /// Apply the imbalance to one baseband symbol.
    pub fn impair(&self, x: Complex64) -> Complex64 {
        let (g_i, g_q, theta) = self.iq_parameters();
        impair_with(x, g_i, g_q, theta.cos(), theta.sin())
    }
}

#[inline]
fn impair_with(x: Complex64, g_i: f64, g_q: f64, cos: f64, sin: f64) -> Complex64 {
    let (xi, xq) = (x.re, x.im);
    Complex64::new(
        g_i * cos * xi - g_q * sin * xq,
        g_i * sin * xi + g_q * cos * xq,
    )
}

/// Ordered set of transmitters, labelled `0..len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSet {
    pub devices: Vec<DeviceProfile>,
}

impl DeviceSet {
    /// `count` devices with A and P evenly spaced over their ranges, the k-th
    /// amplitude paired with the k-th phase.
    pub fn evenly_spaced(count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::config("device set must not be empty"));
        }
        let (a_lo, a_hi) = AMP_IMBALANCE_RANGE_DB;
        let (p_lo, p_hi) = PHASE_IMBALANCE_RANGE_DEG;
        let devices = (0..count)
            .map(|k| {
                let (a, p) = if count == 1 {
                    (0.5 * (a_lo + a_hi), 0.5 * (p_lo + p_hi))
                } else {
                    let t = k as f64 / (count - 1) as f64;
                    (a_lo + t * (a_hi - a_lo), p_lo + t * (p_hi - p_lo))
                };
                DeviceProfile::new(k, a, p)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { devices })
    }

    pub fn new(devices: Vec<DeviceProfile>) -> Result<Self> {
        let set = Self { devices };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices.is_empty() {
            return Err(Error::config("device set must not be empty"));
        }
        for (k, d) in self.devices.iter().enumerate() {
            d.validate()?;
            if d.device_id != k {
                return Err(Error::config(format!(
                    "device ids must be 0..{} in order; found {} at position {k}",
                    self.devices.len(),
                    d.device_id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn get(&self, device_id: usize) -> Option<&DeviceProfile> {
        self.devices.get(device_id)
    }
}

impl Default for DeviceSet {
    fn default() -> Self {
        Self::evenly_spaced(7).expect("default grid is in range")
    }
}

/// A packet after the transmitter's IQ imbalance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpairedFrame {
    pub frame: FrequencyFrame,
    pub source_device: usize,
}

/// Impair pilot and data alike; the transmitter distorts everything it sends.
pub fn apply_iq_imbalance(frame: &FrequencyFrame, profile: &DeviceProfile) -> ImpairedFrame {
    let (g_i, g_q, theta) = profile.iq_parameters();
    let (sin, cos) = theta.sin_cos();
    ImpairedFrame {
        frame: frame.map(|x| impair_with(x, g_i, g_q, cos, sin)),
        source_device: profile.device_id,
    }
}
