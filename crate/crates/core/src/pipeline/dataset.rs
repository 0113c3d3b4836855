//! Simulated packet collections and their on-disk form.
//!
//! Layout after the JSON header: per packet, the 52 pilot symbols then the
//! 260 data symbols as interleaved little-endian f32 (re, im); after all
//! packets, one little-endian u32 label per packet.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chanest::{ls_estimate, DEEP_FADE_THRESHOLD};
use crate::channel::{add_awgn, apply_channel, sample_channel, ChannelConfig, ReceivedFrame};
use crate::error::{Error, Result};
use crate::io::{f32_from_le, f32_le_bytes, read_container, write_container};
use crate::seed;
use crate::waveform::{
    apply_iq_imbalance, build_frame, lts, DeviceSet, FrequencyFrame, NUM_SUBCARRIERS,
    SYMBOLS_PER_PACKET,
};

pub const DATASET_MAGIC: &[u8; 8] = b"RFFIDSET";
pub const DATASET_VERSION: u32 = 1;
/// Redraws allowed when a packet lands in a deep fade.
const MAX_REDRAWS: u64 = 16;
const COMPLEX_PER_PACKET: usize = NUM_SUBCARRIERS + SYMBOLS_PER_PACKET;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    /// Unlabeled-use pretraining data.
    Source,
    /// Data from a channel unseen during pretraining.
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub role: DatasetRole,
    pub devices: DeviceSet,
    pub channel: ChannelConfig,
    pub packets_per_device: usize,
    pub packet_count: usize,
    pub seed: u64,
    /// Packets regenerated because of a deep fade.
    pub redraws: usize,
    pub created_unix: u64,
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub packets: Vec<ReceivedFrame>,
}

fn quantize(frame: &FrequencyFrame) -> FrequencyFrame {
    let q = |z: &Complex64| Complex64::new(f64::from(z.re as f32), f64::from(z.im as f32));
    FrequencyFrame {
        pilot: frame.pilot.iter().map(q).collect(),
        data: frame.data.iter().map(q).collect(),
    }
}

fn faded(rx: &FrequencyFrame) -> bool {
    match ls_estimate(&rx.pilot, &lts()) {
        Ok(est) => est.h_hat.iter().any(|h| !(h.norm() > DEEP_FADE_THRESHOLD)),
        Err(_) => true,
    }
}

/// One received packet of `device` (index into the set), fully determined by
/// `(seed, device, packet)`.
fn simulate_packet(
    devices: &DeviceSet,
    channel: &ChannelConfig,
    seed_base: u64,
    device: usize,
    packet: usize,
) -> Result<(ReceivedFrame, usize)> {
    let profile = &devices.devices[device];
    let (d, k) = (device as u64, packet as u64);
    for attempt in 0..MAX_REDRAWS {
        let frame = build_frame(seed::derive(seed_base, &[seed::TAG_FRAME, d, k, attempt]));
        let impaired = apply_iq_imbalance(&frame, profile);
        let ch = sample_channel(channel, seed::derive(seed_base, &[seed::TAG_CHANNEL, d, k, attempt]));
        let clean = apply_channel(&impaired, &ch)?;
        let noisy = add_awgn(
            &clean,
            channel.base_snr_db,
            seed::derive(seed_base, &[seed::TAG_NOISE, d, k, attempt]),
        );
        let rx = quantize(&noisy);
        if !faded(&rx) {
            return Ok((
                ReceivedFrame {
                    rx,
                    device_id: Some(device),
                    snr_db: channel.base_snr_db,
                    truth: Some(ch),
                },
                attempt as usize,
            ));
        }
    }
    Err(Error::Numeric(format!(
        "device {device} packet {packet}: deep fade persisted over {MAX_REDRAWS} draws"
    )))
}

impl Dataset {
    /// Simulate `packets_per_device` packets for every device, in parallel,
    /// ordered device-major.
    pub fn generate(
        devices: &DeviceSet,
        channel: &ChannelConfig,
        packets_per_device: usize,
        seed_base: u64,
        role: DatasetRole,
    ) -> Result<Self> {
        devices.validate()?;
        channel.validate()?;
        if packets_per_device == 0 {
            return Err(Error::config("packets_per_device must be positive"));
        }
        let jobs: Vec<(usize, usize)> = (0..devices.len())
            .flat_map(|d| (0..packets_per_device).map(move |k| (d, k)))
            .collect();
        let made: Vec<(ReceivedFrame, usize)> = jobs
            .par_iter()
            .map(|&(d, k)| simulate_packet(devices, channel, seed_base, d, k))
            .collect::<Result<_>>()?;
        let redraws = made.iter().map(|m| m.1).sum();
        let packets: Vec<ReceivedFrame> = made.into_iter().map(|m| m.0).collect();
        Ok(Self {
            header: DatasetHeader {
                format_version: DATASET_VERSION,
                role,
                devices: devices.clone(),
                channel: channel.clone(),
                packets_per_device,
                packet_count: packets.len(),
                seed: seed_base,
                redraws,
                created_unix: std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
                config_hash: None,
            },
            packets,
        })
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.header.devices.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.packets.iter().map(|p| p.device_id.unwrap_or(usize::MAX)).collect()
    }

    /// Packets with their labels removed, as an unlabeled learner sees them.
    pub fn unlabeled(&self) -> Vec<ReceivedFrame> {
        self.packets
            .iter()
            .map(|p| ReceivedFrame {
                device_id: None,
                ..p.clone()
            })
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_container(&mut w, DATASET_MAGIC, &serde_json::to_vec(&self.header)?)?;
        let mut buf = Vec::with_capacity(COMPLEX_PER_PACKET * 2);
        for p in &self.packets {
            buf.clear();
            for z in p.rx.pilot.iter().chain(&p.rx.data) {
                buf.push(z.re as f32);
                buf.push(z.im as f32);
            }
            w.write_all(&f32_le_bytes(&buf))?;
        }
        for p in &self.packets {
            let label = p.device_id.ok_or_else(|| Error::config("cannot store an unlabeled packet"))?;
            w.write_all(&(label as u32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    fn parse_header(r: &mut impl Read) -> Result<DatasetHeader> {
        let raw = read_container(r, DATASET_MAGIC)?;
        let header: DatasetHeader =
            serde_json::from_slice(&raw).map_err(|e| Error::format(format!("dataset header: {e}")))?;
        if header.format_version != DATASET_VERSION {
            return Err(Error::format(format!(
                "dataset version {} unsupported (expected {DATASET_VERSION})",
                header.format_version
            )));
        }
        if header.packet_count != header.packets_per_device * header.devices.len() {
            return Err(Error::format("packet count disagrees with devices x packets_per_device"));
        }
        Ok(header)
    }

    pub fn read_header(path: impl AsRef<Path>) -> Result<DatasetHeader> {
        Self::parse_header(&mut BufReader::new(File::open(path)?))
    }

    /// Load packets; channel truth is not stored, so it comes back empty.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let header = Self::parse_header(&mut r)?;
        let n = header.packet_count;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let body = n * COMPLEX_PER_PACKET * 8;
        if payload.len() != body + n * 4 {
            return Err(Error::format(format!(
                "dataset payload has {} bytes, header implies {}",
                payload.len(),
                body + n * 4
            )));
        }
        let values = f32_from_le(&payload[..body]);
        let snr = header.channel.base_snr_db;
        let mut packets = Vec::with_capacity(n);
        for (i, chunk) in values.chunks_exact(COMPLEX_PER_PACKET * 2).enumerate() {
            let syms: Vec<Complex64> = chunk
                .chunks_exact(2)
                .map(|c| Complex64::new(f64::from(c[0]), f64::from(c[1])))
                .collect();
            let label_bytes = &payload[body + 4 * i..body + 4 * i + 4];
            let label = u32::from_le_bytes(label_bytes.try_into().expect("4 bytes")) as usize;
            if label >= header.devices.len() {
                return Err(Error::format(format!("packet {i} has label {label} out of range")));
            }
            packets.push(ReceivedFrame {
                rx: FrequencyFrame::new(syms[..NUM_SUBCARRIERS].to_vec(), syms[NUM_SUBCARRIERS..].to_vec())?,
                device_id: Some(label),
                snr_db: snr,
                truth: None,
            });
        }
        Ok(Self { header, packets })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        let devices = DeviceSet::evenly_spaced(3).unwrap();
        Dataset::generate(&devices, &ChannelConfig::default(), 4, 21, DatasetRole::Source).unwrap()
    }

    #[test]
    fn generation_is_deterministic_and_device_major() {
        let a = small();
        let b = small();
        assert_eq!(a.packets, b.packets);
        assert_eq!(a.len(), 12);
        assert_eq!(a.labels(), vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
        assert!(a.unlabeled().iter().all(|p| p.device_id.is_none()));
    }

    #[test]
    fn file_round_trip() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        d.write(&path).unwrap();
        let back = Dataset::read(&path).unwrap();
        assert_eq!(back.header, d.header);
        for (x, y) in back.packets.iter().zip(&d.packets) {
            assert_eq!(x.rx, y.rx);
            assert_eq!(x.device_id, y.device_id);
        }
        let bytes = std::fs::read(&path).unwrap();
        let again = dir.path().join("e.bin");
        let mut d2 = small();
        d2.header.created_unix = d.header.created_unix;
        d2.write(&again).unwrap();
        assert_eq!(std::fs::read(&again).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        std::fs::write(&path, b"RFFIDSEX\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(Dataset::read(&path), Err(Error::Format(_))));
        let d = small();
        d.write(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(Dataset::read(&path), Err(Error::Format(_))));
    }
}
