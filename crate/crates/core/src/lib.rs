//! Residual-channel contrastive learning for RF fingerprint identification.
//!
//! The crate simulates IQ-imbalanced OFDM transmitters over fading channels,
//! builds LS/MMSE-equalized positive pairs, pretrains a SimSiam encoder on
//! them, and fine-tunes a device classifier from a handful of labels.

pub mod channel;
pub mod chanest;
pub mod error;
pub mod finetune;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod simsiam;
pub mod waveform;

pub use error::{Error, Result};
