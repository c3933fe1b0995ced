//! Sensing-assisted distributed user scheduling and coordinated beamforming
//! for multi-cell mmWave networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`channel`]: steering vectors, path loss, LoS/NLoS and Rayleigh channels, mobility.
//! - [`ckm`]: channel knowledge maps built from beam RSRP via nonnegative sparse recovery.
//! - [`sensing`]: echo-based kinematic estimation with beamforming-dependent error variances.
//! - [`scheduling`]: proportional-fair zero-forcing greedy user selection.
//! - [`beamforming`]: the average-leakage (SALINR) ISAC beamforming solver and its variants.
//! - [`metrics`]: ground-truth SINR/rate/PFR and the leakage-surrogate Monte Carlo verifier.
//! - [`simulator`]: the four-stage per-epoch loop across cells.

pub mod beamforming;
pub mod channel;
pub mod ckm;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod scenario;
pub mod scheduling;
pub mod sensing;
pub mod simulator;

pub use error::{Error, Result};
pub use linalg::{CMatrix, CVector, ChannelVector};
