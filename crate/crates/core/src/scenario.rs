//! Scenario configuration.
//!
//! A scenario fixes the network layout, radio parameters, sensing and solver
//! settings and the CKM build parameters of one simulation. It is read from a
//! TOML file; every field has a default, and the defaults describe the desk
//! scenario (three cells, eight transmit antennas, ten users per cell).

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::beamforming::BfConfig;
use crate::channel::{wrap_angle, BsSite, ChannelGenConfig};
use crate::ckm::{AngularGrid, CkmBuildConfig};
use crate::sensing::SensingConfig;
use crate::{Error, Result};

/// Beamformer used in the final stage of every epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BfMode {
    /// Average-leakage surrogate with CKM-based outgoing CSI.
    SdUscb,
    /// Per-cell design that ignores inter-cell leakage.
    ZeroLeakage,
    /// Per-beam leakage surrogate.
    Slinr,
}

impl std::str::FromStr for BfMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sd-uscb" => Ok(BfMode::SdUscb),
            "zero-leakage" => Ok(BfMode::ZeroLeakage),
            "slinr" => Ok(BfMode::Slinr),
            other => Err(Error::Config(format!(
                "unknown baseline '{other}', expected sd-uscb, zero-leakage or slinr"
            ))),
        }
    }
}

/// Source of the outgoing inter-cell CSI used by the beamformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CsiSource {
    /// Query each BS's channel knowledge map at the exchanged locations.
    Ckm,
    /// Use the true current channels.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    /// Maximum users per cell and epoch.
    pub cap: usize,
    /// Starvation threshold in epochs.
    pub t_s: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { cap: 4, t_s: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensingSetup {
    pub model: SensingConfig,
    /// Variance threshold `c_bar` of the beamforming constraints.
    pub threshold: f64,
    /// When false the estimates are exact (the variance model still drives
    /// the beamforming constraints).
    pub noisy: bool,
}

impl Default for SensingSetup {
    fn default() -> Self {
        Self {
            model: SensingConfig::default(),
            threshold: 1.0,
            noisy: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CkmSetup {
    pub source: CsiSource,
    pub build: CkmBuildConfig,
    /// Side of a map cell (m).
    pub cell_size: f64,
    /// Margin added around the initial user positions when sizing a map (m).
    pub margin: f64,
    /// Side of the tiles over which inter-cell large-scale parameters stay fixed (m).
    pub tile_size: f64,
    /// When set, the RSRP noise variance is `(sigma_c^2)^2` times this factor
    /// and `build.noise_var` is ignored.
    pub noise_from_calibration: Option<f64>,
    /// Directory of prebuilt maps (`bs<m>.sdck`); when unset the maps are
    /// built at start-up.
    pub dir: Option<PathBuf>,
}

impl Default for CkmSetup {
    fn default() -> Self {
        Self {
            source: CsiSource::Ckm,
            build: CkmBuildConfig {
                angular: AngularGrid {
                    theta_min: -PI / 2.0,
                    theta_max: PI / 2.0,
                    ..AngularGrid::default()
                },
                ..CkmBuildConfig::default()
            },
            cell_size: 2.0,
            margin: 25.0,
            tile_size: 10.0,
            noise_from_calibration: Some(1.0),
            dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub epochs: usize,
    /// BS positions (m). The number of cells is the length of this list.
    pub bs_positions: Vec<(f64, f64)>,
    /// Broadside directions (rad); when empty every array faces the centroid
    /// of the BS positions.
    pub bs_broadsides: Vec<f64>,
    pub users_per_cell: usize,
    pub n_tx: usize,
    pub n_rx: usize,
    /// Transmit power per BS (W).
    pub power: f64,
    pub carrier_hz: f64,
    /// Epoch length (s).
    pub epoch_secs: f64,
    /// Backhaul delay (s).
    pub backhaul_delay_secs: f64,
    /// Target of the average per-antenna receive SNR used to set the noise power (dB).
    pub snr_target_db: f64,
    /// User speed (m/s).
    pub speed: f64,
    /// Initial user distance range (m).
    pub user_distance: (f64, f64),
    /// Initial users lie within this angle of broadside (rad).
    pub user_half_angle: f64,
    /// Relative variance of the intra-cell CSI estimation error.
    pub csi_error_var: f64,
    pub mode: BfMode,
    pub channel: ChannelGenConfig,
    pub sensing: SensingSetup,
    pub scheduler: SchedulerConfig,
    pub solver: BfConfig,
    pub ckm: CkmSetup,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let side = 180.0;
        Self {
            seed: 1,
            epochs: 10,
            bs_positions: vec![(0.0, 0.0), (side, 0.0), (side / 2.0, side * 3f64.sqrt() / 2.0)],
            bs_broadsides: Vec::new(),
            users_per_cell: 10,
            n_tx: 8,
            n_rx: 16,
            power: 3.981,
            carrier_hz: 30e9,
            epoch_secs: 0.02,
            backhaul_delay_secs: 0.004,
            snr_target_db: 15.0,
            speed: 20.0,
            user_distance: (20.0, 100.0),
            user_half_angle: PI / 3.0,
            csi_error_var: 0.0,
            mode: BfMode::SdUscb,
            channel: ChannelGenConfig::default(),
            sensing: SensingSetup::default(),
            scheduler: SchedulerConfig::default(),
            solver: BfConfig::default(),
            ckm: CkmSetup::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn n_cells(&self) -> usize {
        self.bs_positions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.bs_positions.is_empty() {
            return fail("at least one BS is required");
        }
        if !self.bs_broadsides.is_empty() && self.bs_broadsides.len() != self.bs_positions.len() {
            return fail("bs_broadsides must be empty or match bs_positions");
        }
        if self.users_per_cell == 0 || self.n_tx == 0 || self.n_rx == 0 {
            return fail("users_per_cell, n_tx and n_rx must be positive");
        }
        if !(self.power > 0.0 && self.carrier_hz > 0.0 && self.epoch_secs > 0.0) {
            return fail("power, carrier_hz and epoch_secs must be positive");
        }
        if !(self.backhaul_delay_secs >= 0.0 && self.backhaul_delay_secs < self.epoch_secs) {
            return fail("backhaul delay must satisfy 0 <= T_d < epoch length");
        }
        if !self.snr_target_db.is_finite() || !(self.speed >= 0.0) {
            return fail("snr_target_db must be finite and speed nonnegative");
        }
        let (d0, d1) = self.user_distance;
        if !(d0 > 0.0 && d1 >= d0) {
            return fail("user_distance must satisfy 0 < min <= max");
        }
        if !(self.user_half_angle > 0.0 && self.user_half_angle < PI / 2.0) {
            return fail("user_half_angle must lie in (0, pi/2)");
        }
        if !(self.csi_error_var >= 0.0) {
            return fail("csi_error_var must be nonnegative");
        }
        if self.scheduler.cap == 0 || self.scheduler.t_s == 0 {
            return fail("scheduler cap and t_s must be positive");
        }
        if !(self.sensing.threshold > 0.0) {
            return fail("sensing threshold must be positive");
        }
        if !(self.ckm.cell_size > 0.0 && self.ckm.margin >= 0.0 && self.ckm.tile_size > 0.0) {
            return fail("ckm cell_size and tile_size must be positive, margin nonnegative");
        }
        if let Some(f) = self.ckm.noise_from_calibration {
            if !(f >= 0.0) {
                return fail("ckm noise_from_calibration must be nonnegative");
            }
        }
        self.channel.validate()?;
        self.sensing.model.validate()?;
        self.solver.validate()?;
        self.ckm.build.validate(self.n_tx)?;
        Ok(())
    }

    /// BS sites with explicit or centroid-facing broadsides.
    pub fn sites(&self) -> Vec<BsSite> {
        let n = self.bs_positions.len() as f64;
        let cx = self.bs_positions.iter().map(|p| p.0).sum::<f64>() / n;
        let cy = self.bs_positions.iter().map(|p| p.1).sum::<f64>() / n;
        self.bs_positions
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let broadside = match self.bs_broadsides.get(i) {
                    Some(b) => *b,
                    None if (cx - p.0).hypot(cy - p.1) > 0.0 => (cy - p.1).atan2(cx - p.0),
                    None => 0.0,
                };
                BsSite::new(p, wrap_angle(broadside))
            })
            .collect()
    }

    /// Sensing model with the array gain of this scenario.
    pub fn sensing_model(&self) -> SensingConfig {
        SensingConfig {
            kappa: ((self.n_tx * self.n_rx) as f64).sqrt(),
            carrier_hz: self.carrier_hz,
            ..self.sensing.model
        }
    }
}
