//! Multi-cell epoch loop.
//!
//! Every epoch `n` runs, in order:
//!
//! 1. transmission of the schedule and beams decided in epoch `n - 1` over
//!    the true epoch-`n` channels, with rate and PF bookkeeping;
//! 2. sensing of the users just served, using the echoes of those beams;
//! 3. PFZFG scheduling per cell on the current intra-cell CSI;
//! 4. exchange of the scheduled users' locations between BSs and CKM
//!    queries for the outgoing inter-cell CSI;
//! 5. per-cell beamforming for the next epoch;
//! 6. user mobility over one epoch.
//!
//! Beams therefore always act one epoch after the information they were
//! designed with, which models the backhaul delay. Epoch 1 bootstraps with a
//! PFZFG schedule, matched-filter beams and true user locations.
//!
//! Inter-cell channels share their large-scale parameters (path AoDs and
//! power ratios) within square tiles of the plane, so a CKM built from
//! measurements at a location describes users near that location; the path
//! phases are redrawn every epoch.

use std::path::Path;
use std::sync::Arc;

use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beamforming::{self, BfProblem, LeakageModel, SensingSpec};
use crate::channel::{
    advance, complex_normal, draw_inter_large_scale, gen_intra_channel, synthesize, with_inter_phases, wrap_angle,
    BsSite, PathParams, UserKinematics,
};
use crate::ckm::{self, BuildReport, Ckm, SpatialGrid};
use crate::linalg::{add_outer, CMatrix, CVector};
use crate::metrics::{network_pfr, rate, sinr_terms, update_avg_rate, NetworkChannels, SinrTerms, Transmission};
use crate::rng::{mix, stream, tag};
use crate::scenario::{BfMode, CsiSource, ScenarioConfig};
use crate::scheduling::{greedy_from, PfState, PfzfgParams};
use crate::sensing::{locate, sense, SensingConfig};
use crate::{Error, Result};

/// Bytes per exchanged location (two `f64` coordinates) or complex channel entry.
pub const BYTES_PER_ENTRY: u64 = 16;

/// Deterministic inter-cell large-scale field.
#[derive(Debug, Clone)]
pub struct InterField {
    seed: u64,
    tile_size: f64,
    cfg: crate::channel::ChannelGenConfig,
    n_tx: usize,
}

/// Closest distance used for path loss, so map cells near a BS stay finite.
const MIN_FIELD_DISTANCE: f64 = 1.0;

impl InterField {
    pub fn new(cfg: &ScenarioConfig) -> Self {
        Self {
            seed: cfg.seed,
            tile_size: cfg.ckm.tile_size,
            cfg: cfg.channel,
            n_tx: cfg.n_tx,
        }
    }

    /// Path gains and AoDs from BS `bs` to `xy`; phases are zero.
    pub fn large_scale(&self, bs: usize, site: &BsSite, xy: (f64, f64)) -> Result<Vec<PathParams>> {
        let tx = (xy.0 / self.tile_size).floor() as i64;
        let ty = (xy.1 / self.tile_size).floor() as i64;
        let mut rng = stream(self.seed, &[tag::INTER_LARGE, bs as u64, tx as u64, ty as u64]);
        let paths = draw_inter_large_scale(1.0, self.cfg.n_paths, &self.cfg, &mut rng)?;
        let d = (xy.0 - site.position.0).hypot(xy.1 - site.position.1).max(MIN_FIELD_DISTANCE);
        let scale = d.powf(-self.cfg.eta);
        Ok(paths.into_iter().map(|p| PathParams { gain: p.gain * scale, ..p }).collect())
    }

    /// One small-scale realisation of the channel from BS `bs` to `xy`.
    pub fn channel<R: Rng + ?Sized>(&self, bs: usize, site: &BsSite, xy: (f64, f64), rng: &mut R) -> Result<CVector> {
        let large = self.large_scale(bs, site, xy)?;
        Ok(synthesize(&with_inter_phases(&large, &self.cfg, rng), self.n_tx))
    }
}

/// Initial user states: uniform distance and angle in the serving sector,
/// uniform heading.
pub fn place_users(cfg: &ScenarioConfig, sites: &[BsSite]) -> Vec<Vec<UserKinematics>> {
    let (d0, d1) = cfg.user_distance;
    sites
        .iter()
        .enumerate()
        .map(|(l, site)| {
            (0..cfg.users_per_cell)
                .map(|u| {
                    let mut rng = stream(cfg.seed, &[tag::PLACEMENT, l as u64, u as u64]);
                    let d = if d1 > d0 { rng.random_range(d0..d1) } else { d0 };
                    let psi = rng.random_range(-cfg.user_half_angle..cfg.user_half_angle);
                    let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                    UserKinematics {
                        position: site.point_at(d, psi),
                        speed: cfg.speed,
                        heading,
                    }
                })
                .collect()
        })
        .collect()
}

fn in_sector(cfg: &ScenarioConfig, site: &BsSite, kin: &UserKinematics) -> bool {
    let g = kin.geometry_to(site);
    let (d0, d1) = cfg.user_distance;
    g.distance >= d0 && g.distance <= d1 && g.angle.abs() <= cfg.user_half_angle
}

/// Constant-velocity step; a user about to leave its serving sector turns
/// around instead (and stays put if turning does not help).
pub fn move_user(cfg: &ScenarioConfig, site: &BsSite, kin: &UserKinematics, dt: f64) -> UserKinematics {
    let next = advance(kin, dt);
    if in_sector(cfg, site, &next) || !in_sector(cfg, site, kin) {
        return next;
    }
    let turned = UserKinematics {
        heading: wrap_angle(kin.heading + std::f64::consts::PI),
        ..*kin
    };
    let back = advance(&turned, dt);
    if in_sector(cfg, site, &back) {
        back
    } else {
        turned
    }
}

/// Optional change of the channel draws from a given epoch on; used to check
/// that beams never depend on future channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelPerturbation {
    pub from_epoch: usize,
    pub salt: u64,
}

fn channel_seed(seed: u64, epoch: usize, perturb: Option<ChannelPerturbation>) -> u64 {
    match perturb {
        Some(p) if epoch >= p.from_epoch => mix(seed, &[p.salt]),
        _ => seed,
    }
}

/// True channels of every BS-user pair at `epoch`.
pub fn epoch_channels(
    cfg: &ScenarioConfig,
    sites: &[BsSite],
    field: &InterField,
    users: &[Vec<UserKinematics>],
    epoch: usize,
    perturb: Option<ChannelPerturbation>,
) -> Result<NetworkChannels> {
    let seed = channel_seed(cfg.seed, epoch, perturb);
    let e = epoch as u64;
    let h = (0..sites.len())
        .into_par_iter()
        .map(|m| {
            users
                .iter()
                .enumerate()
                .map(|(l, cell)| {
                    cell.iter()
                        .enumerate()
                        .map(|(u, kin)| {
                            if m == l {
                                let geom = kin.relative_to(&sites[l])?;
                                let mut rng = stream(seed, &[tag::INTRA, e, l as u64, u as u64]);
                                gen_intra_channel(&geom, cfg.n_tx, &cfg.channel, &mut rng)
                            } else {
                                let mut rng = stream(seed, &[tag::INTER_SMALL, e, m as u64, l as u64, u as u64]);
                                field.channel(m, &sites[m], kin.position, &mut rng)
                            }
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NetworkChannels { h })
}

/// Communication noise power that puts the average per-antenna receive SNR
/// over all BS-user pairs at the target.
pub fn noise_for_channels(ch: &NetworkChannels, power: f64, n_tx: usize, snr_target_db: f64) -> Result<f64> {
    let l = ch.n_cells();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for m in 0..l {
        for cell in &ch.h[m] {
            for h in cell {
                total += h.norm_squared();
                pairs += 1;
            }
        }
    }
    if pairs == 0 || !(total > 0.0) {
        return Err(Error::Domain("noise calibration needs nonzero channels".into()));
    }
    Ok(power * total / (pairs as f64 * n_tx as f64 * 10f64.powf(snr_target_db / 10.0)))
}

/// Calibrate the communication noise on the epoch-1 channels.
pub fn calibrate_noise(cfg: &ScenarioConfig) -> Result<f64> {
    let sites = cfg.sites();
    let users = place_users(cfg, &sites);
    let ch = epoch_channels(cfg, &sites, &InterField::new(cfg), &users, 1, None)?;
    noise_for_channels(&ch, cfg.power, cfg.n_tx, cfg.snr_target_db)
}

/// Map area of BS `m`: the initial positions of the other cells' users plus a margin.
pub fn ckm_area(cfg: &ScenarioConfig, users: &[Vec<UserKinematics>], m: usize) -> Option<SpatialGrid> {
    let pts: Vec<(f64, f64)> = users
        .iter()
        .enumerate()
        .filter(|(l, _)| *l != m)
        .flat_map(|(_, c)| c.iter().map(|k| k.position))
        .collect();
    if pts.is_empty() {
        return None;
    }
    let lo = pts.iter().fold((f64::INFINITY, f64::INFINITY), |a, p| (a.0.min(p.0), a.1.min(p.1)));
    let hi = pts.iter().fold((f64::NEG_INFINITY, f64::NEG_INFINITY), |a, p| (a.0.max(p.0), a.1.max(p.1)));
    let r = cfg.ckm.margin;
    SpatialGrid::covering((lo.0 - r, lo.1 - r), (hi.0 + r, hi.1 + r), cfg.ckm.cell_size).ok()
}

/// Build the CKM of every BS (`None` for a BS with nothing to map).
pub fn build_ckms(cfg: &ScenarioConfig, sigma_c2: f64) -> Result<Vec<Option<(Ckm, BuildReport)>>> {
    let sites = cfg.sites();
    let users = place_users(cfg, &sites);
    let field = InterField::new(cfg);
    let mut build_cfg = cfg.ckm.build;
    build_cfg.p_t = cfg.power;
    if let Some(f) = cfg.ckm.noise_from_calibration {
        build_cfg.noise_var = f * sigma_c2 * sigma_c2;
    }
    (0..sites.len())
        .map(|m| {
            let Some(grid) = ckm_area(cfg, &users, m) else {
                return Ok(None);
            };
            let site = sites[m];
            let f = &field;
            let oracle = move |xy: (f64, f64), rng: &mut crate::rng::SimRng| f.channel(m, &site, xy, rng);
            let built = ckm::build(site, m as u64, grid, cfg.n_tx, oracle, &build_cfg, cfg.seed)?;
            info!(
                "ckm for bs {m}: {} cells, mean relative residual {:.3e}",
                built.1.cells, built.1.mean_rel_residual
            );
            Ok(Some(built))
        })
        .collect()
}

/// File name of the map of BS `m` inside a map directory.
pub fn ckm_file_name(m: usize) -> String {
    format!("bs{m}.sdck")
}

/// Load the maps of every BS from `dir`. A BS without a file has no map.
pub fn load_ckms(cfg: &ScenarioConfig, dir: &Path) -> Result<Vec<Option<Arc<Ckm>>>> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("map directory {} does not exist", dir.display())));
    }
    (0..cfg.n_cells())
        .map(|m| {
            let path = dir.join(ckm_file_name(m));
            if !path.exists() {
                return Ok(None);
            }
            let ckm = Ckm::load(&path)?;
            if ckm.n_tx != cfg.n_tx {
                return Err(Error::Dimension {
                    expected: cfg.n_tx,
                    got: ckm.n_tx,
                });
            }
            Ok(Some(Arc::new(ckm)))
        })
        .collect()
}

/// Outcome of one user in one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub cell: usize,
    pub user: usize,
    /// Served in this epoch's transmission.
    pub scheduled: bool,
    pub sinr: f64,
    /// Received powers behind `sinr` (W); zero when not served.
    pub signal: f64,
    pub intra_interference: f64,
    pub inter_interference: f64,
    pub rate: f64,
    pub avg_rate: f64,
    /// Distance between the sensed and the true position (m), when sensed this epoch.
    pub location_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    /// Users served in this epoch, per cell.
    pub served: Vec<Vec<usize>>,
    /// Users scheduled for the next epoch, per cell.
    pub schedule: Vec<Vec<usize>>,
    pub users: Vec<UserRecord>,
    /// Network PFR after this epoch's rate update.
    pub pfr: f64,
    pub solver_outer_iterations: usize,
    pub solver_inner_iterations: usize,
    /// Cells whose beams miss the sensing threshold.
    pub infeasible_cells: Vec<usize>,
    /// Cells whose solver failed and which fell back to the previous beams.
    pub failed_cells: Vec<usize>,
    pub sensing_failures: usize,
    /// Exchanged locations that fell outside a map.
    pub ckm_misses: usize,
    pub bytes_locations: u64,
    pub bytes_full_csi: u64,
    /// Beams designed in this epoch for the next one.
    #[serde(skip)]
    pub beams: Vec<Vec<CVector>>,
}

impl EpochTrace {
    pub fn flagged(&self) -> bool {
        !self.infeasible_cells.is_empty() || !self.failed_cells.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub seed: u64,
    pub mode: BfMode,
    pub csi_source: CsiSource,
    pub sensing_threshold: f64,
    pub sigma_c2: f64,
    pub epochs: usize,
    /// Network PFR after each epoch.
    pub pfr_curve: Vec<f64>,
    pub mean_pfr: f64,
    pub median_pfr: f64,
    pub final_pfr: f64,
    pub mean_rate: f64,
    pub mean_location_error: f64,
    pub bytes_locations: u64,
    pub bytes_full_csi: u64,
    pub flagged_epochs: usize,
    pub ckm_misses: usize,
    pub sensing_failures: usize,
    pub ckm_reports: Vec<Option<BuildReport>>,
}

/// Median of a slice (NaN when empty).
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn matched_filters(channels: &[&CVector], power: f64) -> Vec<CVector> {
    let share = (power / channels.len().max(1) as f64).sqrt();
    channels
        .iter()
        .map(|h| {
            let n = h.norm();
            if n > 0.0 {
                h.scale(share / n)
            } else {
                CVector::zeros(h.len())
            }
        })
        .collect()
}

/// Simulation state between epochs.
pub struct Simulator {
    cfg: ScenarioConfig,
    sites: Vec<BsSite>,
    field: InterField,
    sensing: SensingConfig,
    sigma_c2: f64,
    ckms: Vec<Option<Arc<Ckm>>>,
    ckm_reports: Vec<Option<BuildReport>>,
    users: Vec<Vec<UserKinematics>>,
    pf: Vec<PfState>,
    last_known: Vec<Vec<(f64, f64)>>,
    pending: Transmission,
    epoch: usize,
    perturb: Option<ChannelPerturbation>,
    traces: Vec<EpochTrace>,
    problems: Vec<BfProblem>,
}

impl Simulator {
    /// Set up a scenario, calibrating the noise and building CKMs as needed.
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let sigma_c2 = calibrate_noise(&cfg)?;
        let (ckms, reports) = match cfg.ckm.source {
            CsiSource::Ckm if cfg.ckm.dir.is_some() => {
                let dir = cfg.ckm.dir.as_deref().unwrap_or(Path::new("."));
                (load_ckms(&cfg, dir)?, vec![None; cfg.n_cells()])
            }
            CsiSource::Ckm => build_ckms(&cfg, sigma_c2)?
                .into_iter()
                .map(|b| match b {
                    Some((c, r)) => (Some(Arc::new(c)), Some(r)),
                    None => (None, None),
                })
                .unzip(),
            CsiSource::Oracle => (vec![None; cfg.n_cells()], vec![None; cfg.n_cells()]),
        };
        Self::assemble(cfg, sigma_c2, ckms, reports)
    }

    /// Set up a scenario reusing maps built for the same seed and layout.
    pub fn with_ckms(cfg: ScenarioConfig, ckms: Vec<Option<Arc<Ckm>>>, reports: Vec<Option<BuildReport>>) -> Result<Self> {
        cfg.validate()?;
        if ckms.len() != cfg.n_cells() || reports.len() != cfg.n_cells() {
            return Err(Error::Dimension {
                expected: cfg.n_cells(),
                got: ckms.len(),
            });
        }
        let sigma_c2 = calibrate_noise(&cfg)?;
        Self::assemble(cfg, sigma_c2, ckms, reports)
    }

    fn assemble(
        cfg: ScenarioConfig,
        sigma_c2: f64,
        ckms: Vec<Option<Arc<Ckm>>>,
        ckm_reports: Vec<Option<BuildReport>>,
    ) -> Result<Self> {
        let sites = cfg.sites();
        let users = place_users(&cfg, &sites);
        for (l, cell) in users.iter().enumerate() {
            for kin in cell {
                kin.relative_to(&sites[l])?;
            }
        }
        let pf = (0..sites.len())
            .map(|_| PfState::new(cfg.users_per_cell, cfg.scheduler.t_s))
            .collect::<Result<Vec<_>>>()?;
        let last_known = users.iter().map(|c| c.iter().map(|k| k.position).collect()).collect();
        Ok(Self {
            field: InterField::new(&cfg),
            sensing: cfg.sensing_model(),
            sites,
            sigma_c2,
            ckms,
            ckm_reports,
            users,
            pf,
            last_known,
            pending: Transmission::default(),
            epoch: 0,
            perturb: None,
            traces: Vec::new(),
            problems: Vec::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn sigma_c2(&self) -> f64 {
        self.sigma_c2
    }

    pub fn sites(&self) -> &[BsSite] {
        &self.sites
    }

    pub fn users(&self) -> &[Vec<UserKinematics>] {
        &self.users
    }

    pub fn ckms(&self) -> &[Option<Arc<Ckm>>] {
        &self.ckms
    }

    pub fn ckm_reports(&self) -> &[Option<BuildReport>] {
        &self.ckm_reports
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn set_perturbation(&mut self, p: Option<ChannelPerturbation>) {
        self.perturb = p;
    }

    pub fn traces(&self) -> &[EpochTrace] {
        &self.traces
    }

    fn pfzfg_params(&self) -> PfzfgParams {
        PfzfgParams {
            cap: self.cfg.scheduler.cap,
            p_total: self.cfg.power,
            noise_var: self.sigma_c2,
        }
    }

    /// Intra-cell CSI available at BS `l`, with the optional estimation error.
    fn estimated_intra(&self, ch: &NetworkChannels, l: usize, epoch: usize) -> Vec<CVector> {
        ch.h[l][l]
            .iter()
            .enumerate()
            .map(|(u, h)| {
                if self.cfg.csi_error_var == 0.0 {
                    return h.clone();
                }
                let mut rng = stream(self.cfg.seed, &[tag::CSI_NOISE, epoch as u64, l as u64, u as u64]);
                let var = self.cfg.csi_error_var * h.norm_squared() / h.len() as f64;
                h.map(|c| c + complex_normal(var, &mut rng))
            })
            .collect()
    }

    fn schedule(&self, intra: &[Vec<CVector>], epoch: usize) -> Vec<Vec<usize>> {
        let params = self.pfzfg_params();
        let limit = params.cap.min(self.cfg.n_tx);
        intra
            .par_iter()
            .zip(self.pf.par_iter())
            .map(|(h, pf)| {
                let mut forced = pf.starved_by_wait(epoch);
                if forced.len() > limit {
                    warn!("{} starved users exceed the limit {limit}; serving the longest-waiting", forced.len());
                    forced.truncate(limit);
                }
                greedy_from(&forced, h, pf, &params).users
            })
            .collect()
    }

    /// Advance the simulation by one epoch.
    pub fn run_epoch(&mut self) -> Result<EpochTrace> {
        let n = self.epoch + 1;
        let l_cells = self.sites.len();
        let ch = epoch_channels(&self.cfg, &self.sites, &self.field, &self.users, n, self.perturb)?;
        let intra: Vec<Vec<CVector>> = (0..l_cells).map(|l| self.estimated_intra(&ch, l, n)).collect();

        if n == 1 {
            let s0 = self.schedule(&intra, n);
            let beams = s0
                .iter()
                .enumerate()
                .map(|(l, s)| {
                    let hs: Vec<&CVector> = s.iter().map(|&u| &intra[l][u]).collect();
                    matched_filters(&hs, self.cfg.power)
                })
                .collect();
            for (pf, s) in self.pf.iter_mut().zip(&s0) {
                pf.mark_scheduled(n, s);
            }
            self.pending = Transmission { schedules: s0, beams };
        }

        // Transmission and rate bookkeeping.
        let tx = std::mem::take(&mut self.pending);
        let mut records = Vec::with_capacity(l_cells * self.cfg.users_per_cell);
        for l in 0..l_cells {
            let mut terms = vec![None; self.cfg.users_per_cell];
            for (slot, &u) in tx.schedules[l].iter().enumerate() {
                terms[u] = Some(sinr_terms(l, slot, &ch, &tx));
            }
            for u in 0..self.cfg.users_per_cell {
                let t: Option<SinrTerms> = terms[u];
                let sinr = t.map_or(0.0, |t| t.sinr(self.sigma_c2));
                let scheduled = t.is_some();
                let r = if scheduled { rate(sinr) } else { 0.0 };
                let avg = update_avg_rate(self.pf[l].avg_rate[u], r, n)?;
                self.pf[l].avg_rate[u] = avg;
                records.push(UserRecord {
                    cell: l,
                    user: u,
                    scheduled,
                    sinr,
                    signal: t.map_or(0.0, |t| t.signal),
                    intra_interference: t.map_or(0.0, |t| t.intra),
                    inter_interference: t.map_or(0.0, |t| t.inter),
                    rate: r,
                    avg_rate: avg,
                    location_error: None,
                });
            }
        }
        let all_avg: Vec<f64> = self.pf.iter().flat_map(|p| p.avg_rate.iter().copied()).collect();
        let pfr = network_pfr(&all_avg);

        // Sensing of the users just served.
        let mut sensing_failures = 0;
        let sensing_cfg = if self.cfg.sensing.noisy {
            self.sensing
        } else {
            SensingConfig {
                a_tau: 0.0,
                a_mu: 0.0,
                a_theta: 0.0,
                ..self.sensing
            }
        };
        for l in 0..l_cells {
            for (slot, &u) in tx.schedules[l].iter().enumerate() {
                let kin = self.users[l][u];
                let geom = kin.relative_to(&self.sites[l])?;
                let mut rng = stream(self.cfg.seed, &[tag::SENSING, n as u64, l as u64, u as u64]);
                match sense(&geom, slot, &tx.beams[l], &sensing_cfg, &mut rng) {
                    Ok(est) => {
                        let loc = locate(&self.sites[l], &est);
                        self.last_known[l][u] = loc;
                        let err = (loc.0 - kin.position.0).hypot(loc.1 - kin.position.1);
                        records[l * self.cfg.users_per_cell + u].location_error = Some(err);
                    }
                    Err(Error::EchoLost(_)) => sensing_failures += 1,
                    Err(e) => return Err(e),
                }
            }
        }

        // Scheduling for the next epoch.
        let schedule = self.schedule(&intra, n);
        for (pf, s) in self.pf.iter_mut().zip(&schedule) {
            pf.mark_scheduled(n, s);
        }

        // Location exchange and outgoing CSI.
        let scheduled_total: u64 = schedule.iter().map(|s| s.len() as u64).sum();
        let peers = l_cells.saturating_sub(1) as u64;
        let bytes_locations = scheduled_total * BYTES_PER_ENTRY * peers;
        let bytes_full_csi = bytes_locations * self.cfg.n_tx as u64;
        let mut ckm_misses = 0;
        let mut inter_sums = Vec::with_capacity(l_cells);
        for m in 0..l_cells {
            let mut sum = CMatrix::zeros(self.cfg.n_tx, self.cfg.n_tx);
            for (l, s) in schedule.iter().enumerate() {
                if l == m {
                    continue;
                }
                for &u in s {
                    match self.cfg.ckm.source {
                        CsiSource::Oracle => add_outer(&mut sum, &ch.h[m][l][u], 1.0),
                        CsiSource::Ckm => match self.ckms[m].as_ref().map(|c| c.query(self.last_known[l][u])) {
                            Some(Ok(h)) => add_outer(&mut sum, h, 1.0),
                            Some(Err(Error::OutOfCoverage { .. })) | None => ckm_misses += 1,
                            Some(Err(e)) => return Err(e),
                        },
                    }
                }
            }
            inter_sums.push(sum);
        }

        // Beamforming for the next epoch.
        let problems: Vec<BfProblem> = (0..l_cells)
            .map(|l| self.cell_problem(l, &schedule[l], &intra[l], &inter_sums[l]))
            .collect();
        let solutions: Vec<Result<beamforming::BfSolution>> = problems
            .par_iter()
            .map(|p| beamforming::solve(p, &self.cfg.solver))
            .collect();
        let mut beams = Vec::with_capacity(l_cells);
        let (mut outer, mut inner) = (0, 0);
        let (mut infeasible_cells, mut failed_cells) = (Vec::new(), Vec::new());
        for (l, sol) in solutions.into_iter().enumerate() {
            match sol {
                Ok(sol) => {
                    outer += sol.outer_iterations;
                    inner += sol.inner_iterations;
                    if !sol.sensing_feasible {
                        infeasible_cells.push(l);
                    }
                    beams.push(sol.beams);
                }
                Err(e) => {
                    warn!("beamforming failed in cell {l} at epoch {n}: {e}");
                    failed_cells.push(l);
                    let prev = if tx.schedules[l] == schedule[l] {
                        tx.beams[l].clone()
                    } else {
                        let hs: Vec<&CVector> = schedule[l].iter().map(|&u| &intra[l][u]).collect();
                        matched_filters(&hs, self.cfg.power)
                    };
                    beams.push(prev);
                }
            }
        }

        // Mobility.
        for (l, cell) in self.users.iter_mut().enumerate() {
            for kin in cell.iter_mut() {
                *kin = move_user(&self.cfg, &self.sites[l], kin, self.cfg.epoch_secs);
            }
        }

        self.pending = Transmission {
            schedules: schedule.clone(),
            beams: beams.clone(),
        };
        self.epoch = n;
        self.problems = problems;
        let trace = EpochTrace {
            epoch: n,
            served: tx.schedules,
            schedule,
            users: records,
            pfr,
            solver_outer_iterations: outer,
            solver_inner_iterations: inner,
            infeasible_cells,
            failed_cells,
            sensing_failures,
            ckm_misses,
            bytes_locations,
            bytes_full_csi,
            beams,
        };
        self.traces.push(trace.clone());
        Ok(trace)
    }

    /// Beamforming problem of cell `l` for the users in `sched`.
    fn cell_problem(&self, l: usize, sched: &[usize], intra: &[CVector], inter_sum: &CMatrix) -> BfProblem {
        let site = &self.sites[l];
        let estimates: Vec<(f64, f64)> = sched
            .iter()
            .map(|&u| {
                let p = self.last_known[l][u];
                let (dx, dy) = (p.0 - site.position.0, p.1 - site.position.1);
                let theta = wrap_angle(dy.atan2(dx) - site.broadside);
                (theta, dx.hypot(dy).max(crate::sensing::MIN_RANGE))
            })
            .collect();
        let (model, inter) = match self.cfg.mode {
            BfMode::SdUscb => (LeakageModel::Average, inter_sum.clone()),
            BfMode::Slinr => (LeakageModel::PerBeam, inter_sum.clone()),
            BfMode::ZeroLeakage => (LeakageModel::Average, CMatrix::zeros(self.cfg.n_tx, self.cfg.n_tx)),
        };
        BfProblem {
            channels: sched.iter().map(|&u| intra[u].clone()).collect(),
            inter_sum: inter,
            model,
            weights: sched
                .iter()
                .map(|&u| 1.0 / self.pf[l].avg_rate[u].max(crate::scheduling::INITIAL_AVG_RATE))
                .collect(),
            power: self.cfg.power,
            noise: self.sigma_c2,
            sensing: Some(SensingSpec::from_estimates(&self.sensing, self.cfg.sensing.threshold, &estimates)),
        }
    }

    /// Problems solved by each cell in the most recent epoch.
    pub fn cell_problems(&self) -> &[BfProblem] {
        &self.problems
    }

    /// Run the remaining epochs and summarise.
    pub fn run(&mut self) -> Result<SimSummary> {
        while self.epoch < self.cfg.epochs {
            self.run_epoch()?;
        }
        Ok(self.summary())
    }

    pub fn summary(&self) -> SimSummary {
        let pfr_curve: Vec<f64> = self.traces.iter().map(|t| t.pfr).collect();
        let errors: Vec<f64> = self
            .traces
            .iter()
            .flat_map(|t| t.users.iter().filter_map(|u| u.location_error))
            .collect();
        let served_rates: Vec<f64> = self
            .traces
            .iter()
            .flat_map(|t| t.users.iter().filter(|u| u.scheduled).map(|u| u.rate))
            .collect();
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        SimSummary {
            seed: self.cfg.seed,
            mode: self.cfg.mode,
            csi_source: self.cfg.ckm.source,
            sensing_threshold: self.cfg.sensing.threshold,
            sigma_c2: self.sigma_c2,
            epochs: self.traces.len(),
            mean_pfr: mean(&pfr_curve),
            median_pfr: median(&pfr_curve),
            final_pfr: pfr_curve.last().copied().unwrap_or(f64::NAN),
            pfr_curve,
            mean_rate: mean(&served_rates),
            mean_location_error: mean(&errors),
            bytes_locations: self.traces.iter().map(|t| t.bytes_locations).sum(),
            bytes_full_csi: self.traces.iter().map(|t| t.bytes_full_csi).sum(),
            flagged_epochs: self.traces.iter().filter(|t| t.flagged()).count(),
            ckm_misses: self.traces.iter().map(|t| t.ckm_misses).sum(),
            sensing_failures: self.traces.iter().map(|t| t.sensing_failures).sum(),
            ckm_reports: self.ckm_reports.clone(),
        }
    }
}

/// Run a scenario end to end.
pub fn run(cfg: ScenarioConfig) -> Result<(Vec<EpochTrace>, SimSummary)> {
    let mut sim = Simulator::new(cfg)?;
    let summary = sim.run()?;
    Ok((sim.traces, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            epochs: 3,
            users_per_cell: 4,
            ckm: crate::scenario::CkmSetup {
                source: CsiSource::Oracle,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn calibration_hits_target_and_scales_with_power() {
        let cfg = small();
        let s1 = calibrate_noise(&cfg).unwrap();
        let sites = cfg.sites();
        let users = place_users(&cfg, &sites);
        let ch = epoch_channels(&cfg, &sites, &InterField::new(&cfg), &users, 1, None).unwrap();
        let mut total = 0.0;
        let mut pairs = 0.0;
        for m in &ch.h {
            for c in m {
                for h in c {
                    total += h.norm_squared();
                    pairs += 1.0;
                }
            }
        }
        let snr_db = 10.0 * (cfg.power * total / (pairs * cfg.n_tx as f64 * s1)).log10();
        assert!((snr_db - 15.0).abs() < 1e-9);
        let doubled = ScenarioConfig { power: 2.0 * cfg.power, ..cfg };
        let s2 = calibrate_noise(&doubled).unwrap();
        assert!((s2 / s1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_channels_rejected() {
        let ch = NetworkChannels {
            h: vec![vec![vec![CVector::zeros(4)]]],
        };
        assert!(noise_for_channels(&ch, 1.0, 4, 15.0).is_err());
    }

    #[test]
    fn field_is_static_within_a_tile() {
        let cfg = small();
        let field = InterField::new(&cfg);
        let site = cfg.sites()[0];
        let a = field.large_scale(0, &site, (101.0, 51.0)).unwrap();
        let b = field.large_scale(0, &site, (102.0, 52.0)).unwrap();
        let c = field.large_scale(0, &site, (131.0, 51.0)).unwrap();
        assert_eq!(a.iter().map(|p| p.aod).collect::<Vec<_>>(), b.iter().map(|p| p.aod).collect::<Vec<_>>());
        assert_ne!(a[0].aod, c[0].aod);
    }

    #[test]
    fn users_stay_in_their_sector() {
        let cfg = ScenarioConfig {
            speed: 30.0,
            ..small()
        };
        let sites = cfg.sites();
        let mut users = place_users(&cfg, &sites);
        for _ in 0..500 {
            for (l, cell) in users.iter_mut().enumerate() {
                for k in cell.iter_mut() {
                    *k = move_user(&cfg, &sites[l], k, 0.1);
                    assert!(in_sector(&cfg, &sites[l], k));
                }
            }
        }
    }

    #[test]
    fn zero_epochs_give_empty_trace() {
        let (traces, summary) = run(ScenarioConfig { epochs: 0, ..small() }).unwrap();
        assert!(traces.is_empty());
        assert!(summary.pfr_curve.is_empty());
    }

    #[test]
    fn single_cell_exchanges_nothing() {
        let cfg = ScenarioConfig {
            bs_positions: vec![(0.0, 0.0)],
            ..small()
        };
        let (traces, _) = run(cfg).unwrap();
        assert!(traces.iter().all(|t| t.bytes_locations == 0 && t.bytes_full_csi == 0));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
