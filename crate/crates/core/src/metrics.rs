//! Ground-truth SINR, rates, proportional-fair utility, and a Monte Carlo
//! check of the leakage-surrogate rate error bounds under Rayleigh fading.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::gen_rayleigh;
use crate::linalg::{gain, CVector};
use crate::rng::stream;
use crate::scheduling::INITIAL_AVG_RATE;
use crate::{Error, Result};

/// Channels of a network: `h[m][l][u]` is the channel from BS `m` to user `u` of cell `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkChannels {
    pub h: Vec<Vec<Vec<CVector>>>,
}

impl NetworkChannels {
    pub fn n_cells(&self) -> usize {
        self.h.len()
    }

    pub fn channel(&self, bs: usize, cell: usize, user: usize) -> &CVector {
        &self.h[bs][cell][user]
    }
}

/// What every BS transmits in one epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Transmission {
    /// Scheduled user ids per cell.
    pub schedules: Vec<Vec<usize>>,
    /// Beams per cell, aligned with `schedules`.
    pub beams: Vec<Vec<CVector>>,
}

/// Received powers of one scheduled user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinrTerms {
    pub signal: f64,
    /// Interference from the serving BS's other beams.
    pub intra: f64,
    /// Interference from the other BSs.
    pub inter: f64,
}

impl SinrTerms {
    pub fn sinr(&self, noise: f64) -> f64 {
        self.signal / (self.intra + self.inter + noise)
    }
}

/// Signal and interference powers of the user in slot `slot` of cell `cell`.
pub fn sinr_terms(cell: usize, slot: usize, ch: &NetworkChannels, tx: &Transmission) -> SinrTerms {
    let user = tx.schedules[cell][slot];
    let own = ch.channel(cell, cell, user);
    let beams = &tx.beams[cell];
    let signal = gain(own, &beams[slot]);
    let intra: f64 = beams
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != slot)
        .map(|(_, v)| gain(own, v))
        .sum();
    let inter: f64 = (0..ch.n_cells())
        .filter(|&m| m != cell)
        .map(|m| {
            let h = ch.channel(m, cell, user);
            tx.beams[m].iter().map(|v| gain(h, v)).sum::<f64>()
        })
        .sum();
    SinrTerms { signal, intra, inter }
}

/// SINR of the user in slot `slot` of cell `cell`, with all cells' beams.
pub fn true_sinr(cell: usize, slot: usize, ch: &NetworkChannels, tx: &Transmission, noise: f64) -> f64 {
    sinr_terms(cell, slot, ch, tx).sinr(noise)
}

/// `log2(1 + sinr)` in bits/s/Hz.
pub fn rate(sinr: f64) -> f64 {
    (1.0 + sinr.max(0.0)).log2()
}

/// Running mean `((n-1) prev + r) / n` for epoch `n >= 1`.
pub fn update_avg_rate(prev: f64, r: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Domain("epochs are counted from 1".into()));
    }
    let n = n as f64;
    Ok(((n - 1.0) * prev + r) / n)
}

/// `sum ln(max(R_hat, floor))` with the floor at the initial average rate, so
/// never-served users contribute a finite penalty.
pub fn network_pfr(avg_rates: &[f64]) -> f64 {
    avg_rates.iter().map(|r| r.max(INITIAL_AVG_RATE).ln()).sum()
}

/// Rate, average-rate and utility bookkeeping for a set of users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRecord {
    pub rates: Vec<f64>,
    pub avg_rates: Vec<f64>,
    pub pfr: f64,
}

/// Outcome of the leakage-surrogate Monte Carlo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub m: usize,
    pub s_size: usize,
    pub power: f64,
    pub sigma_c2: f64,
    pub n_draws: usize,
    pub mean_ici: f64,
    pub var_ici: f64,
    pub mse_slinr_ici: f64,
    pub mse_salinr_ici: f64,
    /// Mean |rate error| with the per-beam leakage.
    pub mean_abs_err_slinr: f64,
    /// Mean |rate error| with the average leakage.
    pub mean_abs_err_salinr: f64,
    /// `E[Z^2]` with `Z = S / (sigma^2 (sigma^2 + S))`, `S ~ Exp(P)`.
    pub z_bar: f64,
    /// `P Z_bar sqrt(2M)`.
    pub bound_slinr: f64,
    /// `P Z_bar sqrt(M (1 + 1/|S|))`.
    pub bound_salinr: f64,
    /// `sqrt(Z_bar) P sqrt(2M)`, the Cauchy-Schwarz form.
    pub cs_bound_slinr: f64,
    /// `sqrt(Z_bar) P sqrt(M (1 + 1/|S|))`.
    pub cs_bound_salinr: f64,
    /// Reference moments `MP`, `MP^2`, `MP^2 (1 + 1/|S|)`.
    pub expected_mean_ici: f64,
    pub expected_var_ici: f64,
    pub expected_mse_salinr_ici: f64,
    /// Average leakage modelled directly as `Gamma(M, P / sqrt(|S|))`.
    pub gamma_model: GammaModelReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaModelReport {
    pub mean_leakage: f64,
    pub var_leakage: f64,
    pub mse_ici: f64,
    pub mean_abs_err: f64,
}

/// `E[(S / (s2 (s2 + S)))^2]` for `S ~ Exp(p)`, by composite Simpson on `S = p u`.
pub fn z_bar(p: f64, sigma_c2: f64) -> f64 {
    let n = 200_000usize;
    let u_max = 60.0;
    let h = u_max / n as f64;
    let f = |u: f64| {
        let s = p * u;
        let z = s / (sigma_c2 * (sigma_c2 + s));
        z * z * (-u).exp()
    };
    let mut acc = f(0.0) + f(u_max);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(i as f64 * h);
    }
    acc * h / 3.0
}

fn unit_beam<R: Rng + ?Sized>(n: usize, rng: &mut R) -> CVector {
    let v = gen_rayleigh(n, rng);
    let norm = v.norm();
    v.unscale(norm)
}

#[derive(Default, Clone, Copy)]
struct Sums {
    ici: f64,
    ici2: f64,
    e1: f64,
    e2: f64,
    r1: f64,
    r2: f64,
    g_l: f64,
    g_l2: f64,
    g_e: f64,
    g_r: f64,
}

impl std::ops::Add for Sums {
    type Output = Sums;
    fn add(self, o: Sums) -> Sums {
        Sums {
            ici: self.ici + o.ici,
            ici2: self.ici2 + o.ici2,
            e1: self.e1 + o.e1,
            e2: self.e2 + o.e2,
            r1: self.r1 + o.r1,
            r2: self.r2 + o.r2,
            g_l: self.g_l + o.g_l,
            g_l2: self.g_l2 + o.g_l2,
            g_e: self.g_e + o.g_e,
            g_r: self.g_r + o.g_r,
        }
    }
}

/// Monte Carlo of the rate error caused by replacing the true inter-cell
/// interference with the per-beam or the average leakage.
///
/// The user's own cell schedules `s_size` users on orthogonal beams; `m`
/// users are scheduled elsewhere. All channels are i.i.d. `CN(0, I)`, all
/// beams have squared norm `p`, intra-cell interference is zero and rates
/// are in nats.
pub fn theorem1_mc(m: usize, s_size: usize, p: f64, sigma_c2: f64, n_draws: usize, seed: u64) -> Result<Theorem1Report> {
    if s_size < 1 {
        return Err(Error::Domain("the own cell must schedule at least one user".into()));
    }
    if n_draws == 0 {
        return Err(Error::Domain("at least one Monte Carlo draw is required".into()));
    }
    if !(p > 0.0) || !(sigma_c2 > 0.0) {
        return Err(Error::Domain("power and noise must be positive".into()));
    }
    let n_tx = s_size.max(16);
    let mut setup = stream(seed, &[0]);
    let own: Vec<CVector> = {
        let cols: Vec<CVector> = (0..s_size).map(|_| gen_rayleigh(n_tx, &mut setup)).collect();
        let mat = crate::linalg::hstack(&cols.iter().collect::<Vec<_>>());
        let q = mat.qr().q();
        (0..s_size).map(|j| q.column(j).into_owned().scale(p.sqrt())).collect()
    };
    let interferers: Vec<CVector> = (0..m).map(|_| unit_beam(n_tx, &mut setup).scale(p.sqrt())).collect();
    let gamma = if m > 0 {
        Some(Gamma::new(m as f64, p / (s_size as f64).sqrt()).map_err(|e| Error::Domain(e.to_string()))?)
    } else {
        None
    };
    let chunk = 4096;
    let n_chunks = n_draws.div_ceil(chunk);
    let rate = |s: f64, x: f64| (1.0 + s / (sigma_c2 + x)).ln();
    let sums = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(seed, &[1, c as u64]);
            let mut acc = Sums::default();
            let draws = chunk.min(n_draws - c * chunk);
            for _ in 0..draws {
                let h_own = gen_rayleigh(n_tx, &mut rng);
                let s = gain(&h_own, &own[0]);
                let ici: f64 = interferers.iter().map(|v| gain(&gen_rayleigh(n_tx, &mut rng), v)).sum();
                let mut per_beam = vec![0.0; s_size];
                for _ in 0..m {
                    let g = gen_rayleigh(n_tx, &mut rng);
                    for (acc_j, v) in per_beam.iter_mut().zip(&own) {
                        *acc_j += gain(&g, v);
                    }
                }
                let l_hat = per_beam[0];
                let l_tilde = per_beam.iter().sum::<f64>() / s_size as f64;
                let l_gamma = gamma.map_or(0.0, |g| g.sample(&mut rng));
                let r_true = rate(s, ici);
                acc.ici += ici;
                acc.ici2 += ici * ici;
                acc.e1 += (l_hat - ici).powi(2);
                acc.e2 += (l_tilde - ici).powi(2);
                acc.r1 += (rate(s, l_hat) - r_true).abs();
                acc.r2 += (rate(s, l_tilde) - r_true).abs();
                acc.g_l += l_gamma;
                acc.g_l2 += l_gamma * l_gamma;
                acc.g_e += (l_gamma - ici).powi(2);
                acc.g_r += (rate(s, l_gamma) - r_true).abs();
            }
            acc
        })
        .reduce(Sums::default, |a, b| a + b);
    let n = n_draws as f64;
    let mean_ici = sums.ici / n;
    let var_ici = sums.ici2 / n - mean_ici * mean_ici;
    let g_mean = sums.g_l / n;
    let zb = z_bar(p, sigma_c2);
    let mf = m as f64;
    let inv_s = 1.0 / s_size as f64;
    Ok(Theorem1Report {
        m,
        s_size,
        power: p,
        sigma_c2,
        n_draws,
        mean_ici,
        var_ici,
        mse_slinr_ici: sums.e1 / n,
        mse_salinr_ici: sums.e2 / n,
        mean_abs_err_slinr: sums.r1 / n,
        mean_abs_err_salinr: sums.r2 / n,
        z_bar: zb,
        bound_slinr: p * zb * (2.0 * mf).sqrt(),
        bound_salinr: p * zb * (mf * (1.0 + inv_s)).sqrt(),
        cs_bound_slinr: zb.sqrt() * p * (2.0 * mf).sqrt(),
        cs_bound_salinr: zb.sqrt() * p * (mf * (1.0 + inv_s)).sqrt(),
        expected_mean_ici: mf * p,
        expected_var_ici: mf * p * p,
        expected_mse_salinr_ici: mf * p * p * (1.0 + inv_s),
        gamma_model: GammaModelReport {
            mean_leakage: g_mean,
            var_leakage: sums.g_l2 / n - g_mean * g_mean,
            mse_ici: sums.g_e / n,
            mean_abs_err: sums.g_r / n,
        },
    })
}
