//! ISAC coordinated beamforming with leakage surrogates.
//!
//! Each BS maximises the PF-weighted sum of leakage-aware SINR surrogates of
//! its scheduled users subject to a power budget and per-user sensing
//! accuracy constraints. The solver alternates closed-form fractional
//! programming auxiliaries `(xi, zeta)` with a beamformer step. The
//! beamformer step linearises the sensing constraints around the previous
//! iterate and solves the resulting convex problem in the dual domain by
//! projected gradient. For a fixed dual point each beamformer is a linear
//! solve; with the average-leakage surrogate all users share one matrix up to
//! a rank-one term, so a single inverse per dual iteration serves every user.
//!
//! Internally the problem is rescaled so that the power budget, the
//! communication noise and the echo noise are all one. Dual variables in
//! [`BfSolution`] are reported in those units.

use std::time::Instant;

use log::warn;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{gen_rayleigh, steer};
use crate::linalg::{add_outer, gain, hpd_inverse, inner, quad_form, total_power, CMatrix, CVector};
use crate::sensing::SensingConfig;
use crate::{Error, Result};

/// Surrogate used for the inter-cell interference term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeakageModel {
    /// Mean outgoing leakage over the cell's beams (SALINR).
    Average,
    /// Each beam's own outgoing leakage (SLINR).
    PerBeam,
}

/// Sensing geometry of one scheduled user as seen by its BS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensingTarget {
    pub theta_hat: f64,
    /// `G kappa^2 |beta_hat|^2`.
    pub echo_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensingSpec {
    pub targets: Vec<SensingTarget>,
    /// Estimator constants `(a_tau, a_mu, a_theta)`.
    pub constants: [f64; 3],
    pub sigma_z2: f64,
    /// Variance threshold `c_bar`.
    pub threshold: f64,
}

impl SensingSpec {
    /// Targets from `(theta_hat, d_hat)` pairs; `beta_hat = eta / (2 d_hat)`.
    pub fn from_estimates(cfg: &SensingConfig, threshold: f64, estimates: &[(f64, f64)]) -> Self {
        let targets = estimates
            .iter()
            .map(|&(theta_hat, d_hat)| {
                let beta = cfg.eta_rcs / (2.0 * d_hat);
                SensingTarget {
                    theta_hat,
                    echo_gain: cfg.echo_scale() * beta * beta,
                }
            })
            .collect();
        Self {
            targets,
            constants: [cfg.a_tau, cfg.a_mu, cfg.a_theta],
            sigma_z2: cfg.sigma_z2,
            threshold,
        }
    }

    /// Largest estimator constant.
    pub fn binding_constant(&self) -> f64 {
        self.constants.iter().cloned().fold(0.0, f64::max)
    }

    /// `c_bar / a_bind^2`; zero when every constant vanishes.
    fn ratio(&self) -> f64 {
        let a = self.binding_constant();
        if a > 0.0 {
            self.threshold / (a * a)
        } else {
            0.0
        }
    }

    fn active(&self) -> bool {
        self.binding_constant() > 0.0 && self.threshold.is_finite()
    }

    /// Echo SINR of target `k` under `beams`.
    pub fn echo_sinr(&self, k: usize, beams: &[CVector]) -> f64 {
        let t = &self.targets[k];
        let a = steer(t.theta_hat, beams[k].len());
        let signal = t.echo_gain * gain(&a, &beams[k]);
        let other: f64 = beams
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .map(|(_, v)| t.echo_gain * gain(&a, v))
            .sum();
        signal / (other + self.sigma_z2)
    }

    /// Error variances `(tau, mu, theta)` of target `k` under `beams`.
    pub fn variances(&self, k: usize, beams: &[CVector]) -> [f64; 3] {
        let s = self.echo_sinr(k, beams);
        self.constants.map(|a| if s > 0.0 { a * a / s } else { f64::INFINITY })
    }

    /// Whether every variance of every target is within `threshold * (1 + rel_tol)`.
    pub fn satisfied(&self, beams: &[CVector], rel_tol: f64) -> bool {
        (0..self.targets.len()).all(|k| {
            self.variances(k, beams)
                .iter()
                .zip(self.constants)
                .all(|(v, a)| a == 0.0 || *v <= self.threshold * (1.0 + rel_tol))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfProblem {
    /// Intra-cell CSI of the scheduled users.
    pub channels: Vec<CVector>,
    /// `sum h h^H` over the other cells' scheduled users (unnormalised).
    pub inter_sum: CMatrix,
    pub model: LeakageModel,
    /// PF weights `1 / R_hat`.
    pub weights: Vec<f64>,
    pub power: f64,
    pub noise: f64,
    pub sensing: Option<SensingSpec>,
}

impl BfProblem {
    pub fn n_users(&self) -> usize {
        self.channels.len()
    }

    pub fn n_tx(&self) -> usize {
        self.inter_sum.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_users();
        let n = self.n_tx();
        if k == 0 {
            return Err(Error::Domain("beamforming needs at least one scheduled user".into()));
        }
        if self.inter_sum.ncols() != n {
            return Err(Error::Dimension {
                expected: n,
                got: self.inter_sum.ncols(),
            });
        }
        if let Some(h) = self.channels.iter().find(|h| h.len() != n) {
            return Err(Error::Dimension { expected: n, got: h.len() });
        }
        if self.weights.len() != k {
            return Err(Error::Dimension {
                expected: k,
                got: self.weights.len(),
            });
        }
        if !(self.power > 0.0) || !(self.noise > 0.0) || self.weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Domain("power, noise and weights must be positive".into()));
        }
        if let Some(s) = &self.sensing {
            if s.targets.len() != k {
                return Err(Error::Dimension {
                    expected: k,
                    got: s.targets.len(),
                });
            }
            if !(s.threshold > 0.0) || !(s.sigma_z2 > 0.0) {
                return Err(Error::Domain("sensing threshold and echo noise must be positive".into()));
            }
        }
        Ok(())
    }

    /// Leakage term seen by user `k`.
    pub fn leakage(&self, k: usize, beams: &[CVector]) -> f64 {
        match self.model {
            LeakageModel::Average => {
                beams.iter().map(|v| quad_form(&self.inter_sum, v)).sum::<f64>() / beams.len() as f64
            }
            LeakageModel::PerBeam => quad_form(&self.inter_sum, &beams[k]),
        }
    }

    /// `sum_j |h_k^H v_j|^2 + leakage + noise`.
    fn denominator(&self, k: usize, beams: &[CVector]) -> f64 {
        let h = &self.channels[k];
        beams.iter().map(|v| gain(h, v)).sum::<f64>() + self.leakage(k, beams) + self.noise
    }

    /// Surrogate SINR of user `k`.
    pub fn sinr(&self, k: usize, beams: &[CVector]) -> f64 {
        let s = gain(&self.channels[k], &beams[k]);
        let d = self.denominator(k, beams) - s;
        if d > 0.0 {
            s / d
        } else {
            0.0
        }
    }

    /// `sum_k w_k log2(1 + sinr_k)`.
    pub fn objective(&self, beams: &[CVector]) -> f64 {
        (0..self.n_users())
            .map(|k| self.weights[k] * (1.0 + self.sinr(k, beams)).log2())
            .sum()
    }

    /// Copy in units where power, communication noise and echo noise are one.
    fn normalized(&self) -> BfProblem {
        let s2 = self.power / self.noise;
        let s = s2.sqrt();
        BfProblem {
            channels: self.channels.iter().map(|h| h.scale(s)).collect(),
            inter_sum: self.inter_sum.scale(s2),
            model: self.model,
            weights: self.weights.clone(),
            power: 1.0,
            noise: 1.0,
            sensing: self.sensing.as_ref().map(|sp| SensingSpec {
                targets: sp
                    .targets
                    .iter()
                    .map(|t| SensingTarget {
                        echo_gain: t.echo_gain * self.power / sp.sigma_z2,
                        ..*t
                    })
                    .collect(),
                sigma_z2: 1.0,
                ..sp.clone()
            }),
        }
    }
}

/// `sum_{m != l} sum_t h h^H` over the given inter-cell channel estimates.
pub fn leakage_sum(inter: &[CVector], n_tx: usize) -> CMatrix {
    let mut d = CMatrix::zeros(n_tx, n_tx);
    for h in inter {
        add_outer(&mut d, h, 1.0);
    }
    d
}

/// Leakage covariance `D = sum h h^H / |S|`.
pub fn leakage_cov(inter: &[CVector], n_tx: usize, own_scheduled: usize) -> Result<CMatrix> {
    if own_scheduled == 0 {
        return Err(Error::Domain("leakage covariance needs a nonempty own schedule".into()));
    }
    Ok(leakage_sum(inter, n_tx).unscale(own_scheduled as f64))
}

/// Average outgoing leakage `sum_j v_j^H D v_j` for `D` from [`leakage_cov`].
pub fn avg_leakage(beams: &[CVector], d: &CMatrix) -> f64 {
    beams.iter().map(|v| quad_form(d, v)).sum()
}

/// Outgoing leakage of beam `k`: `sum_t |h_t^H v_k|^2`.
pub fn slinr_leakage(k: usize, beams: &[CVector], inter: &[CVector]) -> f64 {
    inter.iter().map(|h| gain(h, &beams[k])).sum()
}

/// Average-leakage SINR surrogate of user `k`.
pub fn salinr(k: usize, beams: &[CVector], h_k: &CVector, d: &CMatrix, noise: f64) -> f64 {
    let interference: f64 = beams
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != k)
        .map(|(_, v)| gain(h_k, v))
        .sum();
    gain(h_k, &beams[k]) / (interference + avg_leakage(beams, d) + noise)
}

/// Fractional programming auxiliaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpAux {
    pub xi: Vec<f64>,
    pub zeta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualVars {
    pub lambda: f64,
    pub mu: Vec<f64>,
}

impl DualVars {
    pub fn initial(n_users: usize) -> Self {
        Self {
            lambda: 1.0,
            mu: vec![0.0; n_users],
        }
    }

    fn norm(&self) -> f64 {
        (self.lambda * self.lambda + self.mu.iter().map(|m| m * m).sum::<f64>()).sqrt()
    }

    fn distance(&self, other: &DualVars) -> f64 {
        let dl = self.lambda - other.lambda;
        let dm: f64 = self.mu.iter().zip(&other.mu).map(|(a, b)| (a - b) * (a - b)).sum();
        (dl * dl + dm).sqrt()
    }
}

/// `xi_k = sinr_k(V)`.
pub fn update_xi(beams: &[CVector], problem: &BfProblem) -> Vec<f64> {
    (0..problem.n_users()).map(|k| problem.sinr(k, beams)).collect()
}

/// `zeta_k = sqrt((1 + xi_k) w_k) |h_k^H v_k| / (sum_j |h_k^H v_j|^2 + leakage + noise)`.
pub fn update_zeta(beams: &[CVector], xi: &[f64], problem: &BfProblem) -> Vec<f64> {
    (0..problem.n_users())
        .map(|k| {
            let amp = inner(&problem.channels[k], &beams[k]).norm();
            ((1.0 + xi[k]) * problem.weights[k]).sqrt() * amp / problem.denominator(k, beams)
        })
        .collect()
}

/// Fractional-programming surrogate
/// `sum_k w ln(1+xi) - w xi + 2 zeta sqrt((1+xi) w) Re(h^H v) - zeta^2 den_k`.
pub fn fp_objective(beams: &[CVector], fp: &FpAux, problem: &BfProblem) -> f64 {
    (0..problem.n_users())
        .map(|k| {
            let w = problem.weights[k];
            let (xi, zeta) = (fp.xi[k], fp.zeta[k]);
            let re = inner(&problem.channels[k], &beams[k]).re;
            w * (1.0 + xi).ln() - w * xi + 2.0 * zeta * ((1.0 + xi) * w).sqrt() * re
                - zeta * zeta * problem.denominator(k, beams)
        })
        .sum()
}

/// Sensing matrix `C_k = c_bar G kappa^2 |beta|^2 a a^H / a_bind^2`.
pub fn sensing_matrix(spec: &SensingSpec, k: usize, n_tx: usize) -> CMatrix {
    let a = steer(spec.targets[k].theta_hat, n_tx);
    let mut c = CMatrix::zeros(n_tx, n_tx);
    add_outer(&mut c, &a, spec.ratio() * spec.targets[k].echo_gain);
    c
}

/// First-order minorant `2 Re(v_ref^H C v) - v_ref^H C v_ref` of `v^H C v`.
pub fn sca_bound(v: &CVector, v_ref: &CVector, c: &CMatrix) -> f64 {
    2.0 * inner(v_ref, &(c * v)).re - quad_form(c, v_ref)
}

/// Per-user quantities fixed during one beamformer step.
struct StepData {
    /// Steering vectors at the sensed angles (empty without sensing).
    steer: Vec<CVector>,
    /// `G kappa^2 |beta|^2` per user.
    echo: Vec<f64>,
    /// `c_bar / a_bind^2`.
    ratio: f64,
    sigma_z2: f64,
    /// `a_k^H v_ref,k`.
    a_ref: Vec<Complex64>,
    /// FP linear terms `zeta_k sqrt((1+xi_k) w_k) h_k`.
    b: Vec<CVector>,
    /// Shared quadratic part `sum_k zeta_k^2 h_k h_k^H`.
    h_zeta: CMatrix,
    /// Leakage matrix and its per-user multipliers.
    leak: CMatrix,
    leak_coef: Vec<f64>,
    shared_leak: bool,
    /// Upper bounds on the sensing multipliers; a finite cap turns the
    /// linearised constraints into exact penalties when they are infeasible.
    mu_cap: Vec<f64>,
}

impl StepData {
    fn new(problem: &BfProblem, fp: &FpAux, v_ref: &[CVector]) -> Self {
        let n = problem.n_tx();
        let k = problem.n_users();
        let mut h_zeta = CMatrix::zeros(n, n);
        for (h, z) in problem.channels.iter().zip(&fp.zeta) {
            add_outer(&mut h_zeta, h, z * z);
        }
        let b = (0..k)
            .map(|i| problem.channels[i].scale(fp.zeta[i] * ((1.0 + fp.xi[i]) * problem.weights[i]).sqrt()))
            .collect();
        let zsum: f64 = fp.zeta.iter().map(|z| z * z).sum();
        let (leak, leak_coef, shared_leak) = match problem.model {
            LeakageModel::Average => (problem.inter_sum.unscale(k as f64), vec![zsum; k], true),
            LeakageModel::PerBeam => (problem.inter_sum.clone(), fp.zeta.iter().map(|z| z * z).collect(), false),
        };
        let (steer_v, echo, ratio, sigma_z2) = match problem.sensing.as_ref().filter(|s| s.active()) {
            Some(s) => (
                s.targets.iter().map(|t| steer(t.theta_hat, n)).collect::<Vec<_>>(),
                s.targets.iter().map(|t| t.echo_gain).collect(),
                s.ratio(),
                s.sigma_z2,
            ),
            None => (Vec::new(), Vec::new(), 0.0, 0.0),
        };
        let a_ref = steer_v.iter().zip(v_ref).map(|(a, v)| inner(a, v)).collect();
        let mu_cap = vec![f64::INFINITY; problem.n_users()];
        Self {
            steer: steer_v,
            echo,
            ratio,
            sigma_z2,
            a_ref,
            b,
            h_zeta,
            leak,
            leak_coef,
            shared_leak,
            mu_cap,
        }
    }

    fn with_mu_cap(mut self, factor: f64, weights: &[f64]) -> Self {
        if !self.sensing() {
            return self;
        }
        let w_max = weights.iter().cloned().fold(0.0, f64::max);
        self.mu_cap = self
            .echo
            .iter()
            .map(|g| {
                let scale = self.ratio * g;
                if scale > 0.0 {
                    factor * w_max / scale
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        self
    }

    fn sensing(&self) -> bool {
        !self.steer.is_empty()
    }

    fn n_users(&self) -> usize {
        self.b.len()
    }

    /// Right-hand side `b_k + mu_k C_k v_ref,k`.
    fn rhs(&self, k: usize, duals: &DualVars) -> CVector {
        if !self.sensing() || duals.mu[k] == 0.0 {
            return self.b[k].clone();
        }
        let c = Complex64::new(duals.mu[k] * self.ratio * self.echo[k], 0.0) * self.a_ref[k];
        &self.b[k] + self.steer[k].map(|x| x * c)
    }

    /// Full system matrix of user `k`, built from scratch.
    fn user_matrix(&self, k: usize, duals: &DualVars, lambda: f64) -> CMatrix {
        let n = self.h_zeta.nrows();
        let mut m = &self.h_zeta + self.leak.scale(self.leak_coef[k]);
        for i in 0..n {
            m[(i, i)] += Complex64::new(lambda, 0.0);
        }
        if self.sensing() {
            for (i, a) in self.steer.iter().enumerate() {
                if i != k && duals.mu[i] > 0.0 {
                    add_outer(&mut m, a, duals.mu[i] * self.echo[i]);
                }
            }
        }
        m
    }
}

/// Per-user inverse operators `M_k^{-1}` for one dual point.
enum InverseOp {
    /// Shared inverse of `M = M_k + mu_k B_k` with rank-one downdates.
    Shared {
        minv: CMatrix,
        /// `M^{-1} a_k`.
        ma: Vec<CVector>,
        /// Downdate coefficients `mu g / (1 - mu g a^H M^{-1} a)`.
        coef: Vec<f64>,
        /// Explicit inverses for users whose downdate is ill-conditioned.
        fallback: Vec<Option<CMatrix>>,
    },
    PerUser(Vec<CMatrix>),
}

impl InverseOp {
    fn apply(&self, k: usize, x: &CVector) -> CVector {
        match self {
            InverseOp::Shared {
                minv,
                ma,
                coef,
                fallback,
            } => {
                if let Some(m) = &fallback[k] {
                    return m * x;
                }
                let y = minv * x;
                if coef.is_empty() || coef[k] == 0.0 {
                    return y;
                }
                let s = inner(&ma[k], x) * coef[k];
                y + ma[k].map(|e| e * s)
            }
            InverseOp::PerUser(m) => &m[k] * x,
        }
    }
}

fn invert(m: &CMatrix) -> Result<CMatrix> {
    hpd_inverse(m).ok_or_else(|| Error::Domain("beamformer system matrix is not positive definite".into()))
}

/// Shared system inverse for the average-leakage model: `M^{-1}` with
/// `M = A + lambda I + sum_i mu_i B_i`, plus `M^{-1} a_k`.
pub struct SharedInverse {
    op: InverseOp,
    data: StepData,
    duals: DualVars,
}

impl SharedInverse {
    /// Woodbury per-user update: `v_k = M_k^{-1} z_k` in `O(N^2)`.
    pub fn update_user(&self, k: usize) -> CVector {
        self.op.apply(k, &self.data.rhs(k, &self.duals))
    }
}

fn lambda_eff(lambda: f64, cfg: &BfConfig) -> (f64, bool) {
    if lambda < cfg.lambda_min {
        (cfg.lambda_min, true)
    } else {
        (lambda, false)
    }
}

fn build_op(data: &StepData, duals: &DualVars, lambda: f64, woodbury: bool) -> Result<InverseOp> {
    let k = data.n_users();
    if data.shared_leak && woodbury {
        let n = data.h_zeta.nrows();
        let mut m = &data.h_zeta + data.leak.scale(data.leak_coef.first().copied().unwrap_or(0.0));
        for i in 0..n {
            m[(i, i)] += Complex64::new(lambda, 0.0);
        }
        if data.sensing() {
            for (i, a) in data.steer.iter().enumerate() {
                if duals.mu[i] > 0.0 {
                    add_outer(&mut m, a, duals.mu[i] * data.echo[i]);
                }
            }
        }
        let minv = invert(&m)?;
        let mut ma = Vec::new();
        let mut coef = Vec::new();
        let mut fallback = vec![None; k];
        if data.sensing() {
            for i in 0..k {
                let y = &minv * &data.steer[i];
                let mg = duals.mu[i] * data.echo[i];
                let q = inner(&data.steer[i], &y).re;
                let denom = 1.0 - mg * q;
                if mg > 0.0 && denom <= 1e-10 {
                    fallback[i] = Some(invert(&data.user_matrix(i, duals, lambda))?);
                    coef.push(0.0);
                } else {
                    coef.push(if mg > 0.0 { mg / denom } else { 0.0 });
                }
                ma.push(y);
            }
        }
        Ok(InverseOp::Shared {
            minv,
            ma,
            coef,
            fallback,
        })
    } else {
        let inv = (0..k)
            .map(|i| invert(&data.user_matrix(i, duals, lambda)))
            .collect::<Result<Vec<_>>>()?;
        Ok(InverseOp::PerUser(inv))
    }
}

/// Beamformers maximising the Lagrangian at `duals` for fixed FP auxiliaries
/// and SCA reference. Returns the beams and whether `lambda` was floored.
pub fn bf_from_duals(
    duals: &DualVars,
    fp: &FpAux,
    problem: &BfProblem,
    v_ref: &[CVector],
    woodbury: bool,
    cfg: &BfConfig,
) -> Result<(Vec<CVector>, bool)> {
    let data = StepData::new(problem, fp, v_ref);
    let (lambda, floored) = lambda_eff(duals.lambda, cfg);
    let op = build_op(&data, duals, lambda, woodbury)?;
    let beams = (0..data.n_users()).map(|k| op.apply(k, &data.rhs(k, duals))).collect();
    Ok((beams, floored))
}

/// Cache the shared inverse for timing per-user Woodbury updates.
pub fn prepare_shared(
    duals: &DualVars,
    fp: &FpAux,
    problem: &BfProblem,
    v_ref: &[CVector],
    cfg: &BfConfig,
) -> Result<SharedInverse> {
    let data = StepData::new(problem, fp, v_ref);
    let (lambda, _) = lambda_eff(duals.lambda, cfg);
    let op = build_op(&data, duals, lambda, true)?;
    Ok(SharedInverse {
        op,
        data,
        duals: duals.clone(),
    })
}

/// Per-user update without the shared inverse: form and invert `M_k`, as the
/// solver does when Woodbury updates are disabled.
pub fn direct_user_update(shared: &SharedInverse, k: usize, cfg: &BfConfig) -> Result<CVector> {
    let (lambda, _) = lambda_eff(shared.duals.lambda, cfg);
    let m = shared.data.user_matrix(k, &shared.duals, lambda);
    Ok(invert(&m)? * shared.data.rhs(k, &shared.duals))
}

/// Gradient of the dual function.
#[derive(Debug, Clone, PartialEq)]
pub struct DualGradient {
    pub lambda: f64,
    pub mu: Vec<f64>,
}

fn dual_gradient(data: &StepData, beams: &[CVector], power: f64) -> DualGradient {
    let g_lambda = power - total_power(beams);
    let g_mu = (0..data.n_users())
        .map(|k| {
            if !data.sensing() {
                return 0.0;
            }
            let a = &data.steer[k];
            let g = data.echo[k];
            let own = inner(a, &beams[k]);
            let sca = data.ratio * g * (2.0 * (data.a_ref[k].conj() * own).re - data.a_ref[k].norm_sqr());
            let phi: f64 = beams
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != k)
                .map(|(_, v)| g * gain(a, v))
                .sum::<f64>()
                + data.sigma_z2;
            sca - phi
        })
        .collect();
    DualGradient {
        lambda: g_lambda,
        mu: g_mu,
    }
}

/// One projected-gradient step on the dual variables with explicit step sizes.
pub fn dual_step(
    duals: &DualVars,
    beams: &[CVector],
    fp: &FpAux,
    problem: &BfProblem,
    v_ref: &[CVector],
    step_lambda: f64,
    step_mu: &[f64],
) -> DualVars {
    let data = StepData::new(problem, fp, v_ref);
    let g = dual_gradient(&data, beams, problem.power);
    DualVars {
        lambda: (duals.lambda - step_lambda * g.lambda).max(0.0),
        mu: duals
            .mu
            .iter()
            .zip(&g.mu)
            .zip(step_mu)
            .map(|((m, gm), s)| if data.sensing() { (m - s * gm).max(0.0) } else { 0.0 })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BfConfig {
    pub tol_outer: f64,
    pub max_outer: usize,
    pub tol_inner: f64,
    pub max_inner: usize,
    pub lambda_min: f64,
    pub woodbury: bool,
    /// Relative slack of the post-hoc sensing check.
    pub tol_feas: f64,
    /// Sensing multipliers are capped at `mu_cap_factor * max(w)` divided by
    /// the scale of their constraint.
    pub mu_cap_factor: f64,
}

impl Default for BfConfig {
    fn default() -> Self {
        Self {
            tol_outer: 1e-6,
            max_outer: 50,
            tol_inner: 1e-5,
            max_inner: 200,
            lambda_min: 1e-9,
            woodbury: true,
            tol_feas: 1e-3,
            mu_cap_factor: 1e6,
        }
    }
}

impl BfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_outer > 0.0 && self.tol_inner > 0.0 && self.lambda_min > 0.0 && self.tol_feas >= 0.0 && self.mu_cap_factor > 0.0)
            || self.max_outer == 0
            || self.max_inner == 0
        {
            return Err(Error::Config("solver tolerances and iteration limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    /// The beamformer step failed to improve a feasible iterate.
    NoImprovement,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfSolution {
    pub beams: Vec<CVector>,
    pub duals: DualVars,
    pub fp: FpAux,
    /// `sum_k w_k log2(1 + sinr_k)` at the initial point and after each accepted outer iteration.
    pub objective_trace: Vec<f64>,
    /// Whether the iterate behind each trace entry met the sensing constraints.
    pub trace_feasible: Vec<bool>,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub stop: StopReason,
    pub converged: bool,
    /// Post-hoc check of every sensing variance against the threshold.
    pub sensing_feasible: bool,
    /// The power multiplier was floored to keep the system invertible.
    pub regularized: bool,
    /// Users whose channel estimate vanished and who received no beam.
    pub dropped: Vec<usize>,
    /// Wall time spent in the solver.
    pub elapsed_secs: f64,
}

struct DualEval {
    beams: Vec<CVector>,
    value: f64,
    grad: DualGradient,
    op: InverseOp,
    floored: bool,
}

fn eval_dual(data: &StepData, duals: &DualVars, power: f64, cfg: &BfConfig) -> Result<DualEval> {
    let (lambda, floored) = lambda_eff(duals.lambda, cfg);
    let op = build_op(data, duals, lambda, cfg.woodbury)?;
    let z: Vec<CVector> = (0..data.n_users()).map(|k| data.rhs(k, duals)).collect();
    let beams: Vec<CVector> = z.iter().enumerate().map(|(k, zk)| op.apply(k, zk)).collect();
    let mut value = duals.lambda * power + z.iter().zip(&beams).map(|(zk, v)| inner(zk, v).re).sum::<f64>();
    if data.sensing() {
        for k in 0..data.n_users() {
            value -= duals.mu[k] * (data.ratio * data.echo[k] * data.a_ref[k].norm_sqr() + data.sigma_z2);
        }
    }
    let grad = dual_gradient(data, &beams, power);
    Ok(DualEval {
        beams,
        value,
        grad,
        op,
        floored,
    })
}

/// Diagonal of the dual Hessian, used to scale the projected-gradient step.
fn dual_curvature(data: &StepData, ev: &DualEval) -> (f64, Vec<f64>) {
    let k = data.n_users();
    let h_lambda: f64 = 2.0
        * ev.beams
            .iter()
            .enumerate()
            .map(|(j, v)| inner(v, &ev.op.apply(j, v)).re)
            .sum::<f64>();
    let mut h_mu = vec![0.0; k];
    if data.sensing() {
        for (i, h) in h_mu.iter_mut().enumerate() {
            let a = &data.steer[i];
            let g = data.echo[i];
            let mut acc = 0.0;
            for j in 0..k {
                let q = inner(a, &ev.op.apply(j, a)).re;
                if j == i {
                    acc += 2.0 * (data.ratio * g).powi(2) * data.a_ref[i].norm_sqr() * q;
                } else {
                    acc += 2.0 * g * g * gain(a, &ev.beams[j]) * q;
                }
            }
            *h = acc;
        }
    }
    (h_lambda, h_mu)
}

/// Minimise the dual function by diagonally scaled projected gradient.
fn solve_duals(
    data: &StepData,
    start: &DualVars,
    power: f64,
    cfg: &BfConfig,
) -> Result<(DualVars, DualEval, usize, bool)> {
    let mut duals = start.clone();
    if !data.sensing() {
        duals.mu.iter_mut().for_each(|m| *m = 0.0);
    }
    let mut ev = eval_dual(data, &duals, power, cfg)?;
    let mut floored = ev.floored;
    let mut scale = 1.0;
    let mut iters = 0;
    while iters < cfg.max_inner {
        iters += 1;
        let (h_lambda, h_mu) = dual_curvature(data, &ev);
        let cand = DualVars {
            lambda: (duals.lambda - scale * ev.grad.lambda / h_lambda.max(1e-300)).max(0.0),
            mu: duals
                .mu
                .iter()
                .zip(&ev.grad.mu)
                .zip(&h_mu)
                .zip(&data.mu_cap)
                .map(|(((m, g), h), cap)| {
                    if data.sensing() {
                        (m - scale * g / h.max(1e-300)).clamp(0.0, *cap)
                    } else {
                        0.0
                    }
                })
                .collect(),
        };
        let step = cand.distance(&duals);
        if step <= cfg.tol_inner * duals.norm().max(1e-12) {
            break;
        }
        let next = eval_dual(data, &cand, power, cfg)?;
        if next.value > ev.value + 1e-12 * ev.value.abs().max(1e-300) {
            scale *= 0.5;
            if scale < 1e-10 {
                break;
            }
            continue;
        }
        floored |= next.floored;
        duals = cand;
        ev = next;
        scale = (scale * 2.0).min(1.0);
    }
    Ok((duals, ev, iters, floored))
}

fn align_phases(problem: &BfProblem, beams: &mut [CVector]) {
    for (h, v) in problem.channels.iter().zip(beams.iter_mut()) {
        let c = inner(h, v);
        if c.norm() > 0.0 {
            let rot = c.conj() / c.norm();
            v.apply(|x| *x *= rot);
        }
    }
}

fn scale_to_budget(beams: &mut [CVector], power: f64) {
    let p = total_power(beams);
    if p > power {
        let s = (power / p).sqrt();
        beams.iter_mut().for_each(|v| *v *= Complex64::new(s, 0.0));
    }
}

/// Solve the beamforming problem.
pub fn solve(problem: &BfProblem, cfg: &BfConfig) -> Result<BfSolution> {
    problem.validate()?;
    cfg.validate()?;
    let start = Instant::now();
    let active: Vec<usize> = (0..problem.n_users())
        .filter(|&k| problem.channels[k].norm_squared() > 0.0)
        .collect();
    let dropped: Vec<usize> = (0..problem.n_users()).filter(|k| !active.contains(k)).collect();
    for k in &dropped {
        warn!("user slot {k} has a vanishing channel estimate and is dropped from beamforming");
    }
    let n = problem.n_tx();
    if active.is_empty() {
        let k = problem.n_users();
        return Ok(BfSolution {
            beams: vec![CVector::zeros(n); k],
            duals: DualVars::initial(k),
            fp: FpAux {
                xi: vec![0.0; k],
                zeta: vec![0.0; k],
            },
            objective_trace: vec![0.0],
            trace_feasible: vec![problem.sensing.is_none()],
            outer_iterations: 0,
            inner_iterations: 0,
            stop: StopReason::Converged,
            converged: true,
            sensing_feasible: problem.sensing.is_none(),
            regularized: false,
            dropped,
            elapsed_secs: start.elapsed().as_secs_f64(),
        });
    }
    let sub = if dropped.is_empty() {
        problem.clone()
    } else {
        BfProblem {
            channels: active.iter().map(|&k| problem.channels[k].clone()).collect(),
            weights: active.iter().map(|&k| problem.weights[k]).collect(),
            sensing: problem.sensing.as_ref().map(|s| SensingSpec {
                targets: active.iter().map(|&k| s.targets[k]).collect(),
                ..s.clone()
            }),
            ..problem.clone()
        }
    };
    let norm = sub.normalized();
    let k = norm.n_users();
    let share = 1.0 / (k as f64).sqrt();
    let mut beams: Vec<CVector> = norm.channels.iter().map(|h| h.unscale(h.norm()).scale(share)).collect();
    let feasible = |b: &[CVector]| norm.sensing.as_ref().is_none_or(|s| s.satisfied(b, cfg.tol_feas));

    let mut duals = DualVars::initial(k);
    let mut obj = norm.objective(&beams);
    let mut trace = vec![obj];
    let mut trace_feasible = vec![feasible(&beams)];
    let mut fp = FpAux {
        xi: vec![0.0; k],
        zeta: vec![0.0; k],
    };
    let mut stop = StopReason::MaxIterations;
    let mut outer = 0;
    let mut inner_total = 0;
    let mut regularized = false;
    while outer < cfg.max_outer {
        outer += 1;
        align_phases(&norm, &mut beams);
        fp.xi = update_xi(&beams, &norm);
        fp.zeta = update_zeta(&beams, &fp.xi, &norm);
        let data = StepData::new(&norm, &fp, &beams).with_mu_cap(cfg.mu_cap_factor, &norm.weights);
        let (d, ev, iters, floored) = solve_duals(&data, &duals, norm.power, cfg)?;
        inner_total += iters;
        regularized |= floored;
        let mut cand = ev.beams;
        scale_to_budget(&mut cand, norm.power);
        let cand_obj = norm.objective(&cand);
        let tol = cfg.tol_outer * obj.abs().max(1.0);
        if feasible(&beams) && cand_obj < obj - tol * 1e-3 {
            stop = StopReason::NoImprovement;
            break;
        }
        let change = (cand_obj - obj).abs();
        beams = cand;
        duals = d;
        obj = cand_obj;
        trace.push(obj);
        trace_feasible.push(feasible(&beams));
        if change <= tol {
            stop = StopReason::Converged;
            break;
        }
    }
    align_phases(&norm, &mut beams);
    scale_to_budget(&mut beams, norm.power);
    let sensing_feasible = feasible(&beams);

    let amp = Complex64::new(problem.power.sqrt(), 0.0);
    let mut full = vec![CVector::zeros(n); problem.n_users()];
    for (slot, v) in active.iter().zip(beams) {
        full[*slot] = v.map(|x| x * amp);
    }
    let mut mu_full = vec![0.0; problem.n_users()];
    let mut xi_full = vec![0.0; problem.n_users()];
    let mut zeta_full = vec![0.0; problem.n_users()];
    for (i, &slot) in active.iter().enumerate() {
        mu_full[slot] = duals.mu[i];
        xi_full[slot] = fp.xi[i];
        zeta_full[slot] = fp.zeta[i];
    }
    Ok(BfSolution {
        beams: full,
        duals: DualVars {
            lambda: duals.lambda,
            mu: mu_full,
        },
        fp: FpAux {
            xi: xi_full,
            zeta: zeta_full,
        },
        objective_trace: trace,
        trace_feasible,
        outer_iterations: outer,
        inner_iterations: inner_total,
        converged: stop != StopReason::MaxIterations,
        stop,
        sensing_feasible,
        regularized,
        dropped,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// The same solver with the leakage covariance zeroed.
pub fn solve_zero_leakage(problem: &BfProblem, cfg: &BfConfig) -> Result<BfSolution> {
    let n = problem.n_tx();
    solve(
        &BfProblem {
            inter_sum: CMatrix::zeros(n, n),
            ..problem.clone()
        },
        cfg,
    )
}

/// Random problem with Rayleigh intra- and inter-cell channels, increasing
/// PF weights and, optionally, sensing targets spread over the sector.
pub fn random_instance(seed: u64, n_tx: usize, n_users: usize, n_inter: usize, sensing: bool) -> BfProblem {
    let mut rng = crate::rng::stream(seed, &[]);
    let channels: Vec<CVector> = (0..n_users).map(|_| gen_rayleigh(n_tx, &mut rng)).collect();
    let inter: Vec<CVector> = (0..n_inter).map(|_| gen_rayleigh(n_tx, &mut rng).scale(0.5)).collect();
    let sensing = sensing.then(|| SensingSpec {
        targets: (0..n_users)
            .map(|i| SensingTarget {
                theta_hat: -0.8 + 1.6 * i as f64 / n_users.max(2).saturating_sub(1) as f64,
                echo_gain: 0.05,
            })
            .collect(),
        constants: [0.0, 0.1, 0.1],
        sigma_z2: 1.0,
        threshold: 0.05,
    });
    BfProblem {
        channels,
        inter_sum: leakage_sum(&inter, n_tx),
        model: LeakageModel::Average,
        weights: (0..n_users).map(|i| 1.0 + 0.5 * i as f64).collect(),
        power: 10.0,
        noise: 1.0,
        sensing,
    }
}

/// Mean wall-clock time of one per-user beamformer update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateTiming {
    pub n_tx: usize,
    pub n_users: usize,
    pub reps: usize,
    /// Update through the cached shared inverse (s).
    pub woodbury_secs: f64,
    /// Update forming and solving the user's own system (s).
    pub direct_secs: f64,
    /// Largest `||v_woodbury - v_direct|| / ||v_direct||` over the users.
    pub max_rel_diff: f64,
}

/// Time the per-user update of a random instance at a fixed dual point.
/// Each figure is the smallest of five batches of `reps` sweeps over the
/// users, which suppresses scheduler noise.
pub fn time_user_updates(n_tx: usize, n_users: usize, reps: usize, seed: u64, cfg: &BfConfig) -> Result<UpdateTiming> {
    if n_tx == 0 || n_users == 0 || reps == 0 {
        return Err(Error::Config("timing needs n_tx, n_users and reps positive".into()));
    }
    let p = random_instance(seed, n_tx, n_users, 2 * n_users, true).normalized();
    let mut rng = crate::rng::stream(seed, &[1]);
    let v_ref: Vec<CVector> = (0..n_users).map(|_| gen_rayleigh(n_tx, &mut rng).scale(0.3)).collect();
    let xi = update_xi(&v_ref, &p);
    let fp = FpAux {
        zeta: update_zeta(&v_ref, &xi, &p),
        xi,
    };
    let duals = DualVars {
        lambda: 0.7,
        mu: (0..n_users).map(|i| 0.1 * (i % 3) as f64).collect(),
    };
    let shared = prepare_shared(&duals, &fp, &p, &v_ref, cfg)?;
    let mut max_rel_diff: f64 = 0.0;
    for k in 0..n_users {
        let d = direct_user_update(&shared, k, cfg)?;
        max_rel_diff = max_rel_diff.max((shared.update_user(k) - &d).norm() / d.norm());
    }
    let per_update = (reps * n_users) as f64;
    let mut woodbury_secs = f64::INFINITY;
    let mut direct_secs = f64::INFINITY;
    for _ in 0..5 {
        let t = Instant::now();
        for _ in 0..reps {
            for k in 0..n_users {
                std::hint::black_box(shared.update_user(k));
            }
        }
        woodbury_secs = woodbury_secs.min(t.elapsed().as_secs_f64() / per_update);
        let t = Instant::now();
        for _ in 0..reps {
            for k in 0..n_users {
                std::hint::black_box(direct_user_update(&shared, k, cfg)?);
            }
        }
        direct_secs = direct_secs.min(t.elapsed().as_secs_f64() / per_update);
    }
    Ok(UpdateTiming {
        n_tx,
        n_users,
        reps,
        woodbury_secs,
        direct_secs,
        max_rel_diff,
    })
}
