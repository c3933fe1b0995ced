//! Parameter-level echo sensing.
//!
//! Kinematics map to radar parameters (delay, Doppler, reflection
//! coefficient). The estimation error of each parameter is zero-mean
//! Gaussian with variance inversely proportional to the echo SINR produced
//! by the previous epoch's beamformers.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{real_normal, steer, wrap_angle, BsSite, RelativeGeometry};
use crate::linalg::{gain, CVector};
use crate::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 2.998e8;

/// Smallest range an estimate is allowed to report (m).
pub const MIN_RANGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensingConfig {
    pub a_tau: f64,
    pub a_mu: f64,
    pub a_theta: f64,
    /// Matched-filter gain `G`.
    pub gain: f64,
    /// Array gain `sqrt(N_t N_r)`.
    pub kappa: f64,
    /// Echo noise power.
    pub sigma_z2: f64,
    /// Magnitude of the reflectivity constant.
    pub eta_rcs: f64,
    pub carrier_hz: f64,
    pub light_speed: f64,
}

impl Default for SensingConfig {
    fn default() -> Self {
        Self {
            a_tau: 6.7e-7,
            a_mu: 0.1,
            a_theta: 0.1,
            gain: 10.0,
            kappa: (8.0f64 * 16.0).sqrt(),
            sigma_z2: 1e-5,
            eta_rcs: 1.0,
            carrier_hz: 30e9,
            light_speed: SPEED_OF_LIGHT,
        }
    }
}

impl SensingConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.a_tau, self.a_mu, self.a_theta];
        let pos = [
            self.gain,
            self.kappa,
            self.sigma_z2,
            self.eta_rcs,
            self.carrier_hz,
            self.light_speed,
        ];
        if nonneg.iter().any(|x| !(*x >= 0.0)) || pos.iter().any(|x| !(*x > 0.0)) {
            return Err(Error::Config(
                "sensing constants must be positive (estimator constants may be zero)".into(),
            ));
        }
        Ok(())
    }

    pub fn constant(&self, p: SensingParam) -> f64 {
        match p {
            SensingParam::Tau => self.a_tau,
            SensingParam::Mu => self.a_mu,
            SensingParam::Theta => self.a_theta,
        }
    }

    /// The parameter with the largest estimator constant; it is the one whose
    /// variance constraint binds.
    pub fn binding_param(&self) -> SensingParam {
        let mut best = SensingParam::Theta;
        for p in [SensingParam::Tau, SensingParam::Mu] {
            if self.constant(p) > self.constant(best) {
                best = p;
            }
        }
        best
    }

    /// `G kappa^2`.
    pub fn echo_scale(&self) -> f64 {
        self.gain * self.kappa * self.kappa
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SensingParam {
    Tau,
    Mu,
    Theta,
}

impl SensingParam {
    pub const ALL: [SensingParam; 3] = [SensingParam::Tau, SensingParam::Mu, SensingParam::Theta];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarParams {
    /// Round-trip delay (s).
    pub tau: f64,
    /// Doppler shift (Hz).
    pub mu: f64,
    pub beta: Complex64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicEstimate {
    pub theta_hat: f64,
    pub d_hat: f64,
    pub v_hat: f64,
    pub var_tau: f64,
    pub var_mu: f64,
    pub var_theta: f64,
}

pub fn kin_to_radar(d: f64, v_radial: f64, cfg: &SensingConfig) -> Result<RadarParams> {
    if !(d > 0.0) {
        return Err(Error::Domain(format!("range must be positive, got {d}")));
    }
    let tau = 2.0 * d / cfg.light_speed;
    Ok(RadarParams {
        tau,
        mu: 2.0 * v_radial * cfg.carrier_hz / cfg.light_speed,
        beta: Complex64::new(cfg.eta_rcs / (tau * cfg.light_speed), 0.0),
    })
}

/// Echo signal and interference-plus-noise for user `k` (index into `beams`).
fn echo_terms(k: usize, beams: &[CVector], theta: f64, beta_abs2: f64, cfg: &SensingConfig) -> (f64, f64) {
    let n = beams[k].len();
    let a = steer(theta, n);
    let scale = cfg.echo_scale() * beta_abs2;
    let signal = scale * gain(&a, &beams[k]);
    let interference: f64 = beams
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != k)
        .map(|(_, v)| scale * gain(&a, v))
        .sum();
    (signal, interference + cfg.sigma_z2)
}

/// Estimation error variance of `param` for the user served by `beams[k]`.
///
/// Returns `f64::INFINITY` when the own beam puts no power on the user.
pub fn error_variance(
    param: SensingParam,
    k: usize,
    beams: &[CVector],
    theta: f64,
    beta: Complex64,
    cfg: &SensingConfig,
) -> Result<f64> {
    if k >= beams.len() {
        return Err(Error::NotScheduled(k));
    }
    let (signal, denom) = echo_terms(k, beams, theta, beta.norm_sqr(), cfg);
    let a = cfg.constant(param);
    if signal <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(a * a * denom / signal)
}

/// Draw a noisy kinematic estimate for the user served by `beams[k]`.
pub fn sense<R: Rng + ?Sized>(
    truth: &RelativeGeometry,
    k: usize,
    beams: &[CVector],
    cfg: &SensingConfig,
    rng: &mut R,
) -> Result<KinematicEstimate> {
    if k >= beams.len() {
        return Err(Error::NotScheduled(k));
    }
    let radar = kin_to_radar(truth.distance, truth.radial_speed, cfg)?;
    let (signal, denom) = echo_terms(k, beams, truth.angle, radar.beta.norm_sqr(), cfg);
    if signal <= 0.0 {
        return Err(Error::EchoLost(k));
    }
    let base = denom / signal;
    let var = |p: SensingParam| cfg.constant(p).powi(2) * base;
    let (var_tau, var_mu, var_theta) = (
        var(SensingParam::Tau),
        var(SensingParam::Mu),
        var(SensingParam::Theta),
    );
    let theta_hat = truth.angle + real_normal(var_theta.sqrt(), rng);
    let tau_hat = radar.tau + real_normal(var_tau.sqrt(), rng);
    let mu_hat = radar.mu + real_normal(var_mu.sqrt(), rng);
    Ok(KinematicEstimate {
        theta_hat,
        d_hat: (tau_hat * cfg.light_speed / 2.0).max(MIN_RANGE),
        v_hat: mu_hat * cfg.light_speed / (2.0 * cfg.carrier_hz),
        var_tau,
        var_mu,
        var_theta,
    })
}

/// Global position of an estimate, inverse of [`crate::channel::UserKinematics::geometry_to`].
pub fn locate(bs: &BsSite, est: &KinematicEstimate) -> (f64, f64) {
    bs.point_at(est.d_hat, wrap_angle(est.theta_hat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::UserKinematics;
    use crate::rng::stream;

    #[test]
    fn radar_mapping() {
        let cfg = SensingConfig::default();
        let r = kin_to_radar(150.0, 0.0, &cfg).unwrap();
        assert!((r.tau - 1.0007e-6).abs() < 1e-10);
        assert_eq!(r.mu, 0.0);
        assert!((r.beta.re * r.tau * cfg.light_speed - cfg.eta_rcs).abs() < 1e-12);
        assert!(kin_to_radar(0.0, 1.0, &cfg).is_err());
    }

    #[test]
    fn single_beam_variance_matches_closed_form() {
        let cfg = SensingConfig::default();
        let v = steer(0.2, 8).scale(2.0);
        let beta = Complex64::new(1.0 / 80.0, 0.0);
        let got = error_variance(SensingParam::Theta, 0, &[v.clone()], 0.2, beta, &cfg).unwrap();
        let expect = 0.01 * cfg.sigma_z2 / (cfg.echo_scale() * beta.norm_sqr() * 4.0);
        assert!((got / expect - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_own_beam_loses_echo() {
        let cfg = SensingConfig::default();
        let v = CVector::zeros(8);
        let var = error_variance(SensingParam::Tau, 0, &[v.clone()], 0.0, Complex64::new(0.01, 0.0), &cfg).unwrap();
        assert!(var.is_infinite());
        let truth = RelativeGeometry {
            distance: 50.0,
            angle: 0.0,
            radial_speed: 0.0,
        };
        assert!(matches!(sense(&truth, 0, &[v], &cfg, &mut stream(0, &[])), Err(Error::EchoLost(0))));
    }

    #[test]
    fn zero_constants_give_exact_estimates() {
        let cfg = SensingConfig {
            a_tau: 0.0,
            a_mu: 0.0,
            a_theta: 0.0,
            ..Default::default()
        };
        let bs = BsSite::new((10.0, -4.0), 0.6);
        let user = UserKinematics {
            position: (60.0, 30.0),
            speed: 20.0,
            heading: 1.3,
        };
        let g = user.relative_to(&bs).unwrap();
        let est = sense(&g, 0, &[steer(g.angle, 8)], &cfg, &mut stream(1, &[])).unwrap();
        assert_eq!(est.theta_hat, g.angle);
        assert!((est.d_hat - g.distance).abs() < 1e-9);
        assert!((est.v_hat - g.radial_speed).abs() < 1e-9);
        let (x, y) = locate(&bs, &est);
        assert!((x - 60.0).abs() < 1e-9 && (y - 30.0).abs() < 1e-9);
    }

    #[test]
    fn unscheduled_user_is_rejected() {
        let cfg = SensingConfig::default();
        let g = RelativeGeometry {
            distance: 10.0,
            angle: 0.0,
            radial_speed: 0.0,
        };
        assert!(matches!(sense(&g, 2, &[steer(0.0, 4)], &cfg, &mut stream(0, &[])), Err(Error::NotScheduled(2))));
    }

    #[test]
    fn small_angle_error_is_arc_length() {
        let bs = BsSite::new((0.0, 0.0), 0.0);
        let mk = |t: f64| KinematicEstimate {
            theta_hat: t,
            d_hat: 100.0,
            v_hat: 0.0,
            var_tau: 0.0,
            var_mu: 0.0,
            var_theta: 0.0,
        };
        let (x0, y0) = locate(&bs, &mk(0.3));
        let (x1, y1) = locate(&bs, &mk(0.31));
        assert!(((x1 - x0).hypot(y1 - y0) - 1.0).abs() < 1e-3);
        let (x2, y2) = locate(&bs, &KinematicEstimate { d_hat: 200.0, ..mk(0.3) });
        assert!((x2 - 2.0 * x0).abs() < 1e-9 && (y2 - 2.0 * y0).abs() < 1e-9);
    }

    #[test]
    fn binding_param_is_largest_constant() {
        let cfg = SensingConfig {
            a_mu: 0.3,
            ..Default::default()
        };
        assert_eq!(cfg.binding_param(), SensingParam::Mu);
    }
}
