//! Ground-truth channel generation and user mobility.
//!
//! Intra-cell channels carry one LoS path at the user's angle plus
//! `n_paths - 1` NLoS paths; inter-cell channels are NLoS only. All AoDs are
//! measured from the array broadside of the transmitting BS.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::{CVector, ChannelVector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub n_tx: usize,
    pub n_rx: usize,
}

impl ArrayGeometry {
    pub fn new(n_tx: usize, n_rx: usize) -> Result<Self> {
        if n_tx == 0 || n_rx == 0 {
            return Err(Error::Config("antenna counts must be positive".into()));
        }
        Ok(Self { n_tx, n_rx })
    }

    /// Monostatic array gain `sqrt(n_tx * n_rx)`.
    pub fn kappa(&self) -> f64 {
        ((self.n_tx * self.n_rx) as f64).sqrt()
    }
}

/// A base station: its position and the global direction of its array broadside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsSite {
    pub position: (f64, f64),
    /// Broadside direction in radians, measured from the global x axis.
    pub broadside: f64,
}

impl BsSite {
    pub fn new(position: (f64, f64), broadside: f64) -> Self {
        Self { position, broadside }
    }

    /// Global point at distance `d` and array angle `angle`.
    pub fn point_at(&self, d: f64, angle: f64) -> (f64, f64) {
        let g = self.broadside + angle;
        (self.position.0 + d * g.cos(), self.position.1 + d * g.sin())
    }
}

/// Geometry of a user relative to one BS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeGeometry {
    pub distance: f64,
    /// Angle from the array broadside, wrapped to `(-pi, pi]`.
    pub angle: f64,
    /// Range rate (positive when moving away).
    pub radial_speed: f64,
}

impl RelativeGeometry {
    /// Users behind the array are ambiguous for a ULA and rejected.
    pub fn ensure_visible(&self) -> Result<()> {
        if !(self.distance > 0.0) {
            return Err(Error::Domain(format!("non-positive distance {}", self.distance)));
        }
        if self.angle.abs() >= FRAC_PI_2 {
            return Err(Error::Domain(format!(
                "angle {:.4} rad is outside the array's front half-plane",
                self.angle
            )));
        }
        Ok(())
    }
}

/// Ground-truth user state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserKinematics {
    pub position: (f64, f64),
    pub speed: f64,
    pub heading: f64,
}

impl UserKinematics {
    pub fn geometry_to(&self, bs: &BsSite) -> RelativeGeometry {
        let dx = self.position.0 - bs.position.0;
        let dy = self.position.1 - bs.position.1;
        let distance = dx.hypot(dy);
        let global = dy.atan2(dx);
        let angle = wrap_angle(global - bs.broadside);
        let radial_speed = self.speed * (self.heading - global).cos();
        RelativeGeometry {
            distance,
            angle,
            radial_speed,
        }
    }

    /// Geometry to the serving BS, validated for ULA visibility.
    pub fn relative_to(&self, bs: &BsSite) -> Result<RelativeGeometry> {
        let g = self.geometry_to(bs);
        g.ensure_visible()?;
        Ok(g)
    }
}

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = (a + PI).rem_euclid(2.0 * PI) - PI;
    if x <= -PI {
        x += 2.0 * PI;
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    /// Linear power gain.
    pub gain: f64,
    pub phase: f64,
    pub aod: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelGenConfig {
    /// Reference gain at 1 m (linear).
    pub alpha0: f64,
    /// Path-loss exponent.
    pub eta: f64,
    pub n_paths: usize,
    /// Range of the LoS-to-NLoS power ratio.
    pub nlos_ratio_range: (f64, f64),
    /// Std of the inter-cell path phases (radians).
    pub inter_phase_std: f64,
}

impl Default for ChannelGenConfig {
    fn default() -> Self {
        Self {
            alpha0: 1e-6,
            eta: 2.0,
            n_paths: 4,
            nlos_ratio_range: (4.0, 9.0),
            inter_phase_std: PI / 5.0,
        }
    }
}

impl ChannelGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0) || !(self.eta >= 0.0) || self.n_paths == 0 {
            return Err(Error::Config(
                "channel config needs alpha0 > 0, eta >= 0 and n_paths >= 1".into(),
            ));
        }
        let (lo, hi) = self.nlos_ratio_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config("nlos_ratio_range must satisfy 0 < lo <= hi".into()));
        }
        if !(self.inter_phase_std >= 0.0) {
            return Err(Error::Config("inter_phase_std must be nonnegative".into()));
        }
        Ok(())
    }
}

/// ULA steering vector with half-wavelength spacing, unit norm.
pub fn steer(theta: f64, n: usize) -> CVector {
    let s = PI * theta.sin();
    let scale = 1.0 / (n as f64).sqrt();
    CVector::from_fn(n, |m, _| Complex64::from_polar(scale, s * m as f64))
}

/// `alpha0 * d^-eta`.
pub fn path_loss(d: f64, cfg: &ChannelGenConfig) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::Domain(format!("path loss needs d > 0, got {d}")));
    }
    Ok(cfg.alpha0 * d.powf(-cfg.eta))
}

/// `sum_q sqrt(gain_q) e^{j phase_q} a(aod_q)`.
pub fn synthesize(paths: &[PathParams], n_tx: usize) -> ChannelVector {
    let mut h = CVector::zeros(n_tx);
    for p in paths {
        let c = Complex64::from_polar(p.gain.sqrt(), p.phase);
        h.axpy(c, &steer(p.aod, n_tx), Complex64::new(1.0, 0.0));
    }
    h
}

fn nlos_gain<R: Rng + ?Sized>(reference: f64, cfg: &ChannelGenConfig, rng: &mut R) -> f64 {
    let (lo, hi) = cfg.nlos_ratio_range;
    let ratio = if hi > lo { rng.random_range(lo..hi) } else { lo };
    reference / ratio
}

fn uniform_angle<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(-PI..PI)
}

/// Path set of an intra-cell channel: LoS at the user angle, NLoS elsewhere.
pub fn draw_intra_paths<R: Rng + ?Sized>(
    geom: &RelativeGeometry,
    cfg: &ChannelGenConfig,
    rng: &mut R,
) -> Result<Vec<PathParams>> {
    let los = path_loss(geom.distance, cfg)?;
    let mut paths = Vec::with_capacity(cfg.n_paths);
    paths.push(PathParams {
        gain: los,
        phase: uniform_angle(rng),
        aod: geom.angle,
    });
    for _ in 1..cfg.n_paths {
        let gain = nlos_gain(los, cfg, rng);
        paths.push(PathParams {
            gain,
            phase: uniform_angle(rng),
            aod: uniform_angle(rng),
        });
    }
    Ok(paths)
}

pub fn gen_intra_channel<R: Rng + ?Sized>(
    geom: &RelativeGeometry,
    n_tx: usize,
    cfg: &ChannelGenConfig,
    rng: &mut R,
) -> Result<ChannelVector> {
    geom.ensure_visible()?;
    Ok(synthesize(&draw_intra_paths(geom, cfg, rng)?, n_tx))
}

/// Large-scale part of an inter-cell channel: `n_paths` NLoS gains and AoDs.
/// Phases are left at zero; see [`with_inter_phases`].
pub fn draw_inter_large_scale<R: Rng + ?Sized>(
    distance: f64,
    n_paths: usize,
    cfg: &ChannelGenConfig,
    rng: &mut R,
) -> Result<Vec<PathParams>> {
    let reference = path_loss(distance, cfg)?;
    Ok((0..n_paths)
        .map(|_| {
            let gain = nlos_gain(reference, cfg, rng);
            PathParams {
                gain,
                phase: 0.0,
                aod: uniform_angle(rng),
            }
        })
        .collect())
}

/// Draw the small-scale phases `N(0, inter_phase_std^2)` of a path set.
pub fn with_inter_phases<R: Rng + ?Sized>(
    paths: &[PathParams],
    cfg: &ChannelGenConfig,
    rng: &mut R,
) -> Vec<PathParams> {
    paths
        .iter()
        .map(|p| {
            let z: f64 = StandardNormal.sample(rng);
            PathParams {
                phase: cfg.inter_phase_std * z,
                ..*p
            }
        })
        .collect()
}

/// Inter-cell channel with `n_paths` NLoS paths drawn afresh.
pub fn gen_inter_channel<R: Rng + ?Sized>(
    distance: f64,
    n_tx: usize,
    n_paths: usize,
    cfg: &ChannelGenConfig,
    rng: &mut R,
) -> Result<ChannelVector> {
    let large = draw_inter_large_scale(distance, n_paths, cfg, rng)?;
    Ok(synthesize(&with_inter_phases(&large, cfg, rng), n_tx))
}

/// Circularly-symmetric complex Gaussian with variance `var`.
pub fn complex_normal<R: Rng + ?Sized>(var: f64, rng: &mut R) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// i.i.d. `CN(0, 1)` entries.
pub fn gen_rayleigh<R: Rng + ?Sized>(n: usize, rng: &mut R) -> ChannelVector {
    CVector::from_fn(n, |_, _| complex_normal(1.0, rng))
}

/// Constant-velocity motion; speed and heading are preserved.
pub fn advance(kin: &UserKinematics, dt: f64) -> UserKinematics {
    let step = kin.speed * dt;
    UserKinematics {
        position: (
            kin.position.0 + step * kin.heading.cos(),
            kin.position.1 + step * kin.heading.sin(),
        ),
        ..*kin
    }
}

/// Real Gaussian helper used by the sensing model.
pub(crate) fn real_normal<R: Rng + ?Sized>(std: f64, rng: &mut R) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).map(|n| n.sample(rng)).unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gain;
    use crate::rng::stream;

    fn close(a: Complex64, b: Complex64) -> bool {
        (a - b).norm() < 1e-12
    }

    #[test]
    fn steer_broadside_is_uniform() {
        let a = steer(0.0, 4);
        for m in 0..4 {
            assert!(close(a[m], Complex64::new(0.5, 0.0)));
        }
    }

    #[test]
    fn steer_endfire_two_elements_alternates() {
        let a = steer(FRAC_PI_2, 2);
        let s = 1.0 / 2f64.sqrt();
        assert!(close(a[0], Complex64::new(s, 0.0)));
        assert!(close(a[1], Complex64::new(-s, 0.0)));
    }

    #[test]
    fn path_loss_values() {
        let cfg = ChannelGenConfig::default();
        assert!((path_loss(1.0, &cfg).unwrap() - 1e-6).abs() < 1e-20);
        assert!((path_loss(10.0, &cfg).unwrap() - 1e-8).abs() < 1e-22);
        let flat = ChannelGenConfig { eta: 0.0, ..cfg };
        assert_eq!(path_loss(123.0, &flat).unwrap(), 1e-6);
        assert!(path_loss(0.0, &cfg).is_err());
        assert!(path_loss(-1.0, &cfg).is_err());
    }

    fn geom(d: f64, angle: f64) -> RelativeGeometry {
        RelativeGeometry {
            distance: d,
            angle,
            radial_speed: 0.0,
        }
    }

    #[test]
    fn single_path_channel_is_scaled_steering_vector() {
        let cfg = ChannelGenConfig {
            n_paths: 1,
            ..Default::default()
        };
        let mut rng = stream(1, &[]);
        let g = geom(50.0, 0.3);
        let h = gen_intra_channel(&g, 16, &cfg, &mut rng).unwrap();
        let los = path_loss(50.0, &cfg).unwrap();
        let a = steer(0.3, 16);
        assert!((gain(&a, &h) - los).abs() < 1e-12 * los);
        assert!((gain(&a, &h) / h.norm_squared() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nlos_powers_respect_ratio_range() {
        let cfg = ChannelGenConfig::default();
        let mut rng = stream(2, &[]);
        for _ in 0..200 {
            let paths = draw_intra_paths(&geom(40.0, 0.1), &cfg, &mut rng).unwrap();
            let los = paths[0].gain;
            assert_eq!(paths.len(), 4);
            for p in &paths[1..] {
                assert!(p.gain >= los / 9.0 - 1e-24 && p.gain <= los / 4.0 + 1e-24);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_for_a_seed() {
        let cfg = ChannelGenConfig::default();
        let h1 = gen_intra_channel(&geom(30.0, -0.2), 8, &cfg, &mut stream(9, &[1])).unwrap();
        let h2 = gen_intra_channel(&geom(30.0, -0.2), 8, &cfg, &mut stream(9, &[1])).unwrap();
        assert_eq!(h1, h2);
        let i1 = gen_inter_channel(150.0, 8, 4, &cfg, &mut stream(9, &[2])).unwrap();
        let i2 = gen_inter_channel(150.0, 8, 4, &cfg, &mut stream(9, &[2])).unwrap();
        assert_eq!(i1, i2);
    }

    #[test]
    fn inter_channel_without_paths_is_zero() {
        let cfg = ChannelGenConfig::default();
        let h = gen_inter_channel(150.0, 8, 0, &cfg, &mut stream(3, &[])).unwrap();
        assert_eq!(h.norm_squared(), 0.0);
    }

    #[test]
    fn scalar_rayleigh() {
        let h = gen_rayleigh(1, &mut stream(4, &[]));
        assert_eq!(h.len(), 1);
    }

    #[test]
    fn users_behind_the_array_are_rejected() {
        let bs = BsSite::new((0.0, 0.0), 0.0);
        let front = UserKinematics {
            position: (10.0, 5.0),
            speed: 0.0,
            heading: 0.0,
        };
        assert!(front.relative_to(&bs).is_ok());
        let behind = UserKinematics {
            position: (-10.0, 1.0),
            ..front
        };
        assert!(behind.relative_to(&bs).is_err());
        let on_site = UserKinematics {
            position: (0.0, 0.0),
            ..front
        };
        assert!(on_site.relative_to(&bs).is_err());
    }

    #[test]
    fn advance_displacement() {
        let k = UserKinematics {
            position: (1.0, 2.0),
            speed: 20.0,
            heading: 0.7,
        };
        let k1 = advance(&k, 0.02);
        let disp = (k1.position.0 - 1.0).hypot(k1.position.1 - 2.0);
        assert!((disp - 0.4).abs() < 1e-12);
        assert_eq!(k1.speed, k.speed);
        assert_eq!(k1.heading, k.heading);
        let still = UserKinematics { speed: 0.0, ..k };
        assert_eq!(advance(&still, 5.0), still);
        let half = advance(&advance(&k, 0.01), 0.01);
        assert!((half.position.0 - k1.position.0).abs() < 1e-12);
        assert!((half.position.1 - k1.position.1).abs() < 1e-12);
    }

    #[test]
    fn radial_speed_sign() {
        let bs = BsSite::new((0.0, 0.0), 0.0);
        let away = UserKinematics {
            position: (10.0, 0.0),
            speed: 5.0,
            heading: 0.0,
        };
        assert!((away.geometry_to(&bs).radial_speed - 5.0).abs() < 1e-12);
        let tangential = UserKinematics {
            heading: FRAC_PI_2,
            ..away
        };
        assert!(tangential.geometry_to(&bs).radial_speed.abs() < 1e-12);
    }
}
