//! Channel knowledge maps.
//!
//! A BS divides its coverage area into square cells. For each cell it
//! averages beam RSRP over several measurement epochs, recovers a sparse
//! nonnegative angular power spectrum (APS) on a fixed angular grid, and
//! stores the phase-free channel reconstructed from that APS. Queries return
//! the stored channel of the nearest cell.

use std::f64::consts::PI;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{real_normal, steer, BsSite};
use crate::linalg::{CMatrix, CVector, ChannelVector};
use crate::rng::{stream, tag, SimRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularGrid {
    pub theta_min: f64,
    pub theta_max: f64,
    pub n_bins: usize,
}

impl Default for AngularGrid {
    fn default() -> Self {
        Self {
            theta_min: -PI / 3.0,
            theta_max: PI / 3.0,
            n_bins: 128,
        }
    }
}

impl AngularGrid {
    pub fn new(theta_min: f64, theta_max: f64, n_bins: usize) -> Result<Self> {
        let g = Self {
            theta_min,
            theta_max,
            n_bins,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta_min < self.theta_max) || self.n_bins == 0 {
            return Err(Error::Config("angular grid needs theta_min < theta_max and n_bins >= 1".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.theta_max - self.theta_min) / self.n_bins as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.theta_min + (i as f64 + 0.5) * self.width()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_bins).map(|i| self.center(i)).collect()
    }

    /// Bin whose center is nearest to `theta` (clamped to the grid).
    pub fn nearest(&self, theta: f64) -> usize {
        let i = ((theta - self.theta_min) / self.width()).floor();
        i.clamp(0.0, (self.n_bins - 1) as f64) as usize
    }

    /// `N_t x N_theta` matrix of steering vectors at the bin centers.
    pub fn steering_matrix(&self, n_tx: usize) -> CMatrix {
        let cols: Vec<CVector> = self.centers().iter().map(|&t| steer(t, n_tx)).collect();
        CMatrix::from_fn(n_tx, self.n_bins, |r, c| cols[c][r])
    }
}

/// Measurement precoders, one unit-norm column per beam.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub w: CMatrix,
}

impl Codebook {
    pub fn n_tx(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_beams(&self) -> usize {
        self.w.ncols()
    }
}

/// DFT codebook: column `b` has entries `exp(j 2 pi m b / n_beams) / sqrt(n_tx)`.
pub fn dft_codebook(n_tx: usize, n_beams: usize) -> Result<Codebook> {
    if n_tx == 0 || n_beams < n_tx {
        return Err(Error::Config(format!(
            "DFT codebook needs 1 <= n_tx <= n_beams, got n_tx={n_tx}, n_beams={n_beams}"
        )));
    }
    let s = 1.0 / (n_tx as f64).sqrt();
    let w = CMatrix::from_fn(n_tx, n_beams, |m, b| {
        Complex64::from_polar(s, 2.0 * PI * (m * b) as f64 / n_beams as f64)
    });
    Ok(Codebook { w })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApsVector {
    pub values: Vec<f64>,
}

impl ApsVector {
    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    pub fn support(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

fn check_dim(h: &ChannelVector, cb: &Codebook) -> Result<()> {
    if h.len() != cb.n_tx() {
        return Err(Error::Dimension {
            expected: cb.n_tx(),
            got: h.len(),
        });
    }
    Ok(())
}

/// Noiseless RSRP per beam: `p_t |w_b^H h|^2 / sqrt(N_t)`.
pub fn rsrp_noiseless(h: &ChannelVector, cb: &Codebook, p_t: f64) -> Result<Vec<f64>> {
    check_dim(h, cb)?;
    let scale = p_t / (cb.n_tx() as f64).sqrt();
    let y = cb.w.adjoint() * h;
    Ok(y.iter().map(|c| scale * c.norm_sqr()).collect())
}

/// One noisy RSRP measurement; additive Gaussian noise with variance
/// `noise_var`, clipped at zero.
pub fn measure_rsrp<R: Rng + ?Sized>(
    h: &ChannelVector,
    cb: &Codebook,
    p_t: f64,
    noise_var: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let std = noise_var.max(0.0).sqrt();
    Ok(rsrp_noiseless(h, cb, p_t)?
        .into_iter()
        .map(|r| (r + real_normal(std, rng)).max(0.0))
        .collect())
}

/// RSRP model matrix `M[b, i] = p_t |w_b^H a(theta_i)|^2 / sqrt(N_t)`, size `N_b x N_theta`.
pub fn rsrp_matrix(grid: &AngularGrid, cb: &Codebook, p_t: f64) -> DMatrix<f64> {
    let g = cb.w.adjoint() * grid.steering_matrix(cb.n_tx());
    let scale = p_t / (cb.n_tx() as f64).sqrt();
    g.map(|c| scale * c.norm_sqr())
}

/// Lawson-Hanson nonnegative least squares `min ||A x - b||, x >= 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let scale = a.norm().max(1e-300) * b.norm().max(1e-300);
    let tol = 1e-12 * scale;
    let ls = |cols: &[usize]| -> DVector<f64> {
        let sub = DMatrix::from_fn(a.nrows(), cols.len(), |r, c| a[(r, cols[c])]);
        let sol = sub.clone().svd(true, true).solve(b, 1e-14).unwrap_or_else(|_| DVector::zeros(cols.len()));
        sol
    };
    for _ in 0..3 * n.max(1) {
        let w = a.transpose() * (b - a * &x);
        let cand = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = cand else { break };
        passive[j] = true;
        loop {
            let cols: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let z = ls(&cols);
            if z.iter().all(|v| *v > 0.0) {
                x.fill(0.0);
                for (c, &i) in cols.iter().enumerate() {
                    x[i] = z[c];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (c, &i) in cols.iter().enumerate() {
                if z[c] <= 0.0 {
                    let denom = x[i] - z[c];
                    if denom > 0.0 {
                        alpha = alpha.min(x[i] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for (c, &i) in cols.iter().enumerate() {
                x[i] += alpha * (z[c] - x[i]);
                if x[i] <= 1e-15 * z.amax().max(1e-300) {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if !passive.iter().any(|p| *p) {
                break;
            }
        }
    }
    x
}

/// Greedy nonnegative orthogonal least squares.
///
/// Each step orthogonalises the remaining columns against the current
/// support and adds the one whose component removes the most residual
/// energy, among columns positively correlated with the residual. The
/// support is then refit by nonnegative least squares and atoms driven to
/// zero are pruned. Returns the coefficients and the residual norm after
/// each step.
pub fn nonneg_ols(m: &DMatrix<f64>, r: &DVector<f64>, max_atoms: usize) -> (DVector<f64>, Vec<f64>) {
    let n = m.ncols();
    let mut coef = DVector::zeros(n);
    let mut support: Vec<usize> = Vec::new();
    let mut residual_vec = r.clone();
    let mut residual = r.norm();
    let mut history = vec![residual];
    if residual == 0.0 {
        return (coef, history);
    }
    let col_norms: Vec<f64> = (0..n).map(|j| m.column(j).norm()).collect();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for _ in 0..max_atoms {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if support.contains(&j) || col_norms[j] == 0.0 || m.column(j).dot(&residual_vec) <= 0.0 {
                continue;
            }
            let mut q = m.column(j).into_owned();
            for b in &basis {
                let c = b.dot(&q);
                q.axpy(-c, b, 1.0);
            }
            let qn = q.norm();
            if qn <= 1e-10 * col_norms[j] {
                continue;
            }
            let gain = (q.dot(&residual_vec) / qn).powi(2);
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((j, gain));
            }
        }
        let Some((j, _)) = best else { break };
        let mut trial = support.clone();
        trial.push(j);
        let sub = DMatrix::from_fn(m.nrows(), trial.len(), |row, c| m[(row, trial[c])]);
        let x = nnls(&sub, r);
        let res_vec = r - &sub * &x;
        let res = res_vec.norm();
        if res >= residual * (1.0 - 1e-12) {
            break;
        }
        support = trial.iter().copied().zip(x.iter().copied()).filter(|(_, v)| *v > 0.0).map(|(i, _)| i).collect();
        coef.fill(0.0);
        for (i, v) in trial.iter().zip(x.iter()) {
            if *v > 0.0 {
                coef[*i] = *v;
            }
        }
        basis.clear();
        for &i in &support {
            let mut q = m.column(i).into_owned();
            for b in &basis {
                let c = b.dot(&q);
                q.axpy(-c, b, 1.0);
            }
            let qn = q.norm();
            if qn > 0.0 {
                basis.push(q.unscale(qn));
            }
        }
        residual_vec = res_vec;
        residual = res;
        history.push(residual);
    }
    (coef, history)
}

/// Recover a nonnegative APS with at most `n_p` nonzero bins from averaged RSRP.
pub fn recover_aps(r_bar: &[f64], grid: &AngularGrid, cb: &Codebook, n_p: usize, p_t: f64) -> Result<ApsVector> {
    if r_bar.len() != cb.n_beams() {
        return Err(Error::Dimension {
            expected: cb.n_beams(),
            got: r_bar.len(),
        });
    }
    let m = rsrp_matrix(grid, cb, p_t);
    recover_with_matrix(r_bar, &m, n_p)
}

fn recover_with_matrix(r_bar: &[f64], m: &DMatrix<f64>, n_p: usize) -> Result<ApsVector> {
    let r = DVector::from_column_slice(r_bar);
    if r.iter().all(|v| *v == 0.0) {
        return Ok(ApsVector::zeros(m.ncols()));
    }
    let (greedy, _) = nonneg_ols(m, &r, n_p);
    let full = prune_refit(m, &r, &nnls(m, &r), n_p);
    let residual = |x: &DVector<f64>| (&r - m * x).norm();
    let mut coef = if residual(&full) < residual(&greedy) { full } else { greedy };
    // Round-off leaves dust atoms many orders below the true paths.
    let floor = 1e-10 * coef.max();
    coef.apply(|v| {
        if *v < floor {
            *v = 0.0
        }
    });
    Ok(ApsVector {
        values: coef.iter().copied().collect(),
    })
}

/// Keep the `n_p` largest entries of `x` and refit them by nonnegative least squares.
fn prune_refit(m: &DMatrix<f64>, r: &DVector<f64>, x: &DVector<f64>, n_p: usize) -> DVector<f64> {
    let mut idx: Vec<usize> = (0..x.len()).filter(|&i| x[i] > 0.0).collect();
    if idx.len() <= n_p {
        return x.clone();
    }
    idx.sort_by(|&a, &b| x[b].total_cmp(&x[a]));
    idx.truncate(n_p);
    let sub = DMatrix::from_fn(m.nrows(), idx.len(), |row, c| m[(row, idx[c])]);
    let z = nnls(&sub, r);
    let mut out = DVector::zeros(x.len());
    for (c, &i) in idx.iter().enumerate() {
        out[i] = z[c];
    }
    out
}

/// Phase-free channel `sum_i sqrt(alpha_i) a(theta_i)`.
pub fn reconstruct(aps: &ApsVector, grid: &AngularGrid, n_tx: usize) -> ChannelVector {
    let mut h = CVector::zeros(n_tx);
    for (i, &a) in aps.values.iter().enumerate() {
        if a > 0.0 {
            h += steer(grid.center(i), n_tx).scale(a.sqrt());
        }
    }
    h
}

/// Axis-aligned grid of square cells; `origin` is the lower-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    pub origin: (f64, f64),
    pub cell_size: f64,
    pub nx: usize,
    pub ny: usize,
}

impl SpatialGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) || self.nx == 0 || self.ny == 0 {
            return Err(Error::Config("spatial grid needs cell_size > 0 and nonzero extents".into()));
        }
        Ok(())
    }

    /// Smallest grid of `cell_size` cells covering the rectangle `[min, max]`.
    pub fn covering(min: (f64, f64), max: (f64, f64), cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0) || !(max.0 >= min.0) || !(max.1 >= min.1) {
            return Err(Error::Config("invalid coverage rectangle".into()));
        }
        let nx = (((max.0 - min.0) / cell_size).ceil() as usize).max(1);
        let ny = (((max.1 - min.1) / cell_size).ceil() as usize).max(1);
        Ok(Self {
            origin: min,
            cell_size,
            nx,
            ny,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn center(&self, idx: usize) -> (f64, f64) {
        let (ix, iy) = (idx % self.nx, idx / self.nx);
        (
            self.origin.0 + (ix as f64 + 0.5) * self.cell_size,
            self.origin.1 + (iy as f64 + 0.5) * self.cell_size,
        )
    }

    /// Index of the cell containing `xy`.
    pub fn locate(&self, xy: (f64, f64)) -> Result<usize> {
        let fx = (xy.0 - self.origin.0) / self.cell_size;
        let fy = (xy.1 - self.origin.1) / self.cell_size;
        let inside = |f: f64, n: usize| f.is_finite() && f >= 0.0 && f <= n as f64;
        if !inside(fx, self.nx) || !inside(fy, self.ny) {
            return Err(Error::OutOfCoverage { x: xy.0, y: xy.1 });
        }
        let ix = (fx.floor() as usize).min(self.nx - 1);
        let iy = (fy.floor() as usize).min(self.ny - 1);
        Ok(iy * self.nx + ix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CkmBuildConfig {
    pub angular: AngularGrid,
    pub n_beams: usize,
    /// Measurement epochs averaged per cell.
    pub n_measurements: usize,
    /// Reference-signal transmit power (W).
    pub p_t: f64,
    /// Variance of the additive RSRP noise.
    pub noise_var: f64,
    /// Maximum number of recovered paths.
    pub n_paths: usize,
}

impl Default for CkmBuildConfig {
    fn default() -> Self {
        Self {
            angular: AngularGrid::default(),
            n_beams: 64,
            n_measurements: 20,
            p_t: 3.981,
            noise_var: 0.0,
            n_paths: 4,
        }
    }
}

impl CkmBuildConfig {
    pub fn validate(&self, n_tx: usize) -> Result<()> {
        self.angular.validate()?;
        if self.n_beams < n_tx || self.n_measurements == 0 || self.n_paths == 0 {
            return Err(Error::Config(
                "ckm build needs n_beams >= n_tx, n_measurements >= 1 and n_paths >= 1".into(),
            ));
        }
        if !(self.p_t > 0.0) || !(self.noise_var >= 0.0) {
            return Err(Error::Config("ckm build needs p_t > 0 and noise_var >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ckm {
    pub bs: BsSite,
    pub grid: SpatialGrid,
    pub angular: AngularGrid,
    pub n_tx: usize,
    pub aps: Vec<ApsVector>,
    pub channels: Vec<ChannelVector>,
}

/// Recovery quality summary of a build.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub cells: usize,
    /// Mean and max of `||r_bar - M alpha|| / ||r_bar||` over cells with nonzero RSRP.
    pub mean_rel_residual: f64,
    pub max_rel_residual: f64,
}

/// Build a CKM. `channel_oracle(xy, rng)` draws one measurement-epoch channel
/// from the BS to a user at `xy`; each cell gets its own random stream
/// derived from `(seed, bs_id, cell)`.
pub fn build<F>(
    bs: BsSite,
    bs_id: u64,
    grid: SpatialGrid,
    n_tx: usize,
    channel_oracle: F,
    cfg: &CkmBuildConfig,
    seed: u64,
) -> Result<(Ckm, BuildReport)>
where
    F: Fn((f64, f64), &mut SimRng) -> Result<ChannelVector> + Sync,
{
    grid.validate()?;
    cfg.validate(n_tx)?;
    let cb = dft_codebook(n_tx, cfg.n_beams)?;
    let m = rsrp_matrix(&cfg.angular, &cb, cfg.p_t);
    let cells: Vec<(ApsVector, ChannelVector, Option<f64>)> = (0..grid.n_cells())
        .into_par_iter()
        .map(|idx| {
            let mut rng = stream(seed, &[tag::CKM, bs_id, idx as u64]);
            let xy = grid.center(idx);
            let mut r_bar = vec![0.0; cfg.n_beams];
            for _ in 0..cfg.n_measurements {
                let h = channel_oracle(xy, &mut rng)?;
                let r = measure_rsrp(&h, &cb, cfg.p_t, cfg.noise_var, &mut rng)?;
                for (acc, v) in r_bar.iter_mut().zip(r) {
                    *acc += v / cfg.n_measurements as f64;
                }
            }
            let aps = recover_with_matrix(&r_bar, &m, cfg.n_paths)?;
            let rb = DVector::from_column_slice(&r_bar);
            let rel = (rb.norm() > 0.0).then(|| {
                let a = DVector::from_column_slice(&aps.values);
                (&rb - &m * a).norm() / rb.norm()
            });
            let h = reconstruct(&aps, &cfg.angular, n_tx);
            Ok((aps, h, rel))
        })
        .collect::<Result<_>>()?;
    let rels: Vec<f64> = cells.iter().filter_map(|c| c.2).collect();
    let report = BuildReport {
        cells: cells.len(),
        mean_rel_residual: if rels.is_empty() {
            0.0
        } else {
            rels.iter().sum::<f64>() / rels.len() as f64
        },
        max_rel_residual: rels.iter().cloned().fold(0.0, f64::max),
    };
    let (aps, channels) = cells.into_iter().map(|(a, h, _)| (a, h)).unzip();
    Ok((
        Ckm {
            bs,
            grid,
            angular: cfg.angular,
            n_tx,
            aps,
            channels,
        },
        report,
    ))
}

const MAGIC: &[u8; 4] = b"SDCK";
const VERSION: u8 = 1;

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("count does not fit in usize".into()))
    }
}

impl Ckm {
    /// Stored channel of the cell containing `xy`.
    pub fn query(&self, xy: (f64, f64)) -> Result<&ChannelVector> {
        Ok(&self.channels[self.grid.locate(xy)?])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let mut f = |x: f64| out.extend_from_slice(&x.to_le_bytes());
        f(self.bs.position.0);
        f(self.bs.position.1);
        f(self.bs.broadside);
        f(self.grid.origin.0);
        f(self.grid.origin.1);
        f(self.grid.cell_size);
        f(self.angular.theta_min);
        f(self.angular.theta_max);
        for n in [self.grid.nx, self.grid.ny, self.angular.n_bins, self.n_tx, self.aps.len()] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        for (aps, h) in self.aps.iter().zip(&self.channels) {
            for v in &aps.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for c in h.iter() {
                out.extend_from_slice(&c.re.to_le_bytes());
                out.extend_from_slice(&c.im.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic header".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
        }
        let bs = BsSite::new((r.f64()?, r.f64()?), r.f64()?);
        let origin = (r.f64()?, r.f64()?);
        let cell_size = r.f64()?;
        let (theta_min, theta_max) = (r.f64()?, r.f64()?);
        let nx = r.usize()?;
        let ny = r.usize()?;
        let n_bins = r.usize()?;
        let n_tx = r.usize()?;
        let n_cells = r.usize()?;
        let grid = SpatialGrid {
            origin,
            cell_size,
            nx,
            ny,
        };
        grid.validate().map_err(|e| Error::Format(e.to_string()))?;
        let angular = AngularGrid::new(theta_min, theta_max, n_bins).map_err(|e| Error::Format(e.to_string()))?;
        if n_cells != grid.n_cells() || n_tx == 0 {
            return Err(Error::Format(format!(
                "cell count {n_cells} does not match grid {nx}x{ny}"
            )));
        }
        let per_cell = 8 * (n_bins + 2 * n_tx);
        if r.buf.len() != per_cell * n_cells {
            return Err(Error::Format(format!(
                "payload has {} bytes, expected {}",
                r.buf.len(),
                per_cell * n_cells
            )));
        }
        let mut aps = Vec::with_capacity(n_cells);
        let mut channels = Vec::with_capacity(n_cells);
        for _ in 0..n_cells {
            let values = (0..n_bins).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let mut h = CVector::zeros(n_tx);
            for c in h.iter_mut() {
                *c = Complex64::new(r.f64()?, r.f64()?);
            }
            aps.push(ApsVector { values });
            channels.push(h);
        }
        Ok(Self {
            bs,
            grid,
            angular,
            n_tx,
            aps,
            channels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Write to any sink.
    pub fn write_to<W: io::Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cosine_similarity;
    use proptest::prelude::*;

    #[test]
    fn dft_codebook_is_orthonormal_when_square() {
        let cb = dft_codebook(8, 8).unwrap();
        let gram = cb.w.adjoint() * &cb.w;
        assert!((gram - CMatrix::identity(8, 8)).norm() < 1e-12);
        let wide = dft_codebook(32, 64).unwrap();
        assert_eq!((wide.n_tx(), wide.n_beams()), (32, 64));
        for c in wide.w.column_iter() {
            assert!((c.norm() - 1.0).abs() < 1e-12);
        }
        assert!(dft_codebook(8, 4).is_err());
    }

    #[test]
    fn rsrp_of_codeword_channel() {
        let cb = dft_codebook(8, 8).unwrap();
        let c = Complex64::new(0.3, -0.4);
        let h: CVector = cb.w.column(1).into_owned().map(|x| x * c);
        let r = rsrp_noiseless(&h, &cb, 2.0).unwrap();
        let expect = 2.0 * c.norm_sqr() / 8f64.sqrt();
        assert!((r[1] - expect).abs() < 1e-12);
        for (b, v) in r.iter().enumerate() {
            if b != 1 {
                assert!(*v < 1e-20);
            }
        }
        let r2 = rsrp_noiseless(&h, &cb, 4.0).unwrap();
        assert!((r2[1] - 2.0 * r[1]).abs() < 1e-12);
        assert!(rsrp_noiseless(&CVector::zeros(4), &cb, 1.0).is_err());
        let zero = measure_rsrp(&CVector::zeros(8), &cb, 1.0, 0.0, &mut stream(1, &[])).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn noiseless_two_path_recovery_is_exact() {
        let grid = AngularGrid::default();
        let cb = dft_codebook(32, 64).unwrap();
        let m = rsrp_matrix(&grid, &cb, 1.0);
        let mut alpha = DVector::zeros(grid.n_bins);
        alpha[20] = 2e-3;
        alpha[70] = 7e-4;
        let r = &m * &alpha;
        let aps = recover_aps(r.as_slice(), &grid, &cb, 4, 1.0).unwrap();
        assert_eq!(aps.support(), vec![20, 70]);
        for (a, b) in aps.values.iter().zip(alpha.iter()) {
            assert!((a - b).abs() <= 1e-6 * 2e-3);
        }
    }

    #[test]
    fn zero_rsrp_gives_zero_aps() {
        let grid = AngularGrid::default();
        let cb = dft_codebook(8, 64).unwrap();
        let aps = recover_aps(&[0.0; 64], &grid, &cb, 4, 1.0).unwrap();
        assert!(aps.values.iter().all(|v| *v == 0.0));
        assert_eq!(reconstruct(&aps, &grid, 8).norm(), 0.0);
    }

    #[test]
    fn unit_aps_reconstructs_steering_vector() {
        let grid = AngularGrid::default();
        let mut aps = ApsVector::zeros(grid.n_bins);
        aps.values[5] = 1.0;
        let h = reconstruct(&aps, &grid, 8);
        assert!((h - steer(grid.center(5), 8)).norm() < 1e-15);
    }

    #[test]
    fn single_path_matches_exhaustive_one_sparse_fit() {
        let grid = AngularGrid::default();
        let cb = dft_codebook(16, 64).unwrap();
        let m = rsrp_matrix(&grid, &cb, 1.0);
        let theta = 0.4321;
        let h = steer(theta, 16).scale(0.01);
        let r = DVector::from_vec(rsrp_noiseless(&h, &cb, 1.0).unwrap());
        let aps = recover_aps(r.as_slice(), &grid, &cb, 1, 1.0).unwrap();
        let best = (0..grid.n_bins)
            .map(|i| {
                let col = m.column(i);
                let c = (col.dot(&r) / col.dot(&col)).max(0.0);
                (i, (&r - col * c).norm())
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        assert_eq!(aps.support(), vec![best]);
        assert_eq!(best, grid.nearest(theta));
    }

    #[test]
    fn spatial_queries() {
        let grid = SpatialGrid {
            origin: (0.0, 0.0),
            cell_size: 2.0,
            nx: 10,
            ny: 10,
        };
        assert_eq!(grid.n_cells(), 100);
        let c = grid.center(37);
        assert_eq!(grid.locate(c).unwrap(), 37);
        assert_eq!(grid.locate((c.0 + 0.9, c.1 - 0.9)).unwrap(), 37);
        assert!(matches!(grid.locate((-0.1, 5.0)), Err(Error::OutOfCoverage { .. })));
        assert!(grid.locate((5.0, 20.5)).is_err());
    }

    #[test]
    fn on_grid_single_path_cell_is_collinear() {
        let grid = SpatialGrid {
            origin: (50.0, -10.0),
            cell_size: 4.0,
            nx: 3,
            ny: 2,
        };
        let cfg = CkmBuildConfig {
            n_paths: 2,
            n_measurements: 3,
            ..Default::default()
        };
        let theta = cfg.angular.center(40);
        let oracle = |_: (f64, f64), _: &mut SimRng| Ok(steer(theta, 8).scale(1e-4));
        let (ckm, report) = build(BsSite::new((0.0, 0.0), 0.0), 0, grid, 8, oracle, &cfg, 3).unwrap();
        assert_eq!(report.cells, 6);
        for h in &ckm.channels {
            assert!(cosine_similarity(h, &steer(theta, 8)) >= 0.999);
        }
    }

    #[test]
    fn bytes_round_trip_and_errors() {
        let grid = SpatialGrid {
            origin: (0.0, 0.0),
            cell_size: 1.0,
            nx: 2,
            ny: 2,
        };
        let cfg = CkmBuildConfig {
            n_measurements: 2,
            noise_var: 1e-20,
            ..Default::default()
        };
        let oracle = |xy: (f64, f64), rng: &mut SimRng| {
            Ok(crate::channel::gen_rayleigh(8, rng).scale(1e-5 * (1.0 + xy.0)))
        };
        let (ckm, _) = build(BsSite::new((1.0, 2.0), 0.3), 1, grid, 8, oracle, &cfg, 9).unwrap();
        let bytes = ckm.to_bytes();
        assert_eq!(Ckm::from_bytes(&bytes).unwrap(), ckm);
        assert!(matches!(Ckm::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Ckm::from_bytes(&bad), Err(Error::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn recovery_invariants(seed in 0u64..10_000, n_p in 1usize..5) {
            let grid = AngularGrid { n_bins: 32, ..Default::default() };
            let cb = dft_codebook(8, 16).unwrap();
            let mut rng = stream(seed, &[]);
            let h = crate::channel::gen_rayleigh(8, &mut rng);
            let r = measure_rsrp(&h, &cb, 1.0, 1e-3, &mut rng).unwrap();
            let m = rsrp_matrix(&grid, &cb, 1.0);
            let (coef, hist) = nonneg_ols(&m, &DVector::from_vec(r), n_p);
            prop_assert!(coef.iter().all(|v| *v >= 0.0));
            prop_assert!(coef.iter().filter(|v| **v > 0.0).count() <= n_p);
            for w in hist.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
        }
    }
}
