//! Thin helpers over `nalgebra` complex vectors and matrices.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type CVector = DVector<Complex64>;
pub type CMatrix = DMatrix<Complex64>;

/// One downlink channel `h` (length = number of transmit antennas).
pub type ChannelVector = CVector;

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// `a^H b`.
#[inline]
pub fn inner(a: &CVector, b: &CVector) -> Complex64 {
    a.dotc(b)
}

/// `|a^H b|^2`.
#[inline]
pub fn gain(a: &CVector, b: &CVector) -> f64 {
    a.dotc(b).norm_sqr()
}

/// `M += scale * x x^H`.
pub fn add_outer(m: &mut CMatrix, x: &CVector, scale: f64) {
    let n = x.len();
    for c in 0..n {
        let xc = x[c].conj() * scale;
        for r in 0..n {
            m[(r, c)] += x[r] * xc;
        }
    }
}

/// `x^H M x` for Hermitian `M` (imaginary round-off discarded).
pub fn quad_form(m: &CMatrix, x: &CVector) -> f64 {
    x.dotc(&(m * x)).re
}

/// Inverse of a Hermitian positive-definite matrix, `None` if not PD.
pub fn hpd_inverse(m: &CMatrix) -> Option<CMatrix> {
    m.clone().cholesky().map(|c| c.inverse())
}

/// Smallest / largest eigenvalue ratio of a Hermitian PSD matrix.
pub fn hermitian_condition_ratio(m: &CMatrix) -> f64 {
    let eig = m.clone().symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.iter().cloned().fold(f64::MAX, f64::min);
    if max <= 0.0 {
        0.0
    } else {
        min.max(0.0) / max
    }
}

/// Stack column vectors into an `n x k` matrix.
pub fn hstack(cols: &[&CVector]) -> CMatrix {
    let n = cols.first().map_or(0, |c| c.len());
    CMatrix::from_fn(n, cols.len(), |r, c| cols[c][r])
}

pub fn total_power(vs: &[CVector]) -> f64 {
    vs.iter().map(|v| v.norm_squared()).sum()
}

/// Cosine similarity `|a^H b| / (|a| |b|)`, zero if either vector vanishes.
pub fn cosine_similarity(a: &CVector, b: &CVector) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        inner(a, b).norm() / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outer_and_quadratic_form_agree() {
        let x = CVector::from_vec(vec![Complex64::new(1.0, 2.0), Complex64::new(-0.5, 0.3)]);
        let mut m = CMatrix::zeros(2, 2);
        add_outer(&mut m, &x, 2.0);
        let y = CVector::from_vec(vec![Complex64::new(0.2, -1.0), Complex64::new(1.5, 0.0)]);
        assert!((quad_form(&m, &y) - 2.0 * gain(&x, &y)).abs() < 1e-12);
    }

    #[test]
    fn condition_ratio_of_identity_is_one() {
        let m = CMatrix::identity(3, 3);
        assert!((hermitian_condition_ratio(&m) - 1.0).abs() < 1e-12);
    }
}
