//! The integer family `L_n`, its inverse `B_n`, and their spectra.
//!
//! Everything that can be exact is exact: matrices, determinants, adjugates
//! and characteristic polynomials use `i64`. Roots are found by bracketing the
//! sign changes of the cubic between its critical points, bisecting, and then
//! polishing with Newton steps.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinearError {
    #[error("family index {0} is below 2; the family degenerates")]
    Domain(i64),
    #[error("matrix determinant {0} is not +1 or -1")]
    NotUnimodular(i64),
    #[error("spectrum is not hyperbolic: {0}")]
    NotHyperbolic(String),
    #[error("root finder did not converge: {0}")]
    Numeric(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    FamilyL,
    InverseB,
    User,
}

/// A 3x3 integer matrix with determinant +1 or -1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegerMatrix3 {
    entries: [[i64; 3]; 3],
    provenance: Provenance,
}

fn det3(m: &[[i64; 3]; 3]) -> i64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

impl IntegerMatrix3 {
    pub fn new(entries: [[i64; 3]; 3], provenance: Provenance) -> Result<Self, LinearError> {
        let d = det3(&entries);
        if d != 1 && d != -1 {
            return Err(LinearError::NotUnimodular(d));
        }
        Ok(Self { entries, provenance })
    }

    pub fn identity() -> Self {
        Self { entries: [[1, 0, 0], [0, 1, 0], [0, 0, 1]], provenance: Provenance::User }
    }

    pub fn entries(&self) -> &[[i64; 3]; 3] {
        &self.entries
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn determinant(&self) -> i64 {
        det3(&self.entries)
    }

    pub fn trace(&self) -> i64 {
        (0..3).map(|i| self.entries[i][i]).sum()
    }

    /// Exact inverse through the adjugate; integral because `det = ±1`.
    pub fn inverse(&self) -> IntegerMatrix3 {
        let m = &self.entries;
        let d = self.determinant();
        let mut adj = [[0i64; 3]; 3];
        for (i, row) in adj.iter_mut().enumerate() {
            for (j, slot) in row.iter_mut().enumerate() {
                // cofactor of (j, i)
                let (r0, r1) = others(j);
                let (c0, c1) = others(i);
                let minor = m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
                let sign = if (i + j) % 2 == 0 { 1 } else { -1 };
                *slot = sign * minor * d;
            }
        }
        let provenance = match self.provenance {
            Provenance::FamilyL => Provenance::InverseB,
            Provenance::InverseB => Provenance::FamilyL,
            Provenance::User => Provenance::User,
        };
        IntegerMatrix3 { entries: adj, provenance }
    }

    pub fn mul(&self, other: &IntegerMatrix3) -> IntegerMatrix3 {
        let mut out = [[0i64; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = (0..3).map(|k| self.entries[i][k] * other.entries[k][j]).sum();
            }
        }
        IntegerMatrix3 { entries: out, provenance: Provenance::User }
    }

    pub fn apply_int(&self, k: [i64; 3]) -> [i64; 3] {
        let mut out = [0i64; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..3).map(|j| self.entries[i][j] * k[j]).sum();
        }
        out
    }

    pub fn to_mat3(&self) -> Mat3 {
        Mat3::from_fn(|i, j| self.entries[i][j] as f64)
    }

    /// Coefficients `[c0, c1, c2, c3]` of `det(M - xI) = c0 + c1 x + c2 x^2 + c3 x^3`.
    pub fn characteristic_polynomial(&self) -> [i64; 4] {
        let m = &self.entries;
        let principal_minors = (m[0][0] * m[1][1] - m[0][1] * m[1][0])
            + (m[0][0] * m[2][2] - m[0][2] * m[2][0])
            + (m[1][1] * m[2][2] - m[1][2] * m[2][1]);
        [self.determinant(), -principal_minors, self.trace(), -1]
    }
}

fn others(i: usize) -> (usize, usize) {
    match i {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// The family matrix with rows (0,0,1), (0,1,-1), (-1,-1,n).
pub fn make_family_matrix(n: i64) -> Result<IntegerMatrix3, LinearError> {
    if n < 2 {
        return Err(LinearError::Domain(n));
    }
    IntegerMatrix3::new([[0, 0, 1], [0, 1, -1], [-1, -1, n]], Provenance::FamilyL)
}

/// `B_n = L_n^{-1}`, the map the construction perturbs.
pub fn make_inverse_family_matrix(n: i64) -> Result<IntegerMatrix3, LinearError> {
    Ok(make_family_matrix(n)?.inverse())
}

/// Evaluates `p(M)` for the characteristic polynomial `p` of `M` in exact arithmetic.
pub fn cayley_hamilton_residual(m: &IntegerMatrix3) -> [[i64; 3]; 3] {
    let c = m.characteristic_polynomial();
    let id = IntegerMatrix3::identity();
    let m2 = m.mul(m);
    let m3 = m2.mul(m);
    let mut out = [[0i64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = c[0] * id.entries[i][j]
                + c[1] * m.entries[i][j]
                + c[2] * m2.entries[i][j]
                + c[3] * m3.entries[i][j];
        }
    }
    out
}

/// Eigen-data of a hyperbolic 3x3 matrix with three real eigenvalues of
/// distinct moduli, ordered stable < center < unstable by modulus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSpectrum {
    pub n: Option<i64>,
    pub beta_s: f64,
    pub beta_c: f64,
    pub beta_u: f64,
    /// Signed eigenvalues in the order (s, c, u).
    pub eigenvalues: [f64; 3],
    pub lambda_s: f64,
    pub lambda_c: f64,
    pub lambda_u: f64,
    pub alpha_n: f64,
    pub e_s: [f64; 3],
    pub e_c: [f64; 3],
    pub e_u: [f64; 3],
}

impl LinearSpectrum {
    /// Builds a spectrum record from moduli alone (eigenvectors set to the
    /// coordinate axes). Used for synthetic inputs.
    pub fn from_moduli(beta_s: f64, beta_c: f64, beta_u: f64) -> Self {
        Self {
            n: None,
            beta_s,
            beta_c,
            beta_u,
            eigenvalues: [beta_s, beta_c, beta_u],
            lambda_s: beta_s.ln(),
            lambda_c: beta_c.ln(),
            lambda_u: beta_u.ln(),
            alpha_n: beta_c - 1.0,
            e_s: [0.0, 0.0, 1.0],
            e_c: [0.0, 1.0, 0.0],
            e_u: [1.0, 0.0, 0.0],
        }
    }

    pub fn e_u_vec(&self) -> Vec3 {
        Vec3::from(self.e_u)
    }
    pub fn e_c_vec(&self) -> Vec3 {
        Vec3::from(self.e_c)
    }
    pub fn e_s_vec(&self) -> Vec3 {
        Vec3::from(self.e_s)
    }

    /// Columns (e_u, e_c, e_s).
    pub fn eigenframe(&self) -> Mat3 {
        Mat3::from_columns(&[self.e_u_vec(), self.e_c_vec(), self.e_s_vec()])
    }

    /// Signed eigenvalues in (u, c, s) order, matching [`Self::eigenframe`].
    pub fn values_ucs(&self) -> [f64; 3] {
        [self.eigenvalues[2], self.eigenvalues[1], self.eigenvalues[0]]
    }

    pub fn exponent_sum(&self) -> f64 {
        self.lambda_s + self.lambda_c + self.lambda_u
    }
}

/// Three real roots of a monic-normalised real cubic, or an error when the
/// cubic has a complex pair or a repeated root.
///
/// `coeffs` are `[c0, c1, c2, c3]` with `c3 != 0`.
pub fn real_cubic_roots(coeffs: [f64; 4], tol: f64) -> Result<[f64; 3], LinearError> {
    let [c0, c1, c2, c3] = coeffs;
    if c3 == 0.0 {
        return Err(LinearError::Numeric("leading coefficient is zero".into()));
    }
    // q(x) = x^3 + a x^2 + b x + c
    let (a, b, c) = (c2 / c3, c1 / c3, c0 / c3);
    let q = |x: f64| ((x + a) * x + b) * x + c;
    let dq = |x: f64| (3.0 * x + 2.0 * a) * x + b;
    let disc = 4.0 * a * a - 12.0 * b;
    if disc <= 0.0 {
        return Err(LinearError::NotHyperbolic("cubic is monotone: complex or triple roots".into()));
    }
    let sq = disc.sqrt();
    let crit_lo = (-2.0 * a - sq) / 6.0;
    let crit_hi = (-2.0 * a + sq) / 6.0;
    let (q_lo, q_hi) = (q(crit_lo), q(crit_hi));
    let scale = 1.0 + a.abs().max(b.abs()).max(c.abs());
    if !(q_lo > 0.0 && q_hi < 0.0) {
        return Err(LinearError::NotHyperbolic(format!(
            "no three sign changes (q at critical points: {q_lo:e}, {q_hi:e})"
        )));
    }
    let bound = scale + 1.0;
    let brackets = [(-bound, crit_lo), (crit_lo, crit_hi), (crit_hi, bound)];
    let mut roots = [0.0; 3];
    for (slot, &(mut lo, mut hi)) in roots.iter_mut().zip(brackets.iter()) {
        let rising = q(hi) > q(lo);
        let mut iters = 0;
        while hi - lo > tol * (1.0 + lo.abs().min(hi.abs())) {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if (q(mid) > 0.0) == rising {
                hi = mid;
            } else {
                lo = mid;
            }
            iters += 1;
            if iters > 400 {
                return Err(LinearError::Numeric("bisection did not terminate".into()));
            }
        }
        let mut x = 0.5 * (lo + hi);
        for _ in 0..4 {
            let d = dq(x);
            if d == 0.0 {
                break;
            }
            let next = x - q(x) / d;
            if !next.is_finite() || next < lo - tol || next > hi + tol {
                break;
            }
            x = next;
        }
        *slot = x;
    }
    Ok(roots)
}

/// Unit null vector of `m - value * I`, by the largest cross product of two rows.
pub fn eigenvector_for(m: &Mat3, value: f64) -> Vec3 {
    let shifted = m - Mat3::identity() * value;
    let rows: Vec<Vec3> = (0..3).map(|i| shifted.row(i).transpose()).collect();
    let candidates = [rows[0].cross(&rows[1]), rows[0].cross(&rows[2]), rows[1].cross(&rows[2])];
    let best = candidates
        .iter()
        .max_by(|x, y| x.norm().total_cmp(&y.norm()))
        .copied()
        .unwrap_or_else(Vec3::zeros);
    best.normalize()
}

/// Sorted (by modulus) eigen-decomposition of a real 3x3 matrix with three
/// real eigenvalues of distinct moduli, none of modulus one.
pub fn real_spectrum(m: &Mat3, coeffs: [f64; 4], tol: f64) -> Result<LinearSpectrum, LinearError> {
    let roots = real_cubic_roots(coeffs, tol)?;
    let mut sorted = roots;
    sorted.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let sep = 1e3 * tol.max(f64::EPSILON);
    for w in sorted.windows(2) {
        if (w[1].abs() - w[0].abs()) <= sep * w[1].abs() {
            return Err(LinearError::NotHyperbolic("eigenvalues with equal moduli".into()));
        }
    }
    if sorted.iter().any(|r| (r.abs() - 1.0).abs() <= sep) {
        return Err(LinearError::NotHyperbolic("eigenvalue of modulus one".into()));
    }
    let axes = [Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
    let mut vecs = [Vec3::zeros(); 3];
    for i in 0..3 {
        let mut v = eigenvector_for(m, sorted[i]);
        if v.dot(&axes[i]) < 0.0 {
            v = -v;
        }
        vecs[i] = v;
    }
    let [bs, bc, bu] = [sorted[0].abs(), sorted[1].abs(), sorted[2].abs()];
    Ok(LinearSpectrum {
        n: None,
        beta_s: bs,
        beta_c: bc,
        beta_u: bu,
        eigenvalues: sorted,
        lambda_s: bs.ln(),
        lambda_c: bc.ln(),
        lambda_u: bu.ln(),
        alpha_n: bc - 1.0,
        e_s: vecs[0].into(),
        e_c: vecs[1].into(),
        e_u: vecs[2].into(),
    })
}

/// Real characteristic coefficients `[c0..c3]` of `det(M - xI)` for a float matrix.
pub fn characteristic_coefficients(m: &Mat3) -> [f64; 4] {
    let minors = (m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)])
        + (m[(0, 0)] * m[(2, 2)] - m[(0, 2)] * m[(2, 0)])
        + (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)]);
    [m.determinant(), -minors, m.trace(), -1.0]
}

pub fn spectral_triple(m: &IntegerMatrix3, tol: f64) -> Result<LinearSpectrum, LinearError> {
    let c = m.characteristic_polynomial();
    let coeffs = [c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64];
    real_spectrum(&m.to_mat3(), coeffs, tol)
}

/// Spectrum of `B_n` tagged with its family index.
pub fn family_spectrum(n: i64, tol: f64) -> Result<LinearSpectrum, LinearError> {
    let b = make_inverse_family_matrix(n)?;
    let mut s = spectral_triple(&b, tol)?;
    s.n = Some(n);
    Ok(s)
}

pub fn linear_lyapunov_exponents(s: &LinearSpectrum) -> (f64, f64, f64) {
    (s.lambda_s, s.lambda_c, s.lambda_u)
}

/// Sum of the positive exponents (Pesin's formula for a linear automorphism).
pub fn linear_entropy(s: &LinearSpectrum) -> f64 {
    [s.lambda_s, s.lambda_c, s.lambda_u].iter().filter(|l| **l > 0.0).sum()
}

pub const DEFAULT_ROOT_TOL: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;

    /// Cofactor expansion along the first column, written independently of `det3`.
    fn det_oracle(m: &[[i64; 3]; 3]) -> i64 {
        let minor = |r: usize| {
            let rows: Vec<usize> = (0..3).filter(|&i| i != r).collect();
            m[rows[0]][1] * m[rows[1]][2] - m[rows[0]][2] * m[rows[1]][1]
        };
        m[0][0] * minor(0) - m[1][0] * minor(1) + m[2][0] * minor(2)
    }

    #[test]
    fn family_matrix_n2_matches_display() {
        let l = make_family_matrix(2).unwrap();
        assert_eq!(l.entries(), &[[0, 0, 1], [0, 1, -1], [-1, -1, 2]]);
        assert_eq!(l.provenance(), Provenance::FamilyL);
    }

    #[test]
    fn family_determinant_is_one() {
        for n in 2..=10 {
            let l = make_family_matrix(n).unwrap();
            assert_eq!(det_oracle(l.entries()), 1);
            assert_eq!(l.determinant(), 1);
        }
    }

    #[test]
    fn family_inverse_is_integral() {
        for n in 2..=10 {
            let l = make_family_matrix(n).unwrap();
            let b = l.inverse();
            assert_eq!(b.provenance(), Provenance::InverseB);
            assert_eq!(l.mul(&b).entries(), IntegerMatrix3::identity().entries());
            assert_eq!(b.mul(&l).entries(), IntegerMatrix3::identity().entries());
        }
        let b100 = make_inverse_family_matrix(100).unwrap();
        assert_eq!(b100.entries(), &[[99, -1, -1], [1, 1, 0], [1, 0, 0]]);
    }

    #[test]
    fn domain_error_below_two() {
        assert_eq!(make_family_matrix(1), Err(LinearError::Domain(1)));
        assert!(make_family_matrix(-5).is_err());
    }

    #[test]
    fn non_unimodular_rejected() {
        assert!(IntegerMatrix3::new([[2, 0, 0], [0, 1, 0], [0, 0, 1]], Provenance::User).is_err());
    }

    #[test]
    fn characteristic_polynomial_of_family() {
        // symbolic expansion: det(L_n - xI) = -x^3 + (n+1)x^2 - n x + 1
        for n in 2..=4 {
            let l = make_family_matrix(n).unwrap();
            assert_eq!(l.characteristic_polynomial(), [1, -n, n + 1, -1]);
        }
        // (1 - x)^3 = 1 - 3x + 3x^2 - x^3
        assert_eq!(IntegerMatrix3::identity().characteristic_polynomial(), [1, -3, 3, -1]);
    }

    #[test]
    fn cayley_hamilton_holds_exactly() {
        for n in [2, 3, 10, 100, 1000] {
            let l = make_family_matrix(n).unwrap();
            assert_eq!(cayley_hamilton_residual(&l), [[0; 3]; 3]);
            assert_eq!(cayley_hamilton_residual(&l.inverse()), [[0; 3]; 3]);
        }
    }

    #[test]
    fn identity_is_not_hyperbolic() {
        assert!(matches!(
            spectral_triple(&IntegerMatrix3::identity(), DEFAULT_ROOT_TOL),
            Err(LinearError::NotHyperbolic(_))
        ));
    }

    #[test]
    fn small_family_members_have_complex_pair() {
        assert!(family_spectrum(2, DEFAULT_ROOT_TOL).is_err());
        assert!(family_spectrum(3, DEFAULT_ROOT_TOL).is_err());
    }

    #[test]
    fn b100_limits() {
        let s = family_spectrum(100, DEFAULT_ROOT_TOL).unwrap();
        assert!((s.beta_u / 100.0 - 1.0).abs() < 0.05);
        assert!(s.beta_c > 1.0 && s.beta_c < 1.1);
        assert!((100.0 * s.beta_s - 1.0).abs() < 0.05);
    }

    #[test]
    fn roots_solve_characteristic_polynomial() {
        for n in [10, 100, 1000, 10_000] {
            let b = make_inverse_family_matrix(n).unwrap();
            let s = spectral_triple(&b, DEFAULT_ROOT_TOL).unwrap();
            for v in s.eigenvalues {
                let r = (b.to_mat3() - Mat3::identity() * v).determinant();
                assert!(r.abs() < 1e-9 * (1.0 + v.abs().powi(3)), "n={n} v={v} r={r}");
            }
            let m = b.to_mat3();
            for (val, e) in s.values_ucs().iter().zip([s.e_u_vec(), s.e_c_vec(), s.e_s_vec()]) {
                assert!((m * e - e * *val).norm() < 1e-9 * val.abs().max(1.0));
            }
        }
    }

    #[test]
    fn eigenvector_angles_shrink_along_family() {
        let angle = |v: [f64; 3], axis: usize| v[axis].abs().min(1.0).acos();
        let spectra: Vec<_> = [10, 100, 1000].iter().map(|&n| family_spectrum(n, DEFAULT_ROOT_TOL).unwrap()).collect();
        for w in spectra.windows(2) {
            assert!(angle(w[1].e_u, 0) < angle(w[0].e_u, 0));
            assert!(angle(w[1].e_c, 1) < angle(w[0].e_c, 1));
            assert!(angle(w[1].e_s, 2) < angle(w[0].e_s, 2));
        }
    }

    #[test]
    fn exponents_and_entropy() {
        let s = family_spectrum(100, DEFAULT_ROOT_TOL).unwrap();
        let (ls, lc, lu) = linear_lyapunov_exponents(&s);
        assert_eq!(lc, (1.0 + s.alpha_n).ln());
        assert!((ls + lc + lu).abs() < 1e-10);
        assert!((linear_entropy(&s) - (s.beta_c.ln() + s.beta_u.ln())).abs() < 1e-15);

        let id = LinearSpectrum::from_moduli(1.0, 1.0, 1.0);
        assert_eq!(linear_lyapunov_exponents(&id), (0.0, 0.0, 0.0));
        assert_eq!(linear_entropy(&id), 0.0);

        let l = family_spectrum(100, DEFAULT_ROOT_TOL).unwrap();
        let inv = spectral_triple(&make_family_matrix(100).unwrap(), DEFAULT_ROOT_TOL).unwrap();
        assert!((linear_entropy(&l) - linear_entropy(&inv)).abs() < 1e-10);
    }

    #[test]
    fn reciprocal_spectra() {
        for n in [10, 57, 100, 1000, 10_000] {
            let b = family_spectrum(n, DEFAULT_ROOT_TOL).unwrap();
            let l = spectral_triple(&make_family_matrix(n).unwrap(), DEFAULT_ROOT_TOL).unwrap();
            let rel = |x: f64, y: f64| ((x - y) / y).abs();
            assert!(rel(b.beta_s, 1.0 / l.beta_u) < 1e-10);
            assert!(rel(b.beta_c, 1.0 / l.beta_c) < 1e-10);
            assert!(rel(b.beta_u, 1.0 / l.beta_s) < 1e-10);
        }
    }
}
