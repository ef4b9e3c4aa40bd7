//! Finite-time Lyapunov exponents along the computed bundles, volume
//! integrals of the one-step center stretch, and level-set fractions.
//!
//! All outputs are finite-horizon quantities; the horizon is always reported.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linear_anosov::{LinearSpectrum, Mat3, Vec3};
use crate::sampling::{pairwise_sum, uniform_points, wilson95, MeanEstimate, QuasiRandom, SeedStream};
use crate::splitting::{bundles_along_orbit, Bundle, Bundles, Reference};
use crate::torus::{DiffeoSpec, TorusPoint};

/// Orbit tail used on both sides when bundles are refined on the fly.
pub const DEFAULT_TAIL: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LyapunovError {
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("non-finite stretch along the orbit of {point:?} at step {step}")]
    NonFinite { point: [f64; 3], step: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentEstimate {
    pub point: TorusPoint,
    pub horizon: usize,
    pub sigma: Bundle,
    pub value: f64,
}

/// Exact identity along an orbit of length `n`:
/// `sum_sigma value_sigma - (1/n) sum log|det Df| = (log V(x_0) - log V(x_n)) / n`,
/// `V` the volume spanned by the unit bundle vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SumRule {
    pub defect: f64,
    /// `-log(min V) / n` over the orbit.
    pub bound: f64,
    pub min_volume: f64,
}

/// The three exponents of one orbit, in (s, c, u) order, plus the sum rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitExponents {
    pub point: TorusPoint,
    pub horizon: usize,
    pub values: [f64; 3],
    pub mean_log_det: f64,
    pub sum_rule: SumRule,
}

impl OrbitExponents {
    pub fn value(&self, sigma: Bundle) -> f64 {
        match sigma {
            Bundle::S => self.values[0],
            Bundle::C => self.values[1],
            Bundle::U => self.values[2],
        }
    }

    pub fn estimate(&self, sigma: Bundle) -> ExponentEstimate {
        ExponentEstimate { point: self.point, horizon: self.horizon, sigma, value: self.value(sigma) }
    }
}

fn spanned_volume(b: &Bundles) -> f64 {
    Mat3::from_columns(&[b.e_u, b.e_c, b.e_s]).determinant().abs()
}

/// One-step `log ||Df(x_k) E^sigma(x_k)||` for `k < n`, (s, c, u) per step.
pub fn one_step_logs(
    f: &DiffeoSpec,
    r: &Reference,
    x: &Vec3,
    n: usize,
    tail: usize,
) -> (Vec<[f64; 3]>, Vec<Bundles>, Vec<Mat3>) {
    let (_, bundles, derivs) = bundles_along_orbit(f, r, x, n + 1, tail);
    let logs = (0..n)
        .map(|k| {
            let d = &derivs[k];
            let b = &bundles[k];
            [(d * b.e_s).norm().ln(), (d * b.e_c).norm().ln(), (d * b.e_u).norm().ln()]
        })
        .collect();
    (logs, bundles, derivs)
}

/// All three finite-time exponents along the orbit of `x`.
pub fn orbit_exponents(
    f: &DiffeoSpec,
    spectrum: &LinearSpectrum,
    x: &Vec3,
    n: usize,
    tail: usize,
) -> Result<OrbitExponents, LyapunovError> {
    if n == 0 {
        return Err(LyapunovError::EmptyHorizon);
    }
    let r = Reference::new(spectrum);
    let (logs, bundles, derivs) = one_step_logs(f, &r, x, n, tail);
    if let Some(step) = logs.iter().position(|l| l.iter().any(|v| !v.is_finite())) {
        return Err(LyapunovError::NonFinite { point: [x[0], x[1], x[2]], step });
    }
    let avg = |i: usize| pairwise_sum(&logs.iter().map(|l| l[i]).collect::<Vec<_>>()) / n as f64;
    let values = [avg(0), avg(1), avg(2)];
    let log_dets: Vec<f64> = derivs[..n].iter().map(|d| d.determinant().abs().ln()).collect();
    let mean_log_det = pairwise_sum(&log_dets) / n as f64;
    let min_volume = bundles.iter().map(spanned_volume).fold(f64::INFINITY, f64::min);
    Ok(OrbitExponents {
        point: TorusPoint::from_vec(x),
        horizon: n,
        values,
        mean_log_det,
        sum_rule: SumRule {
            defect: (values.iter().sum::<f64>() - mean_log_det).abs(),
            bound: -min_volume.ln() / n as f64,
            min_volume,
        },
    })
}

/// Birkhoff average of `log ||Df|E^sigma||` along `n` iterates of `x`.
pub fn finite_time_exponent(
    f: &DiffeoSpec,
    spectrum: &LinearSpectrum,
    x: &Vec3,
    n: usize,
    sigma: Bundle,
) -> Result<ExponentEstimate, LyapunovError> {
    Ok(orbit_exponents(f, spectrum, x, n, DEFAULT_TAIL)?.estimate(sigma))
}

/// Orbit exponents at many points, in input order.
pub fn sample_exponents(
    f: &DiffeoSpec,
    spectrum: &LinearSpectrum,
    points: &[Vec3],
    n: usize,
    tail: usize,
) -> Result<Vec<OrbitExponents>, LyapunovError> {
    points.par_iter().map(|x| orbit_exponents(f, spectrum, x, n, tail)).collect()
}

/// Monte-Carlo estimate of `int log ||Df|E^c|| dm` from quasi-random base
/// points; the integrand is a function on the torus, one step per point.
pub fn mc_center_integral(f: &DiffeoSpec, spectrum: &LinearSpectrum, budget: usize, seed: u64, tail: usize) -> MeanEstimate {
    let r = Reference::new(spectrum);
    let points = QuasiRandom::take_points(seed, budget);
    let logs: Vec<f64> = points.par_iter().map(|x| one_step_logs(f, &r, x, 1, tail).0[0][1]).collect();
    MeanEstimate::from_samples(&logs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSetEstimate {
    pub threshold: f64,
    pub start: usize,
    pub horizon: usize,
    pub fraction: f64,
    pub sample_count: usize,
    /// Wilson 95% interval for the fraction.
    pub interval: (f64, f64),
}

/// Partial sums `S_k = log ||Df^k|E^c(x)||` for `k = 1..=horizon`.
pub fn center_partial_sums(f: &DiffeoSpec, r: &Reference, x: &Vec3, horizon: usize, tail: usize) -> Vec<f64> {
    let (logs, _, _) = one_step_logs(f, r, x, horizon, tail);
    let mut acc = 0.0;
    logs.iter()
        .map(|l| {
            acc += l[1];
            acc
        })
        .collect()
}

/// Fraction of pseudo-random points with `S_k >= k * threshold` for every
/// `k` in `[start, horizon]`.
pub fn level_set_fraction(
    f: &DiffeoSpec,
    spectrum: &LinearSpectrum,
    threshold: f64,
    start: usize,
    horizon: usize,
    budget: usize,
    seed: u64,
) -> LevelSetEstimate {
    let r = Reference::new(spectrum);
    let points = uniform_points(SeedStream::new(seed, "level-set"), budget);
    let start = start.max(1);
    let hits = points
        .par_iter()
        .map(|x| {
            let sums = center_partial_sums(f, &r, x, horizon, DEFAULT_TAIL);
            (start..=horizon).all(|k| sums[k - 1] >= k as f64 * threshold)
        })
        .filter(|&b| b)
        .count();
    LevelSetEstimate {
        threshold,
        start,
        horizon,
        fraction: hits as f64 / budget.max(1) as f64,
        sample_count: budget,
        interval: wilson95(hits, budget),
    }
}

/// Benettin QR estimator: all three exponents, descending, independent of
/// the bundle computation. The first `burn_in` steps are discarded.
pub fn qr_exponents(f: &DiffeoSpec, x: &Vec3, n: usize, burn_in: usize) -> [f64; 3] {
    let mut q = Mat3::identity();
    let mut y = *x;
    let mut sums = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for k in 0..burn_in + n {
        let (fy, d) = f.eval_with_derivative(&y);
        y = crate::torus::project_vec(&fy);
        let qr = (d * q).qr();
        let (qn, rn) = (qr.q(), qr.r());
        let mut signs = Mat3::identity();
        for i in 0..3 {
            if rn[(i, i)] < 0.0 {
                signs[(i, i)] = -1.0;
            }
        }
        q = qn * signs;
        if k >= burn_in {
            for i in 0..3 {
                sums[i].push(rn[(i, i)].abs().ln());
            }
        }
    }
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = pairwise_sum(&sums[i]) / n as f64;
    }
    out
}

/// `x,y,z,horizon,sigma,value` rows.
pub fn exponent_csv(rows: &[ExponentEstimate]) -> String {
    let mut out = String::from("x,y,z,horizon,sigma,value\n");
    for r in rows {
        let sigma = match r.sigma {
            Bundle::S => "s",
            Bundle::C => "c",
            Bundle::U => "u",
        };
        out.push_str(&format!(
            "{:.17e},{:.17e},{:.17e},{},{},{:.17e}\n",
            r.point.0[0], r.point.0[1], r.point.0[2], r.horizon, sigma, r.value
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear_anosov::{family_spectrum, make_inverse_family_matrix, DEFAULT_ROOT_TOL};
    use crate::perturbation::{build_da_example, DaParams};

    fn linear(n: i64) -> (DiffeoSpec, LinearSpectrum) {
        (
            DiffeoSpec::linear(make_inverse_family_matrix(n).unwrap()),
            family_spectrum(n, DEFAULT_ROOT_TOL).unwrap(),
        )
    }

    #[test]
    fn linear_exponents_are_exact() {
        for n in [10, 100, 1000] {
            let (f, s) = linear(n);
            for x in QuasiRandom::take_points(1, 5) {
                for h in [1, 7, 50] {
                    let e = orbit_exponents(&f, &s, &x, h, DEFAULT_TAIL).unwrap();
                    assert!((e.values[0] - s.lambda_s).abs() < 1e-10);
                    assert!((e.values[1] - s.lambda_c).abs() < 1e-10);
                    assert!((e.values[2] - s.lambda_u).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn qr_estimator_matches_linear_spectrum() {
        let (f, s) = linear(100);
        let e = qr_exponents(&f, &Vec3::new(0.1, 0.2, 0.3), 200, 20);
        assert!((e[0] - s.lambda_u).abs() < 1e-8);
        assert!((e[1] - s.lambda_c).abs() < 1e-8);
        assert!((e[2] - s.lambda_s).abs() < 1e-8);
    }

    #[test]
    fn linear_center_integral_and_level_sets() {
        let (f, s) = linear(100);
        let m = mc_center_integral(&f, &s, 500, 3, DEFAULT_TAIL);
        assert!((m.mean - s.lambda_c).abs() < 1e-10);
        let below = level_set_fraction(&f, &s, s.lambda_c * 0.5, 1, 50, 40, 1);
        assert_eq!(below.fraction, 1.0);
        let above = level_set_fraction(&f, &s, s.lambda_c * 1.5, 1, 50, 40, 1);
        assert_eq!(above.fraction, 0.0);
    }

    #[test]
    fn surgered_fixed_point_has_contracting_center() {
        let ex = build_da_example(&DaParams::new(100, 3)).unwrap();
        let target = (1.0 - ex.spectrum.alpha_n).ln();
        assert!(target < 0.0);
        for n in [1, 10, 100] {
            let e = finite_time_exponent(&ex.map, &ex.spectrum, &Vec3::zeros(), n, Bundle::C).unwrap();
            assert!((e.value - target).abs() < 1e-9, "n={n}: {}", e.value);
        }
    }

    #[test]
    fn sum_rule_and_dominance_on_built_example() {
        let ex = build_da_example(&DaParams::new(100, 3)).unwrap();
        for x in QuasiRandom::take_points(8, 40) {
            let e = orbit_exponents(&ex.map, &ex.spectrum, &x, 50, DEFAULT_TAIL).unwrap();
            assert!(e.sum_rule.defect <= e.sum_rule.bound + 1e-12, "{:?}", e.sum_rule);
            assert!(e.values[0] < e.values[1] && e.values[1] < e.values[2]);
        }
    }

    #[test]
    fn csv_has_one_row_per_estimate() {
        let (f, s) = linear(10);
        let e = orbit_exponents(&f, &s, &Vec3::new(0.1, 0.2, 0.3), 3, 8).unwrap();
        let csv = exponent_csv(&Bundle::ALL.map(|b| e.estimate(b)));
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(2).unwrap().contains(",3,c,"));
    }
}
