//! Cone certification and the invariant splitting `E^s + E^c + E^u`.
//!
//! Cones are constant: they are written in the coordinates `(a, b, k)` of a
//! vector in the eigenbasis `(e_u, e_c, e_s)` of the linear model. The four
//! families are
//!
//! ```text
//! u :  |b| + |k| <= theta |a|        (forward)
//! s :  |a| + |b| <= theta |k|        (backward)
//! cu:  |k| <= theta (|a| + |b|)      (forward)
//! cs:  |a| <= theta (|b| + |k|)      (backward)
//! ```
//!
//! Bundles are obtained by power iteration along orbit tails. `E^c` is the
//! intersection of `E^cu` and `E^cs`, each represented by its normal covector,
//! pushed by the inverse transpose (forward) or the transpose (backward).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linear_anosov::{LinearSpectrum, Mat3, Vec3};
use crate::torus::DiffeoSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConeKind {
    U,
    S,
    Cu,
    Cs,
}

impl ConeKind {
    pub const ALL: [ConeKind; 4] = [ConeKind::U, ConeKind::S, ConeKind::Cu, ConeKind::Cs];

    pub fn is_forward(self) -> bool {
        matches!(self, ConeKind::U | ConeKind::Cu)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeSpec {
    /// Raw eigenbasis `(e_u, e_c, e_s)` of the linear model.
    pub basis: [[f64; 3]; 3],
    /// Gram-Schmidt copy of `basis`, in the same order.
    pub orthonormal: [[f64; 3]; 3],
    pub theta: f64,
    pub kind: ConeKind,
}

impl ConeSpec {
    pub fn new(spectrum: &LinearSpectrum, theta: f64, kind: ConeKind) -> Self {
        assert!(theta > 0.0 && theta < 1.0, "cone aperture must lie in (0, 1)");
        let raw = [spectrum.e_u_vec(), spectrum.e_c_vec(), spectrum.e_s_vec()];
        let mut ortho = [Vec3::zeros(); 3];
        for i in 0..3 {
            let mut v = raw[i];
            for q in ortho.iter().take(i) {
                v -= q * q.dot(&raw[i]);
            }
            ortho[i] = v.normalize();
        }
        let arr = |v: &Vec3| [v[0], v[1], v[2]];
        Self {
            basis: [arr(&raw[0]), arr(&raw[1]), arr(&raw[2])],
            orthonormal: [arr(&ortho[0]), arr(&ortho[1]), arr(&ortho[2])],
            theta,
            kind,
        }
    }

    pub fn frame(&self) -> Mat3 {
        Mat3::from_columns(&[Vec3::from(self.basis[0]), Vec3::from(self.basis[1]), Vec3::from(self.basis[2])])
    }

    /// Rays on the cone boundary, in eigen-coordinates. For `u` and `s` these
    /// are the four extreme rays of a convex cone, so they decide containment.
    pub fn boundary_rays(&self, count: usize) -> Vec<Vec3> {
        let t = self.theta;
        match self.kind {
            ConeKind::U => vec![
                Vec3::new(1.0, t, 0.0),
                Vec3::new(1.0, -t, 0.0),
                Vec3::new(1.0, 0.0, t),
                Vec3::new(1.0, 0.0, -t),
            ],
            ConeKind::S => vec![
                Vec3::new(t, 0.0, 1.0),
                Vec3::new(-t, 0.0, 1.0),
                Vec3::new(0.0, t, 1.0),
                Vec3::new(0.0, -t, 1.0),
            ],
            ConeKind::Cu | ConeKind::Cs => {
                let mut rays = Vec::with_capacity(2 * count);
                for i in 0..count {
                    let phi = std::f64::consts::TAU * (i as f64 + 0.5) / count as f64;
                    let (s, c) = phi.sin_cos();
                    let h = t * (c.abs() + s.abs());
                    for sign in [1.0, -1.0] {
                        rays.push(if self.kind == ConeKind::Cu {
                            Vec3::new(c, s, sign * h)
                        } else {
                            Vec3::new(sign * h, c, s)
                        });
                    }
                }
                rays
            }
        }
    }

    /// Ratio whose bound by `theta` defines the cone.
    pub fn ratio(&self, w: &Vec3) -> f64 {
        let (a, b, k) = (w[0].abs(), w[1].abs(), w[2].abs());
        match self.kind {
            ConeKind::U => (b + k) / a,
            ConeKind::S => (a + b) / k,
            ConeKind::Cu => k / (a + b),
            ConeKind::Cs => a / (b + k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeReport {
    pub kind: ConeKind,
    pub theta: f64,
    pub samples: usize,
    pub violations: usize,
    /// `theta - (largest image ratio)`; positive means strict invariance.
    pub min_margin: f64,
    /// Largest image ratio: the image lies in the cone of this aperture.
    pub nested_theta: f64,
    pub worst_point: [f64; 3],
    /// First violating base points (at most 64).
    pub violation_points: Vec<[f64; 3]>,
}

impl ConeReport {
    pub fn pass(&self) -> bool {
        self.violations == 0
    }
}

const CU_RAYS: usize = 32;

/// Margin of one base point; `-inf` when the image of a convex cone splits
/// across the two nappes.
fn point_margin(f: &DiffeoSpec, c: &ConeSpec, frame: &Mat3, frame_inv: &Mat3, rays: &[Vec3], x: &Vec3) -> f64 {
    let d = f.derivative(x);
    let m = if c.kind.is_forward() { d } else { d.try_inverse().expect("diffeomorphism derivative is invertible") };
    let act = frame_inv * m * frame;
    let lead = match c.kind {
        ConeKind::U => Some(0),
        ConeKind::S => Some(2),
        _ => None,
    };
    let mut worst = f64::INFINITY;
    let mut sign = 0.0;
    for r in rays {
        let w = act * r;
        if let Some(i) = lead {
            let s = w[i].signum();
            if sign == 0.0 {
                sign = s;
            } else if s != sign {
                return f64::NEG_INFINITY;
            }
        }
        let margin = c.theta - c.ratio(&w);
        worst = worst.min(if margin.is_nan() { f64::NEG_INFINITY } else { margin });
    }
    worst
}

/// Checks `Df(x) C subset C` (forward kinds) or `Df(x)^{-1} C subset C`
/// (backward kinds) at every sample point.
pub fn cone_invariance_check(f: &DiffeoSpec, c: &ConeSpec, samples: &[Vec3]) -> ConeReport {
    let frame = c.frame();
    let frame_inv = frame.try_inverse().expect("eigenbasis is a basis");
    let rays = c.boundary_rays(CU_RAYS);
    let margins: Vec<f64> =
        samples.par_iter().map(|x| point_margin(f, c, &frame, &frame_inv, &rays, x)).collect();
    let mut report = ConeReport {
        kind: c.kind,
        theta: c.theta,
        samples: samples.len(),
        violations: 0,
        min_margin: f64::INFINITY,
        nested_theta: 0.0,
        worst_point: [f64::NAN; 3],
        violation_points: Vec::new(),
    };
    for (x, &m) in samples.iter().zip(&margins) {
        if m < report.min_margin {
            report.min_margin = m;
            report.worst_point = [x[0], x[1], x[2]];
        }
        if m <= 0.0 {
            report.violations += 1;
            if report.violation_points.len() < 64 {
                report.violation_points.push([x[0], x[1], x[2]]);
            }
        }
    }
    report.nested_theta = c.theta - report.min_margin;
    report
}

/// Unit vectors of the three bundles at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bundles {
    pub e_s: Vec3,
    pub e_c: Vec3,
    pub e_u: Vec3,
}

impl Bundles {
    fn max_change(&self, other: &Bundles) -> f64 {
        (self.e_s - other.e_s).norm().max((self.e_c - other.e_c).norm()).max((self.e_u - other.e_u).norm())
    }

    pub fn get(&self, sigma: Bundle) -> Vec3 {
        match sigma {
            Bundle::S => self.e_s,
            Bundle::C => self.e_c,
            Bundle::U => self.e_u,
        }
    }

    /// Smallest angle between two of the three lines.
    pub fn min_angle(&self) -> f64 {
        let ang = |a: &Vec3, b: &Vec3| a.dot(b).abs().min(1.0).acos();
        ang(&self.e_s, &self.e_c).min(ang(&self.e_c, &self.e_u)).min(ang(&self.e_s, &self.e_u))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bundle {
    S,
    C,
    U,
}

impl Bundle {
    pub const ALL: [Bundle; 3] = [Bundle::S, Bundle::C, Bundle::U];
}

fn orient(v: Vec3, reference: &Vec3) -> Vec3 {
    let v = v.normalize();
    if v.dot(reference) < 0.0 {
        -v
    } else {
        v
    }
}

/// Linear-model reference data shared by the power iterations.
#[derive(Debug, Clone)]
pub struct Reference {
    pub e_u: Vec3,
    pub e_c: Vec3,
    pub e_s: Vec3,
    /// Covector annihilating `e_u, e_c`.
    pub n_cu: Vec3,
    /// Covector annihilating `e_c, e_s`.
    pub n_cs: Vec3,
}

impl Reference {
    pub fn new(spectrum: &LinearSpectrum) -> Self {
        let frame = spectrum.eigenframe();
        let inv = frame.try_inverse().expect("eigenbasis is a basis");
        Self {
            e_u: spectrum.e_u_vec(),
            e_c: spectrum.e_c_vec(),
            e_s: spectrum.e_s_vec(),
            n_cu: inv.row(2).transpose().normalize(),
            n_cs: inv.row(0).transpose().normalize(),
        }
    }
}

/// Bundles along `x_0 .. x_{n-1}` of the orbit of `x`, each from tails of
/// length `tail` beyond both ends. Returns the orbit points, the bundles and
/// the derivatives `Dg(x_k)`.
pub fn bundles_along_orbit(
    f: &DiffeoSpec,
    r: &Reference,
    x: &Vec3,
    n: usize,
    tail: usize,
) -> (Vec<Vec3>, Vec<Bundles>, Vec<Mat3>) {
    let len = n + 2 * tail;
    let mut orbit = vec![Vec3::zeros(); len + 1];
    orbit[tail] = *x;
    for k in (0..tail).rev() {
        orbit[k] = f.map_torus_inverse(&orbit[k + 1]);
    }
    let mut derivs = Vec::with_capacity(len + 1);
    for k in tail..len {
        let (y, d) = f.eval_with_derivative(&orbit[k]);
        orbit[k + 1] = crate::torus::project_vec(&y);
        derivs.push(d);
    }
    let head: Vec<Mat3> = (0..tail).map(|k| f.derivative(&orbit[k])).collect();
    let derivs: Vec<Mat3> = head.into_iter().chain(derivs).collect();

    let mut e_u = vec![Vec3::zeros(); n];
    let mut n_cu = vec![Vec3::zeros(); n];
    let mut v = r.e_u;
    let mut xi = r.n_cu;
    for k in 0..tail + n {
        if k >= tail {
            e_u[k - tail] = v;
            n_cu[k - tail] = xi;
        }
        v = (derivs[k] * v).normalize();
        let dinv_t = derivs[k].try_inverse().expect("invertible derivative").transpose();
        xi = (dinv_t * xi).normalize();
    }
    let mut e_s = vec![Vec3::zeros(); n];
    let mut n_cs = vec![Vec3::zeros(); n];
    let mut v = r.e_s;
    let mut xi = r.n_cs;
    for k in (tail..len).rev() {
        // vectors live at orbit[k + 1]; pull back to orbit[k]
        v = (derivs[k].try_inverse().expect("invertible derivative") * v).normalize();
        xi = (derivs[k].transpose() * xi).normalize();
        if k < tail + n {
            e_s[k - tail] = v;
            n_cs[k - tail] = xi;
        }
    }
    let bundles = (0..n)
        .map(|i| Bundles {
            e_u: orient(e_u[i], &r.e_u),
            e_s: orient(e_s[i], &r.e_s),
            e_c: orient(n_cu[i].cross(&n_cs[i]), &r.e_c),
        })
        .collect();
    (orbit[tail..tail + n].to_vec(), bundles, derivs[tail..tail + n].to_vec())
}

/// Bundles at a single point with the given tail length.
pub fn bundles_at(f: &DiffeoSpec, r: &Reference, x: &Vec3, tail: usize) -> Bundles {
    bundles_along_orbit(f, r, x, 1, tail).1[0]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplittingOptions {
    pub initial_tail: usize,
    pub max_tail: usize,
    /// Early exit once doubling the tail changes the bundles by less than this.
    pub tol: f64,
    /// A point whose last doubling change stays above this is non-convergent.
    pub fail_tol: f64,
}

impl Default for SplittingOptions {
    fn default() -> Self {
        Self { initial_tail: 4, max_tail: 60, tol: 1e-10, fail_tol: 1e-6 }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplittingError {
    #[error("splitting did not converge at {point:?}: doubling changes {trace:?}")]
    NonConvergence { point: [f64; 3], trace: Vec<f64> },
}

/// Sampled splitting with per-point invariance residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplittingField {
    pub points: Vec<[f64; 3]>,
    pub e_s: Vec<[f64; 3]>,
    pub e_c: Vec<[f64; 3]>,
    pub e_u: Vec<[f64; 3]>,
    /// `||normalize(Df E(x)) - E(f x)||` for (s, c, u), sign-resolved.
    pub residuals: Vec<[f64; 3]>,
    /// Tail length at which each point stopped.
    pub tails: Vec<usize>,
    /// Last doubling change per point.
    pub doubling_change: Vec<f64>,
    pub min_angle: f64,
}

impl SplittingField {
    pub fn bundles(&self, i: usize) -> Bundles {
        Bundles { e_s: Vec3::from(self.e_s[i]), e_c: Vec3::from(self.e_c[i]), e_u: Vec3::from(self.e_u[i]) }
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().flat_map(|r| r.iter().copied()).fold(0.0, f64::max)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn converge_at(f: &DiffeoSpec, r: &Reference, x: &Vec3, opts: &SplittingOptions) -> (Bundles, usize, Vec<f64>) {
    let mut tail = opts.initial_tail.max(1);
    let mut prev = bundles_at(f, r, x, tail);
    let mut trace = Vec::new();
    while tail < opts.max_tail {
        tail = (2 * tail).min(opts.max_tail);
        let next = bundles_at(f, r, x, tail);
        let change = next.max_change(&prev);
        trace.push(change);
        prev = next;
        if change < opts.tol {
            break;
        }
    }
    (prev, tail, trace)
}

fn sign_resolved(a: &Vec3, b: &Vec3) -> f64 {
    (a - b).norm().min((a + b).norm())
}

/// Bundles at each seed by tail doubling, with invariance residuals.
pub fn refine_splitting(
    f: &DiffeoSpec,
    spectrum: &LinearSpectrum,
    seeds: &[Vec3],
    opts: &SplittingOptions,
) -> Result<SplittingField, SplittingError> {
    let r = Reference::new(spectrum);
    let per_point: Vec<_> = seeds
        .par_iter()
        .map(|x| {
            let (b, tail, trace) = converge_at(f, &r, x, opts);
            let (fx, d) = f.eval_with_derivative(x);
            let fx = crate::torus::project_vec(&fx);
            let (bf, _, _) = converge_at(f, &r, &fx, opts);
            let res = [
                sign_resolved(&(d * b.e_s).normalize(), &bf.e_s),
                sign_resolved(&(d * b.e_c).normalize(), &bf.e_c),
                sign_resolved(&(d * b.e_u).normalize(), &bf.e_u),
            ];
            (b, tail, trace, res)
        })
        .collect();
    let arr = |v: &Vec3| [v[0], v[1], v[2]];
    let mut field = SplittingField {
        points: Vec::with_capacity(seeds.len()),
        e_s: Vec::with_capacity(seeds.len()),
        e_c: Vec::with_capacity(seeds.len()),
        e_u: Vec::with_capacity(seeds.len()),
        residuals: Vec::with_capacity(seeds.len()),
        tails: Vec::with_capacity(seeds.len()),
        doubling_change: Vec::with_capacity(seeds.len()),
        min_angle: f64::INFINITY,
    };
    for (x, (b, tail, trace, res)) in seeds.iter().zip(per_point) {
        let last = trace.last().copied().unwrap_or(f64::INFINITY);
        if last > opts.fail_tol {
            return Err(SplittingError::NonConvergence { point: arr(x), trace });
        }
        field.points.push(arr(x));
        field.e_s.push(arr(&b.e_s));
        field.e_c.push(arr(&b.e_c));
        field.e_u.push(arr(&b.e_u));
        field.residuals.push(res);
        field.tails.push(tail);
        field.doubling_change.push(last);
        field.min_angle = field.min_angle.min(b.min_angle());
    }
    Ok(field)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsolutePhReport {
    /// `min_y ||Df(y) v^c|| - max_x ||Df(x) v^s||`.
    pub min_gap_sc: f64,
    /// `min_z ||Df(z) v^u|| - max_y ||Df(y) v^c||`.
    pub min_gap_cu: f64,
    pub expansion_min: f64,
    pub contraction_max: f64,
    pub center_min: f64,
    pub center_max: f64,
    pub pass: bool,
}

/// Absolute partial hyperbolicity on the sampled field. The minimum over all
/// triples `(x, y, z)` of sample points is attained at the extremes, so the
/// check is exhaustive over the sample.
pub fn absolute_ph_check(f: &DiffeoSpec, s: &SplittingField) -> AbsolutePhReport {
    let norms: Vec<[f64; 3]> = (0..s.len())
        .into_par_iter()
        .map(|i| {
            let d = f.derivative(&Vec3::from(s.points[i]));
            let b = s.bundles(i);
            [(d * b.e_s).norm(), (d * b.e_c).norm(), (d * b.e_u).norm()]
        })
        .collect();
    let max = |k: usize| norms.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max);
    let min = |k: usize| norms.iter().map(|v| v[k]).fold(f64::INFINITY, f64::min);
    let (contraction_max, center_min, center_max, expansion_min) = (max(0), min(1), max(1), min(2));
    let min_gap_sc = center_min - contraction_max;
    let min_gap_cu = expansion_min - center_max;
    AbsolutePhReport {
        min_gap_sc,
        min_gap_cu,
        expansion_min,
        contraction_max,
        center_min,
        center_max,
        pass: min_gap_sc > 0.0 && min_gap_cu > 0.0 && contraction_max < 1.0 && expansion_min > 1.0,
    }
}
