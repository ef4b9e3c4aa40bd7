//! Volume-preserving perturbation primitives and the DA construction.
//!
//! Two primitives carry the construction:
//!
//! * [`AxisShear`]: one torus coordinate translated by a periodic function of
//!   another, `x_axis += F(x_driver)`. The Jacobian is unipotent, so the
//!   determinant is exactly one. A pair of shears (`y += F(x)` then
//!   `x += G(y)`) is the center-exponent boost: the center bundle is tilted
//!   toward the unstable one by `G'` and the unstable component feeds back
//!   into the center coordinate through `F'`. `F` and `G` vanish on a tube
//!   around the fixed point, which is therefore left alone.
//! * [`LocalSurgery`]: a local map around a fixed point given, in the
//!   eigenframe of `Df(p)`, by the mixed generating function
//!   `W(c, s'; u) = c s' (1 + (kappa - 1) chi(u, c, s'))` with a C^inf bump
//!   `chi`. It is the identity outside the ball, exactly area-preserving in
//!   every `(c, s)` slice, and its derivative at `p` is `diag(1, kappa, 1/kappa)`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::linear_anosov::{
    characteristic_coefficients, family_spectrum, make_inverse_family_matrix, real_spectrum, LinearError,
    LinearSpectrum, Mat3, Vec3, DEFAULT_ROOT_TOL,
};
use crate::sampling::{uniform_points, QuasiRandom, SeedStream};
use crate::splitting::{cone_invariance_check, ConeKind, ConeReport, ConeSpec};
use crate::torus::{torus_distance, DiffeoSpec, TorusPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerturbationError {
    #[error("perturbation rejected: {kind:?} cone fails at {point:?} (margin {margin:e})")]
    Rejected { kind: ConeKind, point: [f64; 3], margin: f64, report: Box<ConeReport> },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Linear(#[from] LinearError),
    #[error("stage {stage:?} failed: {source}")]
    Stage { stage: BuildStage, source: Box<PerturbationError> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuildStage {
    Spectrum,
    Boost,
    Schedule,
    Surgery,
}

// C^inf transition pieces: e(t) = exp(-1/t) for t > 0, with two derivatives.
fn flat_exp(t: f64) -> (f64, f64, f64) {
    if t <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let e = (-1.0 / t).exp();
    let t2 = t * t;
    (e, e / t2, e * (1.0 / (t2 * t2) - 2.0 / (t2 * t)))
}

/// Smooth step `e(t) / (e(t) + e(1 - t))`: 0 for t <= 0, 1 for t >= 1.
/// Returns the value and two derivatives.
fn smooth_step2(t: f64) -> (f64, f64, f64) {
    if t <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if t >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let (a, a1, a2) = flat_exp(t);
    let (b, b1, b2) = flat_exp(1.0 - t);
    let (b1, b2) = (-b1, b2);
    let d = a + b;
    let d1 = a1 + b1;
    let num = a1 * b - a * b1;
    let num1 = a2 * b - a * b2;
    (a / d, num / (d * d), (num1 * d - 2.0 * num * d1) / (d * d * d))
}

fn smooth_step(t: f64) -> (f64, f64) {
    let (v, d, _) = smooth_step2(t);
    (v, d)
}

/// `x[axis] += F(x[driver])` with
/// `F(t) = A / (2 pi m) * sin(2 pi m tau) * W(tau)`, `tau = t - anchor`, and
/// `W` a smooth window vanishing within `clearance` of the anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisShear {
    pub axis: usize,
    pub driver: usize,
    pub amplitude: f64,
    pub wavenumber: u32,
    pub clearance: f64,
    pub ramp: f64,
    pub anchor: f64,
}

impl AxisShear {
    pub fn new(axis: usize, driver: usize, amplitude: f64, wavenumber: u32, clearance: f64, ramp: f64, anchor: f64) -> Self {
        assert!(axis < 3 && driver < 3 && axis != driver, "shear axis and driver must be distinct coordinates");
        assert!(wavenumber >= 1);
        assert!(clearance >= 0.0 && ramp > 0.0 && clearance + ramp <= 0.5);
        Self { axis, driver, amplitude, wavenumber, clearance, ramp, anchor }
    }

    /// `(F(t), F'(t))`.
    pub fn profile(&self, t: f64) -> (f64, f64) {
        let tau = t - self.anchor;
        let r = tau - tau.round();
        let d = r.abs();
        let (w, dw_dd) = smooth_step((d - self.clearance) / self.ramp);
        if w == 0.0 && dw_dd == 0.0 {
            return (0.0, 0.0);
        }
        let dw = dw_dd / self.ramp * r.signum();
        let k = 2.0 * PI * self.wavenumber as f64;
        let (s, c) = (k * r).sin_cos();
        let a = self.amplitude;
        (a / k * s * w, a * c * w + a / k * s * dw)
    }

    /// True where the shear moves points.
    pub fn in_support(&self, x: &Vec3) -> bool {
        let tau = x[self.driver] - self.anchor;
        (tau - tau.round()).abs() > self.clearance
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        let mut y = *x;
        y[self.axis] += self.profile(x[self.driver]).0;
        y
    }

    pub fn apply_inverse(&self, y: &Vec3) -> Vec3 {
        let mut x = *y;
        x[self.axis] -= self.profile(y[self.driver]).0;
        x
    }

    pub fn apply_with_jacobian(&self, x: &Vec3) -> (Vec3, Mat3) {
        let (v, dv) = self.profile(x[self.driver]);
        let mut y = *x;
        y[self.axis] += v;
        let mut j = Mat3::identity();
        j[(self.axis, self.driver)] = dv;
        (y, j)
    }
}

/// Radial cutoff, smooth step in log-radius: 1 for `|w| <= rho e^{-L}`,
/// 0 for `|w| >= rho`. With `q = |w|^2 / rho^2` it is `S(-ln q / (2L))`, so
/// `w_i chi_j` and `w_i w_j chi_ij` are `O(1/L)`. Returns value, gradient and
/// Hessian in `w`.
fn radial_bump(w: &Vec3, rho: f64, log_width: f64) -> (f64, Vec3, Mat3) {
    let rho2 = rho * rho;
    let q = w.norm_squared() / rho2;
    if q >= 1.0 {
        return (0.0, Vec3::zeros(), Mat3::zeros());
    }
    let u = -q.ln() / (2.0 * log_width);
    if u >= 1.0 {
        return (1.0, Vec3::zeros(), Mat3::zeros());
    }
    let (s, s1, s2) = smooth_step2(u);
    let du = -1.0 / (2.0 * log_width * q);
    let ddu = 1.0 / (2.0 * log_width * q * q);
    let b1 = s1 * du;
    let b2 = s2 * du * du + s1 * ddu;
    let grad = w * (2.0 * b1 / rho2);
    let hess = (w * w.transpose()) * (4.0 * b2 / (rho2 * rho2)) + Mat3::identity() * (2.0 * b1 / rho2);
    (s, grad, hess)
}

/// Local map around a fixed point with derivative `diag(1, kappa, 1/kappa)`
/// in the frame `(e_u, e_c, e_s)` of the unperturbed derivative there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSurgery {
    pub center: [f64; 3],
    /// Columns (e_u, e_c, e_s), stored row-major.
    pub frame: [[f64; 3]; 3],
    pub frame_inv: [[f64; 3]; 3],
    pub kappa: f64,
    /// Ball radius in frame coordinates.
    pub radius: f64,
    /// `L`: the cutoff is identically one on the ball of radius `radius e^{-L}`.
    pub log_width: f64,
}

fn to_rows(m: &Mat3) -> [[f64; 3]; 3] {
    [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]]
}

fn from_rows(r: &[[f64; 3]; 3]) -> Mat3 {
    Mat3::from_fn(|i, j| r[i][j])
}

struct SurgeryLocal {
    offset: Vec3,
    w: Vec3,
}

impl LocalSurgery {
    fn local(&self, x: &Vec3) -> Option<SurgeryLocal> {
        let c = Vec3::from(self.center);
        let d = x - c;
        let k = d.map(|t| t.round());
        let y = d - k;
        let w = from_rows(&self.frame_inv) * y;
        if w.norm_squared() >= self.radius * self.radius {
            return None;
        }
        Some(SurgeryLocal { offset: c + k, w })
    }

    pub fn in_support(&self, x: &Vec3) -> bool {
        self.local(x).is_some()
    }

    fn chi(&self, u: f64, c: f64, s: f64) -> (f64, Vec3, Mat3) {
        radial_bump(&Vec3::new(u, c, s), self.radius, self.log_width)
    }

    /// Solves for `s'` given `(u, c, s)`; returns `(s', c')`.
    fn forward_local(&self, w: &Vec3) -> (f64, f64) {
        let k = self.kappa - 1.0;
        let (u, c, s) = (w[0], w[1], w[2]);
        let mut sp = s / self.kappa;
        for _ in 0..60 {
            let (chi, g, h) = self.chi(u, c, sp);
            let g1 = chi + c * g[1];
            let phi = sp * (1.0 + k * g1) - s;
            let dphi = 1.0 + k * g1 + sp * k * (g[2] + c * h[(1, 2)]);
            let step = phi / dphi;
            sp -= step;
            if step.abs() <= 1e-17 * (1.0 + sp.abs()) {
                break;
            }
        }
        let (chi, g, _) = self.chi(u, c, sp);
        let cp = c * (1.0 + k * (chi + sp * g[2]));
        (sp, cp)
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        match self.local(x) {
            None => *x,
            Some(l) => {
                let (sp, cp) = self.forward_local(&l.w);
                l.offset + from_rows(&self.frame) * Vec3::new(l.w[0], cp, sp)
            }
        }
    }

    pub fn apply_inverse(&self, y: &Vec3) -> Vec3 {
        match self.local(y) {
            None => *y,
            Some(l) => {
                let k = self.kappa - 1.0;
                let (u, cp, sp) = (l.w[0], l.w[1], l.w[2]);
                let mut c = cp / self.kappa;
                for _ in 0..60 {
                    let (chi, g, h) = self.chi(u, c, sp);
                    let psi = c * (1.0 + k * (chi + sp * g[2])) - cp;
                    let dpsi = 1.0 + k * (chi + sp * g[2]) + c * k * (g[1] + sp * h[(2, 1)]);
                    let step = psi / dpsi;
                    c -= step;
                    if step.abs() <= 1e-17 * (1.0 + c.abs()) {
                        break;
                    }
                }
                let (chi, g, _) = self.chi(u, c, sp);
                let s = sp * (1.0 + k * (chi + c * g[1]));
                l.offset + from_rows(&self.frame) * Vec3::new(u, c, s)
            }
        }
    }

    pub fn apply_with_jacobian(&self, x: &Vec3) -> (Vec3, Mat3) {
        let Some(l) = self.local(x) else {
            return (*x, Mat3::identity());
        };
        let k = self.kappa - 1.0;
        let (u, c) = (l.w[0], l.w[1]);
        let (sp, cp) = self.forward_local(&l.w);
        let (chi, g, h) = self.chi(u, c, sp);
        let g1 = chi + c * g[1];
        let g2 = chi + sp * g[2];
        // Phi(u, c, s') = s'(1 + k G1) - s
        let phi_u = sp * k * (g[0] + c * h[(1, 0)]);
        let phi_c = sp * k * (2.0 * g[1] + c * h[(1, 1)]);
        let phi_sp = 1.0 + k * g1 + sp * k * (g[2] + c * h[(1, 2)]);
        // Psi(u, c, s') = c (1 + k G2)
        let psi_u = c * k * (g[0] + sp * h[(2, 0)]);
        let psi_c = 1.0 + k * g2 + c * k * (g[1] + sp * h[(2, 1)]);
        let psi_sp = c * k * (2.0 * g[2] + sp * h[(2, 2)]);
        let (sp_u, sp_c, sp_s) = (-phi_u / phi_sp, -phi_c / phi_sp, 1.0 / phi_sp);
        let jw = Mat3::new(
            1.0,
            0.0,
            0.0,
            psi_u + psi_sp * sp_u,
            psi_c + psi_sp * sp_c,
            psi_sp * sp_s,
            sp_u,
            sp_c,
            sp_s,
        );
        let frame = from_rows(&self.frame);
        let y = l.offset + frame * Vec3::new(u, cp, sp);
        (y, frame * jw * from_rows(&self.frame_inv))
    }
}

/// Building blocks a [`DiffeoSpec`] stack is made of.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "primitive", rename_all = "kebab-case")]
pub enum Primitive {
    AxisShear(AxisShear),
    LocalSurgery(LocalSurgery),
    /// `x -> factor * x`. Not a torus map; exists as a non-conservative control.
    UniformScale { factor: f64 },
    /// `x -> x + offset`.
    Translation { offset: [f64; 3] },
}

impl Primitive {
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        match self {
            Primitive::AxisShear(s) => s.apply(x),
            Primitive::LocalSurgery(s) => s.apply(x),
            Primitive::UniformScale { factor } => x * *factor,
            Primitive::Translation { offset } => x + Vec3::from(*offset),
        }
    }

    pub fn apply_inverse(&self, y: &Vec3) -> Vec3 {
        match self {
            Primitive::AxisShear(s) => s.apply_inverse(y),
            Primitive::LocalSurgery(s) => s.apply_inverse(y),
            Primitive::UniformScale { factor } => y / *factor,
            Primitive::Translation { offset } => y - Vec3::from(*offset),
        }
    }

    pub fn apply_with_jacobian(&self, x: &Vec3) -> (Vec3, Mat3) {
        match self {
            Primitive::AxisShear(s) => s.apply_with_jacobian(x),
            Primitive::LocalSurgery(s) => s.apply_with_jacobian(x),
            Primitive::UniformScale { factor } => (x * *factor, Mat3::identity() * *factor),
            Primitive::Translation { offset } => (x + Vec3::from(*offset), Mat3::identity()),
        }
    }

    pub fn in_support(&self, x: &Vec3) -> bool {
        match self {
            Primitive::AxisShear(s) => s.in_support(x),
            Primitive::LocalSurgery(s) => s.in_support(x),
            Primitive::UniformScale { .. } | Primitive::Translation { .. } => true,
        }
    }
}

/// Parameters of the center-exponent boost (a pair of axis shears).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostSpec {
    /// `(lifted, driver)`: first `x[lifted] += F(x[driver])`, then
    /// `x[driver] += G(x[lifted])`.
    pub plane: (usize, usize),
    pub lift_amplitude: f64,
    pub return_amplitude: f64,
    pub wavenumber: u32,
    pub clearance: f64,
    pub ramp: f64,
    /// Point kept fixed: both shears vanish near its coordinates.
    pub center: TorusPoint,
}

impl Default for BoostSpec {
    fn default() -> Self {
        Self {
            plane: (1, 0),
            lift_amplitude: 5.0,
            return_amplitude: 0.05,
            wavenumber: 2,
            clearance: 0.05,
            ramp: 0.15,
            center: TorusPoint::origin(),
        }
    }
}

impl BoostSpec {
    pub fn shears(&self) -> (AxisShear, AxisShear) {
        let (lifted, driver) = self.plane;
        let first = AxisShear::new(
            lifted,
            driver,
            self.lift_amplitude,
            self.wavenumber,
            self.clearance,
            self.ramp,
            self.center.0[driver],
        );
        let second = AxisShear::new(
            driver,
            lifted,
            self.return_amplitude,
            self.wavenumber,
            self.clearance,
            self.ramp,
            self.center.0[lifted],
        );
        (first, second)
    }
}

/// How perturbation results are certified by cones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifyOptions {
    pub theta: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self { theta: 0.1, samples: 20_000, seed: 0 }
    }
}

/// Runs all four cone checks on quasi-random points.
pub fn certify_cones(f: &DiffeoSpec, basis: &LinearSpectrum, opts: &CertifyOptions) -> Vec<ConeReport> {
    let points = QuasiRandom::take_points(opts.seed, opts.samples);
    ConeKind::ALL
        .iter()
        .map(|&kind| cone_invariance_check(f, &ConeSpec::new(basis, opts.theta, kind), &points))
        .collect()
}

fn reject_on_violation(reports: &[ConeReport]) -> Result<(), PerturbationError> {
    for r in reports {
        if r.violations > 0 {
            return Err(PerturbationError::Rejected {
                kind: r.kind,
                point: r.worst_point,
                margin: r.min_margin,
                report: Box::new(r.clone()),
            });
        }
    }
    Ok(())
}

/// `f o (shear_2 o shear_1)`; rejected when the result leaves the cones.
pub fn center_boost(
    f: &DiffeoSpec,
    b: &BoostSpec,
    basis: &LinearSpectrum,
    cert: &CertifyOptions,
) -> Result<DiffeoSpec, PerturbationError> {
    if b.lift_amplitude == 0.0 && b.return_amplitude == 0.0 {
        return Ok(f.clone());
    }
    let (first, second) = b.shears();
    let mut g = f.precompose(Primitive::AxisShear(second)).precompose(Primitive::AxisShear(first));
    g.metadata.notes.push(format!(
        "center boost: plane {:?}, amplitudes ({}, {}), wavenumber {}",
        b.plane, b.lift_amplitude, b.return_amplitude, b.wavenumber
    ));
    reject_on_violation(&certify_cones(&g, basis, cert))?;
    Ok(g)
}

/// Prescribed derivative at a fixed point, sharing eigenspaces with the
/// current one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgerySpec {
    pub fixed_point: TorusPoint,
    pub target_derivative: [[f64; 3]; 3],
    /// Radius of the ball the surgery was (or will be) confined to.
    pub blend_radius: f64,
    /// Eigenvectors (e_u, e_c, e_s) of the unperturbed derivative at the point.
    pub matched_eigenspaces: [[f64; 3]; 3],
}

fn eigen_at(f: &DiffeoSpec, p: &TorusPoint) -> Result<(Mat3, LinearSpectrum), PerturbationError> {
    let d = f.derivative(&p.vec());
    let s = real_spectrum(&d, characteristic_coefficients(&d), DEFAULT_ROOT_TOL)?;
    Ok((d, s))
}

impl SurgerySpec {
    /// Target with the center eigenvalue replaced by `center_value`, unstable
    /// unchanged and the stable one fixed by `det = 1`.
    pub fn for_center_eigenvalue(f: &DiffeoSpec, p: TorusPoint, center_value: f64) -> Result<Self, PerturbationError> {
        let (_, s) = eigen_at(f, &p)?;
        let [vu, vc, vs] = s.values_ucs();
        let kappa = center_value / vc;
        if kappa <= 0.0 {
            return Err(PerturbationError::Precondition("center eigenvalue would change sign".into()));
        }
        let frame = s.eigenframe();
        let frame_inv = frame
            .try_inverse()
            .ok_or_else(|| PerturbationError::Precondition("singular eigenframe at fixed point".into()))?;
        let target = frame * Mat3::from_diagonal(&Vec3::new(vu, center_value, vs / kappa)) * frame_inv;
        let m = to_rows(&frame);
        Ok(Self {
            fixed_point: p,
            target_derivative: to_rows(&target),
            blend_radius: 0.0,
            matched_eigenspaces: [[m[0][0], m[1][0], m[2][0]], [m[0][1], m[1][1], m[2][1]], [m[0][2], m[1][2], m[2][2]]],
        })
    }

    pub fn target(&self) -> Mat3 {
        from_rows(&self.target_derivative)
    }
}

/// Nested balls around a fixed point with the return-time property.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodSchedule {
    pub fixed_point: TorusPoint,
    pub radii: Vec<f64>,
    pub certified_depth: usize,
    pub seeds_per_level: usize,
    /// Closest approach to the fixed point seen when certifying level `j + 1`.
    pub min_entry_distance: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub eps0: f64,
    pub j_max: usize,
    pub orbit_budget: usize,
    /// Fraction of the closest observed approach taken as the next radius.
    pub safety: f64,
    pub seed: u64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { eps0: 0.04, j_max: 5, orbit_budget: 10_000, safety: 0.5, seed: 0 }
    }
}

/// Closest torus distance to `p` of `f^k(x)`, `1 <= |k| <= steps`.
fn closest_approach(f: &DiffeoSpec, p: &Vec3, x: &Vec3, steps: usize) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0usize);
    let (mut fw, mut bw) = (*x, *x);
    for k in 1..=steps {
        fw = f.map_torus(&fw);
        bw = f.map_torus_inverse(&bw);
        let d = torus_distance(&fw, p).min(torus_distance(&bw, p));
        if d < best.0 {
            best = (d, k);
        }
    }
    best
}

fn seeds_outside(f_p: &Vec3, radius: f64, stream: SeedStream, budget: usize) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(budget);
    let mut round = 0u64;
    while out.len() < budget && round < 100 {
        let batch = uniform_points(stream.child(&format!("batch-{round}")), budget);
        out.extend(batch.into_iter().filter(|x| torus_distance(x, f_p) >= radius).take(budget - out.len()));
        round += 1;
    }
    out
}

/// Radii `eps_0 > eps_1 > ...` such that sampled points outside `V_j` do not
/// enter `B(p, eps_{j+1})` within `j + 1` iterates (forward or backward), and
/// `2 eps_j < 1/(j+1)`.
///
/// Each level takes `safety` times the closest approach observed over the
/// sampled orbits, which is the largest radius a bisection on the same
/// samples would accept, shrunk by the safety factor.
pub fn neighborhood_schedule(
    f: &DiffeoSpec,
    p: TorusPoint,
    params: &ScheduleParams,
) -> Result<NeighborhoodSchedule, PerturbationError> {
    let pv = p.vec();
    if torus_distance(&f.map_torus(&pv), &pv) > 1e-10 {
        return Err(PerturbationError::Precondition("schedule center is not a fixed point".into()));
    }
    if !(params.eps0 > 0.0 && params.eps0 < 0.5) {
        return Err(PerturbationError::Precondition(format!("eps0 = {} must lie in (0, 1/2)", params.eps0)));
    }
    let mut radii = vec![params.eps0];
    let mut approach = Vec::new();
    let master = SeedStream::new(params.seed, "neighborhood-schedule");
    for j in 0..params.j_max {
        let seeds = seeds_outside(&pv, radii[j], master.child(&format!("level-{}", j + 1)), params.orbit_budget);
        if seeds.len() < params.orbit_budget {
            break;
        }
        let dmin = seeds.iter().map(|x| closest_approach(f, &pv, x, j + 1).0).fold(f64::INFINITY, f64::min);
        let bound = 0.999 / (2.0 * (j + 2) as f64);
        let next = (params.safety * dmin).min(params.safety * radii[j]).min(bound);
        if !(next.is_finite() && next > 1e-12) {
            break;
        }
        radii.push(next);
        approach.push(dmin);
    }
    Ok(NeighborhoodSchedule {
        fixed_point: p,
        certified_depth: radii.len() - 1,
        radii,
        seeds_per_level: params.orbit_budget,
        min_entry_distance: approach,
    })
}

/// Brute-force re-check of level `level >= 1`: number of seeds outside
/// `V_{level-1}` whose orbit meets `B(p, eps_level)` within `level` iterates.
pub fn return_time_violations(f: &DiffeoSpec, schedule: &NeighborhoodSchedule, level: usize, seeds: &[Vec3]) -> usize {
    let pv = schedule.fixed_point.vec();
    let outer = schedule.radii[level - 1];
    let inner = schedule.radii[level];
    seeds
        .iter()
        .filter(|x| torus_distance(x, &pv) >= outer)
        .filter(|x| {
            let (mut fw, mut bw) = (**x, **x);
            for _ in 1..=level {
                fw = f.map_torus(&fw);
                bw = f.map_torus_inverse(&bw);
                if torus_distance(&fw, &pv) < inner || torus_distance(&bw, &pv) < inner {
                    return true;
                }
            }
            false
        })
        .count()
}

/// Log-radius width of the surgery cutoff.
pub const SURGERY_LOG_WIDTH: f64 = 3.0;

/// `g = f o Q` with `Q` the local surgery on `V_j`, `Dg(p) = target`.
pub fn fixed_point_surgery(
    f: &DiffeoSpec,
    s: &SurgerySpec,
    schedule: &NeighborhoodSchedule,
    j: usize,
    basis: &LinearSpectrum,
    cert: &CertifyOptions,
) -> Result<DiffeoSpec, PerturbationError> {
    let pv = s.fixed_point.vec();
    if torus_distance(&f.map_torus(&pv), &pv) > 1e-10 {
        return Err(PerturbationError::Precondition("surgery point is not fixed by f".into()));
    }
    if j > schedule.certified_depth {
        return Err(PerturbationError::Precondition(format!(
            "level {j} exceeds certified depth {}",
            schedule.certified_depth
        )));
    }
    let (d0, spec) = eigen_at(f, &s.fixed_point)?;
    let frame = spec.eigenframe();
    let frame_inv = frame
        .try_inverse()
        .ok_or_else(|| PerturbationError::Precondition("singular eigenframe at fixed point".into()))?;
    let target = s.target();
    if (target.determinant() - d0.determinant()).abs() > 1e-12 * d0.determinant().abs().max(1.0) {
        return Err(PerturbationError::Precondition("target changes the Jacobian determinant".into()));
    }
    let in_frame = frame_inv * target * frame;
    let scale = in_frame.amax().max(1.0);
    for i in 0..3 {
        for k in 0..3 {
            if i != k && in_frame[(i, k)].abs() > 1e-9 * scale {
                return Err(PerturbationError::Precondition("target does not share the eigenspaces of Df(p)".into()));
            }
        }
    }
    let vals = spec.values_ucs();
    let ratios = [in_frame[(0, 0)] / vals[0], in_frame[(1, 1)] / vals[1], in_frame[(2, 2)] / vals[2]];
    if (ratios[0] - 1.0).abs() > 1e-9 {
        return Err(PerturbationError::Precondition("target changes the unstable eigenvalue".into()));
    }
    if ratios[1] <= 0.0 || ratios[2] <= 0.0 {
        return Err(PerturbationError::Precondition("target reverses an eigenspace orientation".into()));
    }
    let kappa = ratios[1];
    if (kappa - 1.0).abs() < 1e-14 {
        return Ok(f.clone());
    }
    let radius = schedule.radii[j];
    let frame_norm = frame.norm(); // Frobenius, bounds the operator norm
    let surgery = LocalSurgery {
        center: s.fixed_point.0,
        frame: to_rows(&frame),
        frame_inv: to_rows(&frame_inv),
        kappa,
        radius: radius / frame_norm,
        log_width: SURGERY_LOG_WIDTH,
    };
    for prim in &f.stack {
        if let Primitive::AxisShear(sh) = prim {
            if sh.in_support(&pv) {
                return Err(PerturbationError::Precondition("an existing shear moves the fixed point".into()));
            }
        }
    }
    let mut g = f.precompose(Primitive::LocalSurgery(surgery));
    g.metadata.fixed_point = Some(s.fixed_point);
    g.metadata.notes.push(format!("fixed-point surgery: level {j}, radius {radius:e}, kappa {kappa}"));
    let mut points = QuasiRandom::take_points(cert.seed, cert.samples);
    points.extend(ball_points(&pv, radius, cert.samples / 4 + 1, cert.seed));
    let reports: Vec<ConeReport> = ConeKind::ALL
        .iter()
        .map(|&kind| cone_invariance_check(&g, &ConeSpec::new(basis, cert.theta, kind), &points))
        .collect();
    reject_on_violation(&reports)?;
    Ok(g)
}

/// Quasi-random points in the cube of half-width `radius` around `center`.
pub fn ball_points(center: &Vec3, radius: f64, count: usize, seed: u64) -> Vec<Vec3> {
    QuasiRandom::take_points(seed ^ 0xba11, count)
        .into_iter()
        .map(|q| center + (q * 2.0 - Vec3::repeat(1.0)) * radius)
        .collect()
}

/// Everything produced by the DA construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaExample {
    pub n: i64,
    pub j: usize,
    pub spectrum: LinearSpectrum,
    pub linear: DiffeoSpec,
    pub boosted: DiffeoSpec,
    pub schedule: NeighborhoodSchedule,
    pub surgery: SurgerySpec,
    pub map: DiffeoSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaParams {
    pub n: i64,
    pub j: usize,
    pub boost: BoostSpec,
    pub schedule: ScheduleParams,
    /// Center eigenvalue at the fixed point after surgery; `None` means `1 - alpha_n`.
    pub center_value: Option<f64>,
    pub cert: CertifyOptions,
}

impl DaParams {
    pub fn new(n: i64, j: usize) -> Self {
        Self {
            n,
            j,
            boost: BoostSpec::default(),
            schedule: ScheduleParams { j_max: j.max(5), ..Default::default() },
            center_value: None,
            cert: CertifyOptions::default(),
        }
    }
}

fn stage<T>(stage: BuildStage, r: Result<T, PerturbationError>) -> Result<T, PerturbationError> {
    r.map_err(|e| PerturbationError::Stage { stage, source: Box::new(e) })
}

/// Linear `B_n` -> boost -> schedule -> surgery at the origin.
pub fn build_da_example(params: &DaParams) -> Result<DaExample, PerturbationError> {
    let spectrum = stage(BuildStage::Spectrum, family_spectrum(params.n, DEFAULT_ROOT_TOL).map_err(Into::into))?;
    let b = stage(BuildStage::Spectrum, make_inverse_family_matrix(params.n).map_err(Into::into))?;
    let mut linear = DiffeoSpec::linear(b);
    linear.metadata.family_index = Some(params.n);
    linear.metadata.fixed_point = Some(TorusPoint::origin());
    let boosted = stage(BuildStage::Boost, center_boost(&linear, &params.boost, &spectrum, &params.cert))?;
    let p = TorusPoint::origin();
    let schedule = stage(BuildStage::Schedule, neighborhood_schedule(&boosted, p, &params.schedule))?;
    let center_value = params.center_value.unwrap_or(1.0 - spectrum.alpha_n);
    let mut surgery = stage(BuildStage::Surgery, SurgerySpec::for_center_eigenvalue(&boosted, p, center_value))?;
    let map = stage(
        BuildStage::Surgery,
        fixed_point_surgery(&boosted, &surgery, &schedule, params.j, &spectrum, &params.cert),
    )?;
    surgery.blend_radius = schedule.radii[params.j];
    Ok(DaExample { n: params.n, j: params.j, spectrum, linear, boosted, schedule, surgery, map })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::{equivariance_residual, linearization_of, volume_check};

    fn spectrum() -> LinearSpectrum {
        family_spectrum(100, DEFAULT_ROOT_TOL).unwrap()
    }

    fn linear() -> DiffeoSpec {
        DiffeoSpec::linear(make_inverse_family_matrix(100).unwrap())
    }

    fn finite_difference_jacobian(p: &Primitive, x: &Vec3) -> Mat3 {
        let h = 1e-6;
        let mut j = Mat3::zeros();
        for c in 0..3 {
            let mut xp = *x;
            let mut xm = *x;
            xp[c] += h;
            xm[c] -= h;
            let d = (p.apply(&xp) - p.apply(&xm)) / (2.0 * h);
            j.set_column(c, &d);
        }
        j
    }

    #[test]
    fn smooth_step_limits_and_derivative() {
        assert_eq!(smooth_step(-0.1), (0.0, 0.0));
        assert_eq!(smooth_step(1.2), (1.0, 0.0));
        let (v, _) = smooth_step(0.5);
        assert!((v - 0.5).abs() < 1e-15);
        for t in [0.1, 0.3, 0.7, 0.95] {
            let h = 1e-6;
            let fd = (smooth_step(t + h).0 - smooth_step(t - h).0) / (2.0 * h);
            assert!((fd - smooth_step(t).1).abs() < 1e-6);
        }
    }

    #[test]
    fn second_derivative_of_smooth_step() {
        for t in [0.05, 0.2, 0.5, 0.8, 0.97] {
            let h = 1e-5;
            let fd = (smooth_step2(t + h).1 - smooth_step2(t - h).1) / (2.0 * h);
            assert!((fd - smooth_step2(t).2).abs() < 1e-5 * (1.0 + fd.abs()), "t={t}");
        }
    }

    #[test]
    fn shear_profile_vanishes_near_anchor_and_matches_fd() {
        let s = AxisShear::new(1, 0, 5.0, 2, 0.05, 0.15, 0.0);
        for t in [-0.04, 0.0, 0.03, 0.99, 1.02] {
            assert_eq!(s.profile(t), (0.0, 0.0));
        }
        for t in [0.07, 0.13, 0.31, 0.5, 0.77, 0.9] {
            let h = 1e-6;
            let fd = (s.profile(t + h).0 - s.profile(t - h).0) / (2.0 * h);
            assert!((fd - s.profile(t).1).abs() < 1e-5, "t={t}");
        }
    }

    #[test]
    fn shear_jacobian_is_unipotent() {
        let p = Primitive::AxisShear(AxisShear::new(1, 0, 5.0, 2, 0.05, 0.15, 0.0));
        for x in QuasiRandom::take_points(1, 100_000) {
            let (_, j) = p.apply_with_jacobian(&x);
            assert!((j.determinant() - 1.0).abs() < 1e-12);
        }
    }

    fn sample_surgery(kappa: f64) -> LocalSurgery {
        let s = spectrum();
        let frame = s.eigenframe();
        LocalSurgery {
            center: [0.0; 3],
            frame: to_rows(&frame),
            frame_inv: to_rows(&frame.try_inverse().unwrap()),
            kappa,
            radius: 0.1,
            log_width: SURGERY_LOG_WIDTH,
        }
    }

    #[test]
    fn surgery_is_volume_preserving_and_invertible() {
        let q = sample_surgery(1.0 / 1.0103 * 0.9897);
        let prim = Primitive::LocalSurgery(q.clone());
        let pts: Vec<Vec3> = QuasiRandom::take_points(9, 20_000).into_iter().map(|p| (p - Vec3::repeat(0.5)) * 0.25).collect();
        let mut inside = 0;
        for x in &pts {
            let (y, j) = prim.apply_with_jacobian(x);
            assert!((j.determinant() - 1.0).abs() < 1e-10, "det {}", j.determinant());
            assert!((prim.apply_inverse(&y) - x).amax() < 1e-13);
            if q.in_support(x) {
                inside += 1;
                let fd = finite_difference_jacobian(&prim, x);
                assert!((fd - j).amax() < 1e-6);
            } else {
                assert_eq!(y, *x);
            }
        }
        assert!(inside > 1000);
    }

    #[test]
    fn surgery_derivative_at_center() {
        let q = sample_surgery(0.98);
        let (y, j) = q.apply_with_jacobian(&Vec3::zeros());
        assert_eq!(y, Vec3::zeros());
        let frame = from_rows(&q.frame);
        let expected = frame * Mat3::from_diagonal(&Vec3::new(1.0, 0.98, 1.0 / 0.98)) * from_rows(&q.frame_inv);
        assert!((j - expected).amax() < 1e-12);
    }

    #[test]
    fn zero_amplitude_boost_is_identity() {
        let f = linear();
        let b = BoostSpec { lift_amplitude: 0.0, return_amplitude: 0.0, ..Default::default() };
        let g = center_boost(&f, &b, &spectrum(), &CertifyOptions::default()).unwrap();
        for x in QuasiRandom::take_points(2, 100) {
            assert_eq!(g.lift_eval(&x), f.lift_eval(&x));
        }
    }

    #[test]
    fn boosted_map_is_conservative_equivariant_and_fixes_origin() {
        let g = center_boost(&linear(), &BoostSpec::default(), &spectrum(), &CertifyOptions::default()).unwrap();
        assert!(volume_check(&g, 100_000, 1e-12, 1).pass);
        assert!(equivariance_residual(&g, 1000, 2) < 1e-9);
        assert_eq!(g.lift_eval(&Vec3::zeros()), Vec3::zeros());
        assert_eq!(g.derivative(&Vec3::zeros()), *g.a());
        assert_eq!(linearization_of(&g, 32, 3).unwrap().entries(), make_inverse_family_matrix(100).unwrap().entries());
    }

    #[test]
    fn oversized_boost_is_rejected() {
        let b = BoostSpec { return_amplitude: 0.3, ..Default::default() };
        let r = center_boost(&linear(), &b, &spectrum(), &CertifyOptions { samples: 5000, ..Default::default() });
        assert!(matches!(r, Err(PerturbationError::Rejected { .. })));
    }

    #[test]
    fn schedule_level_zero_is_user_radius() {
        let g = center_boost(&linear(), &BoostSpec::default(), &spectrum(), &CertifyOptions::default()).unwrap();
        let s = neighborhood_schedule(&g, TorusPoint::origin(), &ScheduleParams { j_max: 0, ..Default::default() }).unwrap();
        assert_eq!(s.radii, vec![0.04]);
        assert_eq!(s.certified_depth, 0);
    }

    #[test]
    fn schedule_rejects_non_fixed_point() {
        let g = linear();
        let r = neighborhood_schedule(&g, TorusPoint([0.3, 0.1, 0.2]), &ScheduleParams::default());
        assert!(matches!(r, Err(PerturbationError::Precondition(_))));
    }

    #[test]
    fn surgery_requires_fixed_point_and_depth() {
        let f = linear();
        let s = spectrum();
        let sched = NeighborhoodSchedule {
            fixed_point: TorusPoint::origin(),
            radii: vec![0.04, 0.01],
            certified_depth: 1,
            seeds_per_level: 0,
            min_entry_distance: vec![],
        };
        let spec = SurgerySpec::for_center_eigenvalue(&f, TorusPoint::origin(), 1.0 - s.alpha_n).unwrap();
        let bad = SurgerySpec { fixed_point: TorusPoint([0.3, 0.3, 0.3]), ..spec.clone() };
        let cert = CertifyOptions { samples: 1000, ..Default::default() };
        assert!(matches!(
            fixed_point_surgery(&f, &bad, &sched, 1, &s, &cert),
            Err(PerturbationError::Precondition(_))
        ));
        assert!(matches!(
            fixed_point_surgery(&f, &spec, &sched, 2, &s, &cert),
            Err(PerturbationError::Precondition(_))
        ));
        let g = fixed_point_surgery(&f, &spec, &sched, 1, &s, &cert).unwrap();
        assert!((g.derivative(&Vec3::zeros()) - spec.target()).amax() < 1e-10);
    }

    #[test]
    fn oversized_surgery_fails_inside_the_ball() {
        let f = linear();
        let s = spectrum();
        let sched = NeighborhoodSchedule {
            fixed_point: TorusPoint::origin(),
            radii: vec![0.04, 0.01],
            certified_depth: 1,
            seeds_per_level: 0,
            min_entry_distance: vec![],
        };
        let cert = CertifyOptions { samples: 4000, ..Default::default() };
        let spec = SurgerySpec::for_center_eigenvalue(&f, TorusPoint::origin(), 0.3).unwrap();
        match fixed_point_surgery(&f, &spec, &sched, 1, &s, &cert) {
            Err(PerturbationError::Rejected { report, .. }) => {
                assert!(!report.violation_points.is_empty());
                for p in &report.violation_points {
                    assert!(torus_distance(&Vec3::from(*p), &Vec3::zeros()) < 0.01 * 3f64.sqrt());
                }
            }
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn no_op_surgery_and_idempotence() {
        let f = linear();
        let s = spectrum();
        let sched = NeighborhoodSchedule {
            fixed_point: TorusPoint::origin(),
            radii: vec![0.04, 0.01],
            certified_depth: 1,
            seeds_per_level: 0,
            min_entry_distance: vec![],
        };
        let cert = CertifyOptions { samples: 1000, ..Default::default() };
        let noop = SurgerySpec::for_center_eigenvalue(&f, TorusPoint::origin(), s.beta_c).unwrap();
        assert_eq!(fixed_point_surgery(&f, &noop, &sched, 1, &s, &cert).unwrap(), f);

        let spec = SurgerySpec::for_center_eigenvalue(&f, TorusPoint::origin(), 1.0 - s.alpha_n).unwrap();
        let once = fixed_point_surgery(&f, &spec, &sched, 1, &s, &cert).unwrap();
        let twice = fixed_point_surgery(&once, &spec, &sched, 1, &s, &cert).unwrap();
        for x in QuasiRandom::take_points(4, 2000) {
            let x = x * 0.02;
            assert_eq!(once.lift_eval(&x), twice.lift_eval(&x));
        }
    }
}
