//! Center leaves in the universal cover and the diagnostics built on them:
//! growth of iterated segments, large-scale comparison with the linear
//! model, foliated boxes, and the exponent-based absolute-continuity test.
//!
//! Iterating a leaf segment by mapping its points directly is useless after
//! a few steps: any error transverse to the leaf is multiplied by `beta_u`
//! per iterate. Segments are therefore iterated one step at a time, with the
//! image re-integrated from the image of its first vertex.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linear_anosov::{LinearSpectrum, Vec3};
use crate::sampling::{wilson95, Histogram};
use crate::splitting::{bundles_at, Reference};
use crate::torus::{project_vec, DiffeoSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FoliationError {
    #[error("center field turns by {angle:e} rad within the minimum step at {point:?}")]
    FieldFlip { point: [f64; 3], angle: f64 },
    #[error("endpoint separation {separation} does not exceed M = {m_hat}; use a longer segment")]
    ShortSegment { separation: f64, m_hat: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeafOptions {
    pub step: f64,
    pub min_step: f64,
    /// Largest angle between the first and last RK4 stage directions before
    /// the step is halved.
    pub max_turn: f64,
    /// Orbit tail used to evaluate the center field.
    pub tail: usize,
}

impl Default for LeafOptions {
    fn default() -> Self {
        Self { step: 0.01, min_step: 1e-6, max_turn: 0.05, tail: 12 }
    }
}

/// Unit center field, evaluated by on-the-fly power iteration.
pub struct CenterField<'a> {
    f: &'a DiffeoSpec,
    r: Reference,
    tail: usize,
}

impl<'a> CenterField<'a> {
    pub fn new(f: &'a DiffeoSpec, spectrum: &LinearSpectrum, tail: usize) -> Self {
        Self { f, r: Reference::new(spectrum), tail }
    }

    pub fn at(&self, x: &Vec3) -> Vec3 {
        bundles_at(self.f, &self.r, &project_vec(x), self.tail).e_c
    }

    fn aligned(&self, x: &Vec3, with: &Vec3) -> Vec3 {
        let v = self.at(x);
        if v.dot(with) < 0.0 {
            -v
        } else {
            v
        }
    }
}

/// Polyline along one center leaf in the cover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafSegment {
    pub vertices: Vec<[f64; 3]>,
    /// Cumulative polyline length at each vertex.
    pub arclength: Vec<f64>,
    /// Unit field direction at each vertex, oriented along the polyline.
    pub tangents: Vec<[f64; 3]>,
}

impl LeafSegment {
    pub fn vertex(&self, i: usize) -> Vec3 {
        Vec3::from(self.vertices[i])
    }

    pub fn start(&self) -> Vec3 {
        self.vertex(0)
    }

    pub fn end(&self) -> Vec3 {
        self.vertex(self.vertices.len() - 1)
    }

    pub fn length(&self) -> f64 {
        *self.arclength.last().unwrap_or(&0.0)
    }

    pub fn endpoint_distance(&self) -> f64 {
        (self.end() - self.start()).norm()
    }

    /// Distance from `p` to the polyline.
    pub fn distance_to(&self, p: &Vec3) -> f64 {
        let mut best = f64::INFINITY;
        for w in self.vertices.windows(2) {
            let (a, b) = (Vec3::from(w[0]), Vec3::from(w[1]));
            let ab = b - a;
            let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
            best = best.min((a + ab * t - p).norm());
        }
        if self.vertices.len() == 1 {
            best = (self.start() - p).norm();
        }
        best
    }

    fn translated(mut self, by: &Vec3) -> Self {
        for v in &mut self.vertices {
            *v = [v[0] + by[0], v[1] + by[1], v[2] + by[2]];
        }
        self
    }
}

fn arr(v: &Vec3) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

/// One-directional leaf from `x` for parameter length `length`, starting
/// along the field direction closest to `direction`.
pub fn integrate_center_ray(
    field: &CenterField,
    x: &Vec3,
    direction: &Vec3,
    length: f64,
    opts: &LeafOptions,
) -> Result<LeafSegment, FoliationError> {
    let mut t = field.aligned(x, direction);
    let mut pos = *x;
    let mut seg = LeafSegment { vertices: vec![arr(x)], arclength: vec![0.0], tangents: vec![arr(&t)] };
    let mut param = 0.0;
    let mut chord = 0.0;
    while param < length {
        let mut h = opts.step.min(length - param);
        loop {
            let k1 = t;
            let k2 = field.aligned(&(pos + k1 * (h / 2.0)), &k1);
            let k3 = field.aligned(&(pos + k2 * (h / 2.0)), &k1);
            let k4 = field.aligned(&(pos + k3 * h), &k1);
            let turn = k1.dot(&k4).clamp(-1.0, 1.0).acos();
            if turn <= opts.max_turn || h <= opts.min_step {
                if turn > opts.max_turn {
                    return Err(FoliationError::FieldFlip { point: arr(&pos), angle: turn });
                }
                let next = pos + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                chord += (next - pos).norm();
                pos = next;
                param += h;
                t = field.aligned(&pos, &k4);
                seg.vertices.push(arr(&pos));
                seg.arclength.push(chord);
                seg.tangents.push(arr(&t));
                break;
            }
            h /= 2.0;
        }
    }
    Ok(seg)
}

/// Leaf segment of total parameter length `arclength` centered at `x`,
/// vertices ordered along the positive center direction.
pub fn integrate_center_leaf(
    f: &DiffeoSpec,
    spectrum: &LinearSpectrum,
    x: &Vec3,
    arclength: f64,
    opts: &LeafOptions,
) -> Result<LeafSegment, FoliationError> {
    let field = CenterField::new(f, spectrum, opts.tail);
    let t0 = field.at(x);
    let fwd = integrate_center_ray(&field, x, &t0, arclength / 2.0, opts)?;
    let bwd = integrate_center_ray(&field, x, &(-t0), arclength / 2.0, opts)?;
    let mut vertices: Vec<[f64; 3]> = bwd.vertices.iter().rev().copied().collect();
    let mut tangents: Vec<[f64; 3]> = bwd.tangents.iter().rev().map(|v| [-v[0], -v[1], -v[2]]).collect();
    vertices.extend_from_slice(&fwd.vertices[1..]);
    tangents.extend_from_slice(&fwd.tangents[1..]);
    let mut arclength = Vec::with_capacity(vertices.len());
    let mut acc = 0.0;
    arclength.push(0.0);
    for w in vertices.windows(2) {
        acc += (Vec3::from(w[1]) - Vec3::from(w[0])).norm();
        arclength.push(acc);
    }
    Ok(LeafSegment { vertices, arclength, tangents })
}

/// `f~(y) - f~(x)` without forming large lift coordinates.
pub fn image_difference(f: &DiffeoSpec, x: &Vec3, y: &Vec3) -> Vec3 {
    f.a() * (y - x) + f.periodic_part(y) - f.periodic_part(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LargeScaleParams {
    pub m_hat: f64,
    pub c: f64,
    pub epsilon: f64,
    pub q_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub initial_separation: f64,
    /// Leaf length of the k-th image, `k = 0..=n`.
    pub lengths_k: Vec<f64>,
    pub endpoint_dists_k: Vec<f64>,
    /// `(1 + eps)^{2k} e^{k lambda^c_A} |a - b|`.
    pub bounds_k: Vec<f64>,
    pub upper_bound_ok: bool,
    pub k_range: (usize, usize),
    /// Largest `endpoint distance / bound` over `k >= 1`.
    pub max_bound_ratio: f64,
}

/// Iterates a segment `n` times and checks the endpoint-distance upper bound.
pub fn leaf_growth_check(
    f: &DiffeoSpec,
    spectrum: &LinearSpectrum,
    segment: &LeafSegment,
    n: usize,
    params: &LargeScaleParams,
    opts: &LeafOptions,
) -> Result<GrowthReport, FoliationError> {
    let sep0 = segment.endpoint_distance();
    if sep0 <= params.m_hat {
        return Err(FoliationError::ShortSegment { separation: sep0, m_hat: params.m_hat });
    }
    let field = CenterField::new(f, spectrum, opts.tail);
    let mut report = GrowthReport {
        initial_separation: sep0,
        lengths_k: vec![segment.length()],
        endpoint_dists_k: vec![sep0],
        bounds_k: vec![sep0],
        upper_bound_ok: true,
        k_range: (1, n),
        max_bound_ratio: 0.0,
    };
    let start = segment.start();
    let mut cur = segment.clone().translated(&(-start.map(|c| c.floor())));
    for k in 1..=n {
        let v0 = cur.start();
        let mut length = 0.0;
        let mut first = Vec3::zeros();
        for (i, w) in cur.vertices.windows(2).enumerate() {
            let d = image_difference(f, &Vec3::from(w[0]), &Vec3::from(w[1]));
            if i == 0 {
                first = d;
            }
            length += d.norm();
        }
        let y0 = project_vec(&f.lift_eval(&v0));
        cur = integrate_center_ray(&field, &y0, &first, length, opts)?;
        let dist = cur.endpoint_distance();
        let bound = (1.0 + params.epsilon).powi(2 * k as i32) * (k as f64 * spectrum.lambda_c).exp() * sep0;
        report.lengths_k.push(cur.length());
        report.endpoint_dists_k.push(dist);
        report.bounds_k.push(bound);
        report.max_bound_ratio = report.max_bound_ratio.max(dist / bound);
        if dist > bound {
            report.upper_bound_ok = false;
        }
    }
    Ok(report)
}

/// Same-leaf vertex pairs `(i, j)`, `i < j`, on a stride.
fn leaf_pairs(leaf: &LeafSegment, stride: usize) -> Vec<(usize, usize)> {
    let idx: Vec<usize> = (0..leaf.vertices.len()).step_by(stride.max(1)).collect();
    let mut out = Vec::new();
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            out.push((i, j));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuasiIsometryReport {
    pub params: LargeScaleParams,
    /// `max d_leaf / (d_cover + 1)` before clamping to 1.
    pub raw_ratio: f64,
    /// `max d_leaf / d_cover` over pairs with `d_cover >= 1`.
    pub far_stretch: f64,
    pub pairs: usize,
}

/// Q from same-leaf pairs; M as the largest separation at which a pair fails
/// either the nonlinear/linear ratio bound at `k = 1` or the linear center
/// stretch bound.
pub fn quasi_isometry_estimate(
    f: &DiffeoSpec,
    spectrum: &LinearSpectrum,
    leaves: &[LeafSegment],
    c: f64,
    epsilon: f64,
    stride: usize,
) -> QuasiIsometryReport {
    let per_leaf: Vec<(f64, f64, f64, f64, usize)> = leaves
        .par_iter()
        .map(|leaf| {
            let (mut raw, mut far, mut m_fail, mut min_sep, mut count) = (0.0f64, 0.0f64, 0.0f64, f64::INFINITY, 0usize);
            for (i, j) in leaf_pairs(leaf, stride) {
                let (x, y) = (leaf.vertex(i), leaf.vertex(j));
                let d_leaf = leaf.arclength[j] - leaf.arclength[i];
                let d_cover = (y - x).norm();
                raw = raw.max(d_leaf / (d_cover + 1.0));
                if d_cover >= 1.0 {
                    far = far.max(d_leaf / d_cover);
                }
                let ok = pair_ratios(f, spectrum, &x, &y, c, epsilon).ok();
                if !ok {
                    m_fail = m_fail.max(d_cover);
                }
                if d_cover > 0.0 {
                    min_sep = min_sep.min(d_cover);
                }
                count += 1;
            }
            (raw, far, m_fail, min_sep, count)
        })
        .collect();
    let raw = per_leaf.iter().map(|p| p.0).fold(0.0, f64::max);
    let far = per_leaf.iter().map(|p| p.1).fold(0.0, f64::max);
    let m_fail = per_leaf.iter().map(|p| p.2).fold(0.0, f64::max);
    let min_sep = per_leaf.iter().map(|p| p.3).fold(f64::INFINITY, f64::min);
    let pairs = per_leaf.iter().map(|p| p.4).sum();
    let m_hat = if m_fail > 0.0 { m_fail } else { min_sep };
    QuasiIsometryReport { params: LargeScaleParams { m_hat, c, epsilon, q_hat: raw.max(1.0) }, raw_ratio: raw, far_stretch: far, pairs }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRatios {
    /// `|f~x - f~y| / |A x - A y|`.
    pub nonlinear: f64,
    /// `|A x - A y| / (e^{lambda^c_A} |x - y|)`.
    pub linear: f64,
    pub c: f64,
    pub epsilon: f64,
}

impl PairRatios {
    pub fn nonlinear_ok(&self) -> bool {
        self.nonlinear >= 1.0 / self.c && self.nonlinear <= self.c
    }

    pub fn linear_ok(&self) -> bool {
        self.linear >= 1.0 / (1.0 + self.epsilon) && self.linear <= 1.0 + self.epsilon
    }

    pub fn ok(&self) -> bool {
        self.nonlinear_ok() && self.linear_ok()
    }
}

fn pair_ratios(f: &DiffeoSpec, spectrum: &LinearSpectrum, x: &Vec3, y: &Vec3, c: f64, epsilon: f64) -> PairRatios {
    let d = y - x;
    let ad = f.a() * d;
    PairRatios {
        nonlinear: image_difference(f, x, y).norm() / ad.norm(),
        linear: ad.norm() / (spectrum.lambda_c.exp() * d.norm()),
        c,
        epsilon,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub k: usize,
    pub pairs: usize,
    pub skipped_short: usize,
    pub nonlinear_failures: usize,
    pub linear_failures: usize,
    pub nonlinear_range: (f64, f64),
    pub linear_range: (f64, f64),
}

/// `k`-step ratio checks on same-center-leaf pairs separated by more than M.
/// Differences are propagated as `d <- A d + phi(y) - phi(x)`.
pub fn large_scale_ratio_check(
    f: &DiffeoSpec,
    spectrum: &LinearSpectrum,
    pairs: &[(Vec3, Vec3)],
    k: usize,
    params: &LargeScaleParams,
) -> RatioReport {
    let mut report = RatioReport {
        k,
        pairs: 0,
        skipped_short: 0,
        nonlinear_failures: 0,
        linear_failures: 0,
        nonlinear_range: (f64::INFINITY, 0.0),
        linear_range: (f64::INFINITY, 0.0),
    };
    let ak = f.a().pow(k as u32);
    let growth = (k as f64 * spectrum.lambda_c).exp();
    for (x, y) in pairs {
        let d0 = y - x;
        if d0.norm() < params.m_hat {
            report.skipped_short += 1;
            continue;
        }
        let mut x_j = *x;
        let mut d = d0;
        for _ in 0..k {
            let nd = image_difference(f, &x_j, &(x_j + d));
            x_j = project_vec(&f.lift_eval(&x_j));
            d = nd;
        }
        let lin = ak * d0;
        let nonlinear = d.norm() / lin.norm();
        let linear = lin.norm() / (growth * d0.norm());
        report.pairs += 1;
        report.nonlinear_range = (report.nonlinear_range.0.min(nonlinear), report.nonlinear_range.1.max(nonlinear));
        report.linear_range = (report.linear_range.0.min(linear), report.linear_range.1.max(linear));
        if !(nonlinear >= 1.0 / params.c && nonlinear <= params.c) {
            report.nonlinear_failures += 1;
        }
        let eps_k = (1.0 + params.epsilon).powi(k as i32);
        if !(linear >= 1.0 / eps_k && linear <= eps_k) {
            report.linear_failures += 1;
        }
    }
    report
}

/// Grid transversal in the `(e_u, e_s)` plane with center plaques through
/// every node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoliatedBox {
    pub center: [f64; 3],
    pub half_width: f64,
    pub grid: usize,
    pub plaque_length: f64,
    pub nodes: Vec<[f64; 3]>,
    pub plaques: Vec<LeafSegment>,
    /// Smallest distance between corresponding vertices of adjacent plaques.
    pub min_plaque_separation: f64,
}

pub fn build_foliated_box(
    f: &DiffeoSpec,
    spectrum: &LinearSpectrum,
    center: &Vec3,
    half_width: f64,
    grid: usize,
    plaque_length: f64,
    opts: &LeafOptions,
) -> Result<FoliatedBox, FoliationError> {
    let grid = grid.max(2);
    let (eu, es) = (spectrum.e_u_vec(), spectrum.e_s_vec());
    let coord = |i: usize| -half_width + 2.0 * half_width * i as f64 / (grid - 1) as f64;
    let nodes: Vec<Vec3> =
        (0..grid).flat_map(|i| (0..grid).map(move |j| (i, j))).map(|(i, j)| center + eu * coord(i) + es * coord(j)).collect();
    let plaques: Vec<LeafSegment> = nodes
        .par_iter()
        .map(|x| {
            let field = CenterField::new(f, spectrum, opts.tail);
            integrate_center_ray(&field, x, &spectrum.e_c_vec(), plaque_length, opts)
        })
        .collect::<Result<_, _>>()?;
    let mut min_sep = f64::INFINITY;
    for i in 0..grid {
        for j in 0..grid {
            let a = &plaques[i * grid + j];
            for b in [(i + 1 < grid).then(|| &plaques[(i + 1) * grid + j]), (j + 1 < grid).then(|| &plaques[i * grid + j + 1])]
                .into_iter()
                .flatten()
            {
                let m = a.vertices.len().min(b.vertices.len());
                for v in 0..m {
                    min_sep = min_sep.min((a.vertex(v) - b.vertex(v)).norm());
                }
            }
        }
    }
    Ok(FoliatedBox {
        center: arr(center),
        half_width,
        grid,
        plaque_length,
        nodes: nodes.iter().map(arr).collect(),
        plaques,
        min_plaque_separation: min_sep,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolonomyStats {
    pub cells: usize,
    pub mean_log_area_ratio: f64,
    pub max_abs_log_area_ratio: f64,
}

/// Area distortion of the holonomy from the base transversal to the plaque
/// ends, measured cell by cell in the `(e_u, e_s)` coordinates. Descriptive.
pub fn holonomy_statistic(b: &FoliatedBox, spectrum: &LinearSpectrum) -> HolonomyStats {
    let inv = spectrum.eigenframe().try_inverse().expect("eigenbasis is a basis");
    let plane = |p: &Vec3| {
        let w = inv * p;
        (w[0], w[2])
    };
    let area = |q: [(f64, f64); 4]| {
        let mut s = 0.0;
        for i in 0..4 {
            let (a, c) = (q[i], q[(i + 1) % 4]);
            s += a.0 * c.1 - c.0 * a.1;
        }
        0.5 * s.abs()
    };
    let g = b.grid;
    let node = |i: usize, j: usize| plane(&Vec3::from(b.nodes[i * g + j]));
    let end = |i: usize, j: usize| plane(&b.plaques[i * g + j].end());
    let mut logs = Vec::new();
    for i in 0..g - 1 {
        for j in 0..g - 1 {
            let base = area([node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1)]);
            let image = area([end(i, j), end(i + 1, j), end(i + 1, j + 1), end(i, j + 1)]);
            logs.push((image / base).ln());
        }
    }
    HolonomyStats {
        cells: logs.len(),
        mean_log_area_ratio: crate::sampling::pairwise_sum(&logs) / logs.len() as f64,
        max_abs_log_area_ratio: logs.iter().map(|v| v.abs()).fold(0.0, f64::max),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AcFlag {
    NonAcSignature,
    ConsistentWithAc,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AcCriterion {
    /// Majority of volume with center exponent above the linear one.
    ExponentExcess,
    /// Positive volume with center exponents of both signs.
    MixedSigns,
}

/// Finite-time center exponents at sampled points, one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentSample {
    pub horizon: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcOptions {
    /// `None` means `0.25 lambda^c_A`.
    pub margin: Option<f64>,
    pub volume_fraction: f64,
    /// Lower confidence bound a sign class must exceed to count as positive volume.
    pub min_fraction: f64,
    pub bins: usize,
}

impl Default for AcOptions {
    fn default() -> Self {
        Self { margin: None, volume_fraction: 0.5, min_fraction: 0.01, bins: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcEvidence {
    pub lambda_c_a: f64,
    pub margin: f64,
    pub horizon: usize,
    pub samples: usize,
    pub fraction_above: f64,
    pub interval_above: (f64, f64),
    pub fraction_negative: f64,
    pub interval_negative: (f64, f64),
    pub fraction_positive: f64,
    pub interval_positive: (f64, f64),
    pub histogram: Histogram,
    pub holonomy: Option<HolonomyStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcVerdict {
    pub flag: AcFlag,
    pub criterion: Option<AcCriterion>,
    pub evidence: AcEvidence,
}

/// One-sided test for a non-absolutely-continuous center foliation.
///
/// The exponent excess branch fires when the 95% lower bound on the fraction
/// of samples with exponent above `lambda^c_A + margin` reaches
/// `volume_fraction`; the mixed-sign branch when both `< -margin` and
/// `> margin` have lower bounds above `min_fraction`. When neither fires and
/// the excess interval contains `volume_fraction` the verdict is
/// inconclusive. The holonomy statistic is carried as evidence only.
pub fn ac_diagnostic(
    spectrum: &LinearSpectrum,
    exponents: &ExponentSample,
    fbox: Option<&FoliatedBox>,
    opts: &AcOptions,
) -> AcVerdict {
    let lambda = spectrum.lambda_c;
    let margin = opts.margin.unwrap_or(0.25 * lambda);
    let n = exponents.values.len();
    let count = |p: &dyn Fn(f64) -> bool| exponents.values.iter().filter(|&&v| p(v)).count();
    let above = count(&|v| v > lambda + margin);
    let neg = count(&|v| v < -margin);
    let pos = count(&|v| v > margin);
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let (lo, hi) = exponents.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    let evidence = AcEvidence {
        lambda_c_a: lambda,
        margin,
        horizon: exponents.horizon,
        samples: n,
        fraction_above: frac(above),
        interval_above: wilson95(above, n),
        fraction_negative: frac(neg),
        interval_negative: wilson95(neg, n),
        fraction_positive: frac(pos),
        interval_positive: wilson95(pos, n),
        histogram: Histogram::build(&exponents.values, lo - 0.05 * span, hi + 0.05 * span, opts.bins),
        holonomy: fbox.map(|b| holonomy_statistic(b, spectrum)),
    };
    let (flag, criterion) = if evidence.interval_above.0 >= opts.volume_fraction {
        (AcFlag::NonAcSignature, Some(AcCriterion::ExponentExcess))
    } else if evidence.interval_negative.0 > opts.min_fraction && evidence.interval_positive.0 > opts.min_fraction {
        (AcFlag::NonAcSignature, Some(AcCriterion::MixedSigns))
    } else if evidence.interval_above.1 >= opts.volume_fraction {
        (AcFlag::Inconclusive, None)
    } else {
        (AcFlag::ConsistentWithAc, None)
    };
    AcVerdict { flag, criterion, evidence }
}
