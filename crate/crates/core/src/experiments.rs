//! Configuration, pipelines and on-disk reports.
//!
//! A configuration is a flat `key = value` file; `#` starts a comment.
//! Unknown keys, duplicate keys and unparsable values are errors. Every key
//! has a default, so an empty file is a valid configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::foliation::{
    ac_diagnostic, build_foliated_box, integrate_center_leaf, large_scale_ratio_check, leaf_growth_check,
    quasi_isometry_estimate, AcFlag, AcOptions, ExponentSample, LeafOptions, LeafSegment,
};
use crate::linear_anosov::{
    characteristic_coefficients, family_spectrum, make_inverse_family_matrix, real_spectrum, LinearSpectrum, Vec3,
    DEFAULT_ROOT_TOL,
};
use crate::lyapunov::{level_set_fraction, mc_center_integral, sample_exponents, DEFAULT_TAIL};
use crate::perturbation::{
    ball_points, build_da_example, BoostSpec, CertifyOptions, DaExample, DaParams, PerturbationError, ScheduleParams,
};
use crate::sampling::{uniform_points, Histogram, QuasiRandom, SeedStream};
use crate::splitting::{cone_invariance_check, ConeKind, ConeSpec};
use crate::torus::{c1_distance, equivariance_residual, linearization_of, volume_check, DiffeoSpec, TorusPoint};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    /// A check ran and its certified outcome is negative.
    #[error("stage {stage}: certification failed: {message}")]
    Certification { stage: String, message: String },
    #[error("stage {stage}: {message}")]
    Stage { stage: String, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    Spectrum,
    Build,
    Exponents,
    Leafgeom,
    Acdiag,
    ReproduceTheoremB,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Spectrum => "spectrum",
            Pipeline::Build => "build",
            Pipeline::Exponents => "exponents",
            Pipeline::Leafgeom => "leafgeom",
            Pipeline::Acdiag => "acdiag",
            Pipeline::ReproduceTheoremB => "reproduce-theorem-b",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    /// The DA construction.
    Da,
    /// The linear model `B_n` itself.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n: i64,
    pub j: usize,
    pub map: MapKind,
    pub theta: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub spectrum_ns: Vec<i64>,
    pub boost_lift_amplitude: f64,
    pub boost_return_amplitude: f64,
    pub boost_wavenumber: u32,
    pub boost_clearance: f64,
    pub boost_ramp: f64,
    pub boost_center: [f64; 3],
    pub schedule_eps0: f64,
    pub schedule_j_max: usize,
    pub schedule_orbit_budget: usize,
    pub schedule_safety: f64,
    pub tol_volume: f64,
    pub tol_equivariance: f64,
    /// `None` means `0.25 lambda^c_A`.
    pub ac_margin: Option<f64>,
    pub ac_volume_fraction: f64,
    pub samples_cones: usize,
    pub samples_volume: usize,
    pub samples_equivariance: usize,
    pub samples_mc: usize,
    pub samples_exponents: usize,
    pub samples_level_set: usize,
    pub samples_leaves: usize,
    pub horizon: usize,
    pub leaf_step: f64,
    pub leaf_length: f64,
    pub leaf_growth_iterates: usize,
    pub leaf_epsilon: f64,
    pub leaf_c: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let b = BoostSpec::default();
        let s = ScheduleParams::default();
        Self {
            n: 100,
            j: 3,
            map: MapKind::Da,
            theta: 0.1,
            seed: 0,
            out: PathBuf::from("results"),
            spectrum_ns: vec![10, 100, 1000],
            boost_lift_amplitude: b.lift_amplitude,
            boost_return_amplitude: b.return_amplitude,
            boost_wavenumber: b.wavenumber,
            boost_clearance: b.clearance,
            boost_ramp: b.ramp,
            boost_center: b.center.0,
            schedule_eps0: s.eps0,
            schedule_j_max: s.j_max,
            schedule_orbit_budget: s.orbit_budget,
            schedule_safety: s.safety,
            tol_volume: 1e-6,
            tol_equivariance: 1e-9,
            ac_margin: None,
            ac_volume_fraction: 0.5,
            samples_cones: 100_000,
            samples_volume: 100_000,
            samples_equivariance: 10_000,
            samples_mc: 1_000_000,
            samples_exponents: 1000,
            samples_level_set: 500,
            samples_leaves: 100,
            horizon: 1000,
            leaf_step: 0.01,
            leaf_length: 8.0,
            leaf_growth_iterates: 20,
            leaf_epsilon: 0.2,
            leaf_c: 1.5,
        }
    }
}

fn parse_value<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse::<T>().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',').map(|s| parse_value(s.trim())).collect()
}

fn join<T: fmt::Debug>(xs: &[T]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    /// All keys with their current values, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n", self.n.to_string()),
            ("j", self.j.to_string()),
            ("map", match self.map { MapKind::Da => "da".into(), MapKind::Linear => "linear".into() }),
            ("theta", format!("{:?}", self.theta)),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("spectrum.ns", join(&self.spectrum_ns)),
            ("boost.lift_amplitude", format!("{:?}", self.boost_lift_amplitude)),
            ("boost.return_amplitude", format!("{:?}", self.boost_return_amplitude)),
            ("boost.wavenumber", self.boost_wavenumber.to_string()),
            ("boost.clearance", format!("{:?}", self.boost_clearance)),
            ("boost.ramp", format!("{:?}", self.boost_ramp)),
            ("boost.center", join(&self.boost_center)),
            ("schedule.eps0", format!("{:?}", self.schedule_eps0)),
            ("schedule.j_max", self.schedule_j_max.to_string()),
            ("schedule.orbit_budget", self.schedule_orbit_budget.to_string()),
            ("schedule.safety", format!("{:?}", self.schedule_safety)),
            ("tol.volume", format!("{:?}", self.tol_volume)),
            ("tol.equivariance", format!("{:?}", self.tol_equivariance)),
            ("ac.margin", self.ac_margin.map_or("auto".into(), |m| format!("{m:?}"))),
            ("ac.volume_fraction", format!("{:?}", self.ac_volume_fraction)),
            ("samples.cones", self.samples_cones.to_string()),
            ("samples.volume", self.samples_volume.to_string()),
            ("samples.equivariance", self.samples_equivariance.to_string()),
            ("samples.mc", self.samples_mc.to_string()),
            ("samples.exponents", self.samples_exponents.to_string()),
            ("samples.level_set", self.samples_level_set.to_string()),
            ("samples.leaves", self.samples_leaves.to_string()),
            ("horizon", self.horizon.to_string()),
            ("leaf.step", format!("{:?}", self.leaf_step)),
            ("leaf.length", format!("{:?}", self.leaf_length)),
            ("leaf.growth_iterates", self.leaf_growth_iterates.to_string()),
            ("leaf.epsilon", format!("{:?}", self.leaf_epsilon)),
            ("leaf.c", format!("{:?}", self.leaf_c)),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "n" => self.n = parse_value(v)?,
            "j" => self.j = parse_value(v)?,
            "map" => {
                self.map = match v {
                    "da" => MapKind::Da,
                    "linear" => MapKind::Linear,
                    _ => return Err(format!("map must be `da` or `linear`, got {v:?}")),
                }
            }
            "theta" => self.theta = parse_value(v)?,
            "seed" => self.seed = parse_value(v)?,
            "out" => self.out = PathBuf::from(v),
            "spectrum.ns" => self.spectrum_ns = parse_list(v)?,
            "boost.lift_amplitude" => self.boost_lift_amplitude = parse_value(v)?,
            "boost.return_amplitude" => self.boost_return_amplitude = parse_value(v)?,
            "boost.wavenumber" => self.boost_wavenumber = parse_value(v)?,
            "boost.clearance" => self.boost_clearance = parse_value(v)?,
            "boost.ramp" => self.boost_ramp = parse_value(v)?,
            "boost.center" => {
                let c: Vec<f64> = parse_list(v)?;
                self.boost_center = c.try_into().map_err(|_| "boost.center needs three numbers".to_string())?;
            }
            "schedule.eps0" => self.schedule_eps0 = parse_value(v)?,
            "schedule.j_max" => self.schedule_j_max = parse_value(v)?,
            "schedule.orbit_budget" => self.schedule_orbit_budget = parse_value(v)?,
            "schedule.safety" => self.schedule_safety = parse_value(v)?,
            "tol.volume" => self.tol_volume = parse_value(v)?,
            "tol.equivariance" => self.tol_equivariance = parse_value(v)?,
            "ac.margin" => self.ac_margin = if v == "auto" { None } else { Some(parse_value(v)?) },
            "ac.volume_fraction" => self.ac_volume_fraction = parse_value(v)?,
            "samples.cones" => self.samples_cones = parse_value(v)?,
            "samples.volume" => self.samples_volume = parse_value(v)?,
            "samples.equivariance" => self.samples_equivariance = parse_value(v)?,
            "samples.mc" => self.samples_mc = parse_value(v)?,
            "samples.exponents" => self.samples_exponents = parse_value(v)?,
            "samples.level_set" => self.samples_level_set = parse_value(v)?,
            "samples.leaves" => self.samples_leaves = parse_value(v)?,
            "horizon" => self.horizon = parse_value(v)?,
            "leaf.step" => self.leaf_step = parse_value(v)?,
            "leaf.length" => self.leaf_length = parse_value(v)?,
            "leaf.growth_iterates" => self.leaf_growth_iterates = parse_value(v)?,
            "leaf.epsilon" => self.leaf_epsilon = parse_value(v)?,
            "leaf.c" => self.leaf_c = parse_value(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ExperimentError::Config { line: i + 1, message };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(err(format!("duplicate key {k:?}")));
            }
            cfg.set(k, v).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Invalid(m.into()));
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad("theta must lie in (0, 1)");
        }
        for (name, t) in [
            ("tol.volume", self.tol_volume),
            ("tol.equivariance", self.tol_equivariance),
            ("leaf.step", self.leaf_step),
            ("leaf.epsilon", self.leaf_epsilon),
        ] {
            if !(t > 0.0) {
                return Err(ExperimentError::Invalid(format!("{name} must be positive")));
            }
        }
        if let Some(m) = self.ac_margin {
            if !(m > 0.0) {
                return bad("ac.margin must be positive");
            }
        }
        if !(self.leaf_c > 1.0) {
            return bad("leaf.c must exceed 1");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        Ok(())
    }

    pub fn da_params(&self) -> DaParams {
        DaParams {
            n: self.n,
            j: self.j,
            boost: BoostSpec {
                plane: (1, 0),
                lift_amplitude: self.boost_lift_amplitude,
                return_amplitude: self.boost_return_amplitude,
                wavenumber: self.boost_wavenumber,
                clearance: self.boost_clearance,
                ramp: self.boost_ramp,
                center: TorusPoint(self.boost_center),
            },
            schedule: ScheduleParams {
                eps0: self.schedule_eps0,
                j_max: self.schedule_j_max.max(self.j),
                orbit_budget: self.schedule_orbit_budget,
                safety: self.schedule_safety,
                seed: SeedStream::new(self.seed, "schedule").seed,
            },
            center_value: None,
            cert: CertifyOptions { theta: self.theta, samples: 20_000, seed: SeedStream::new(self.seed, "build-cones").seed },
        }
    }

    fn leaf_options(&self) -> LeafOptions {
        LeafOptions { step: self.leaf_step, ..LeafOptions::default() }
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Everything a run produced, minus timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub pipeline: Pipeline,
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub stages_completed: Vec<String>,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    /// True when every check of the pipeline passed.
    pub certified: bool,
    pub verdict: Option<AcFlag>,
    pub construction: Option<DiffeoSpec>,
    pub results: BTreeMap<String, Value>,
    pub iterate_counts: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub manifest: RunManifest,
    /// File name to CSV content.
    pub tables: BTreeMap<String, String>,
    /// Wall-clock seconds per stage; written separately from the results.
    pub timing: BTreeMap<String, f64>,
}

impl RunOutput {
    /// Process exit code: 0 certified success, 2 certified failure or an
    /// inconclusive verdict, 1 error.
    pub fn exit_code(&self) -> i32 {
        if self.manifest.failed_stage.is_some() {
            return if self.results_flag("certification_failure") { 2 } else { 1 };
        }
        if self.manifest.verdict == Some(AcFlag::Inconclusive) || !self.manifest.certified {
            return 2;
        }
        0
    }

    fn results_flag(&self, key: &str) -> bool {
        self.manifest.results.get(key).and_then(Value::as_bool).unwrap_or(false)
    }
}

struct Runner {
    cfg: ExperimentConfig,
    out: RunOutput,
}

impl Runner {
    fn new(cfg: &ExperimentConfig, pipeline: Pipeline) -> Self {
        let manifest = RunManifest {
            pipeline,
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            // the output location does not affect results
            config: cfg.entries().into_iter().filter(|(k, _)| *k != "out").map(|(k, v)| (k.to_string(), v)).collect(),
            stages_completed: Vec::new(),
            failed_stage: None,
            error: None,
            certified: true,
            verdict: None,
            construction: None,
            results: BTreeMap::new(),
            iterate_counts: BTreeMap::new(),
        };
        Self { cfg: cfg.clone(), out: RunOutput { manifest, tables: BTreeMap::new(), timing: BTreeMap::new() } }
    }

    fn stage<T>(&mut self, name: &str, body: impl FnOnce(&mut Self) -> Result<T, ExperimentError>) -> Result<T, ExperimentError> {
        let t = Instant::now();
        let r = body(self);
        self.out.timing.insert(name.to_string(), t.elapsed().as_secs_f64());
        match &r {
            Ok(_) => self.out.manifest.stages_completed.push(name.to_string()),
            Err(e) => {
                self.out.manifest.failed_stage = Some(name.to_string());
                self.out.manifest.error = Some(e.to_string());
                self.out.manifest.certified = false;
                if matches!(e, ExperimentError::Certification { .. }) {
                    self.out.manifest.results.insert("certification_failure".into(), json!(true));
                }
            }
        }
        r
    }

    fn put(&mut self, key: &str, v: Value) {
        self.out.manifest.results.insert(key.to_string(), v);
    }

    fn count(&mut self, key: &str, n: u64) {
        *self.out.manifest.iterate_counts.entry(key.to_string()).or_default() += n;
    }

    fn seed(&self, purpose: &str) -> u64 {
        SeedStream::new(self.cfg.seed, purpose).seed
    }
}

/// The map under study plus the linear reference.
struct Subject {
    map: DiffeoSpec,
    spectrum: LinearSpectrum,
    example: Option<DaExample>,
}

fn build_stage(r: &mut Runner) -> Result<Subject, ExperimentError> {
    r.stage("build", |r| {
        let cfg = r.cfg.clone();
        let spectrum = family_spectrum(cfg.n, DEFAULT_ROOT_TOL)
            .map_err(|e| ExperimentError::Stage { stage: "build".into(), message: e.to_string() })?;
        let subject = match cfg.map {
            MapKind::Linear => {
                let b = make_inverse_family_matrix(cfg.n)
                    .map_err(|e| ExperimentError::Stage { stage: "build".into(), message: e.to_string() })?;
                let mut map = DiffeoSpec::linear(b);
                map.metadata.family_index = Some(cfg.n);
                Subject { map, spectrum, example: None }
            }
            MapKind::Da => {
                let ex = build_da_example(&cfg.da_params()).map_err(|e| {
                    let certified = matches!(
                        &e,
                        PerturbationError::Stage { source, .. } if matches!(**source, PerturbationError::Rejected { .. })
                    );
                    if certified {
                        ExperimentError::Certification { stage: "build".into(), message: e.to_string() }
                    } else {
                        ExperimentError::Stage { stage: "build".into(), message: e.to_string() }
                    }
                })?;
                let ball = ball_points(&Vec3::zeros(), ex.surgery.blend_radius, 10_000, r.seed("c1-ball"));
                let mut points = QuasiRandom::take_points(r.seed("c1"), 10_000);
                points.extend_from_slice(&ball);
                r.put("c1_distance_to_linear", json!(c1_distance(&ex.map, &ex.linear, &points)));
                r.put("c1_distance_surgery", json!(c1_distance(&ex.map, &ex.boosted, &ball)));
                r.put("schedule_radii", json!(ex.schedule.radii));
                r.put("schedule_certified_depth", json!(ex.schedule.certified_depth));
                r.count("schedule_orbit_steps", (ex.schedule.seeds_per_level * ex.schedule.radii.len().pow(2)) as u64);
                Subject { map: ex.map.clone(), spectrum, example: Some(ex) }
            }
        };
        r.put("n", json!(cfg.n));
        r.put("lambda_c_linear", json!(subject.spectrum.lambda_c));
        r.out.manifest.construction = Some(subject.map.clone());
        Ok(subject)
    })
}

fn certify_stage(r: &mut Runner, s: &Subject) -> Result<(), ExperimentError> {
    r.stage("certify", |r| {
        let cfg = r.cfg.clone();
        let vol = volume_check(&s.map, cfg.samples_volume, cfg.tol_volume, r.seed("volume"));
        let eq = equivariance_residual(&s.map, cfg.samples_equivariance, r.seed("equivariance"));
        let mut points = QuasiRandom::take_points(r.seed("cones"), cfg.samples_cones);
        if let Some(ex) = &s.example {
            points.extend(ball_points(&Vec3::zeros(), ex.surgery.blend_radius, cfg.samples_cones / 10 + 1, r.seed("ball")));
        }
        let reports: Vec<_> = ConeKind::ALL
            .iter()
            .map(|&k| cone_invariance_check(&s.map, &ConeSpec::new(&s.spectrum, cfg.theta, k), &points))
            .collect();
        let dp = s.map.derivative(&Vec3::zeros());
        let eig = real_spectrum(&dp, characteristic_coefficients(&dp), DEFAULT_ROOT_TOL)
            .map_err(|e| ExperimentError::Stage { stage: "certify".into(), message: e.to_string() })?;
        let contracting = eig.eigenvalues.iter().filter(|v| v.abs() < 1.0).count();
        let lin = linearization_of(&s.map, 64, r.seed("linearization"))
            .map_err(|e| ExperimentError::Stage { stage: "certify".into(), message: e.to_string() })?;
        let lin_ok = lin.entries() == make_inverse_family_matrix(cfg.n).expect("validated n").entries();

        let mut csv = String::from("kind,theta,samples,violations,min_margin\n");
        for rep in &reports {
            csv.push_str(&format!("{:?},{:?},{},{},{:?}\n", rep.kind, rep.theta, rep.samples, rep.violations, rep.min_margin));
        }
        r.out.tables.insert("cone_margins.csv".into(), csv);
        r.put("volume_max_deviation", json!(vol.max_deviation));
        r.put("equivariance_residual", json!(eq));
        r.put(
            "cone_min_margin",
            json!(reports.iter().map(|x| (format!("{:?}", x.kind).to_lowercase(), x.min_margin)).collect::<BTreeMap<_, _>>()),
        );
        r.put("cone_violations", json!(reports.iter().map(|x| x.violations).sum::<usize>()));
        r.put("derivative_eigenvalues_at_fixed_point", json!(eig.eigenvalues));
        r.put("contracting_directions_at_fixed_point", json!(contracting));
        r.put("linearization", json!(lin.entries()));
        r.count("cone_samples", points.len() as u64 * 4);

        let mut failures = Vec::new();
        if !vol.pass {
            failures.push(format!("volume deviation {:e}", vol.max_deviation));
        }
        if !(eq <= cfg.tol_equivariance) {
            failures.push(format!("equivariance residual {eq:e}"));
        }
        for rep in &reports {
            if !rep.pass() {
                failures.push(format!("{:?} cone: {} violations", rep.kind, rep.violations));
            }
        }
        if !lin_ok {
            failures.push("linearization differs from B_n".into());
        }
        if s.example.is_some() && contracting != 2 {
            failures.push(format!("{contracting} contracting directions at the fixed point"));
        }
        if failures.is_empty() {
            Ok(())
        } else {
            Err(ExperimentError::Certification { stage: "certify".into(), message: failures.join("; ") })
        }
    })
}

fn mc_stage(r: &mut Runner, s: &Subject, require_excess: bool) -> Result<(), ExperimentError> {
    r.stage("center-integral", |r| {
        let m = mc_center_integral(&s.map, &s.spectrum, r.cfg.samples_mc, r.seed("mc"), DEFAULT_TAIL);
        r.put("center_integral", json!({"mean": m.mean, "ci95": m.ci95, "lower": m.lower(), "upper": m.upper(), "samples": m.count}));
        r.put("center_integral_excess", json!(m.lower() - s.spectrum.lambda_c));
        r.count("one_step_samples", m.count as u64);
        if require_excess && !(m.lower() > s.spectrum.lambda_c) {
            return Err(ExperimentError::Certification {
                stage: "center-integral".into(),
                message: format!("CI lower bound {} does not exceed lambda^c = {}", m.lower(), s.spectrum.lambda_c),
            });
        }
        Ok(())
    })
}

fn exponent_stage(r: &mut Runner, s: &Subject) -> Result<ExponentSample, ExperimentError> {
    r.stage("exponents", |r| {
        let cfg = r.cfg.clone();
        let points = uniform_points(SeedStream::new(cfg.seed, "exponents"), cfg.samples_exponents);
        let est = sample_exponents(&s.map, &s.spectrum, &points, cfg.horizon, DEFAULT_TAIL)
            .map_err(|e| ExperimentError::Stage { stage: "exponents".into(), message: e.to_string() })?;
        let mut csv = String::from("x,y,z,horizon,sigma,value\n");
        for e in &est {
            let p = e.point.0;
            csv.push_str(&format!("{:?},{:?},{:?},{},c,{:?}\n", p[0], p[1], p[2], e.horizon, e.values[1]));
        }
        r.out.tables.insert("exponents.csv".into(), csv);
        let values: Vec<f64> = est.iter().map(|e| e.values[1]).collect();
        let dominance = est.iter().filter(|e| e.values[0] < e.values[1] && e.values[1] < e.values[2]).count();
        let worst_sum_rule = est.iter().map(|e| e.sum_rule.defect - e.sum_rule.bound).fold(f64::NEG_INFINITY, f64::max);
        let summary = crate::sampling::MeanEstimate::from_samples(&values);
        r.put(
            "center_exponents",
            json!({"horizon": cfg.horizon, "samples": values.len(), "mean": summary.mean, "std_dev": summary.std_dev, "dominance_holds": dominance}),
        );
        r.put("sum_rule_worst_excess", json!(worst_sum_rule));
        r.count("orbit_steps", (cfg.samples_exponents * (cfg.horizon + 2 * DEFAULT_TAIL)) as u64);
        Ok(ExponentSample { horizon: cfg.horizon, values })
    })
}

fn level_set_stage(r: &mut Runner, s: &Subject) -> Result<(), ExperimentError> {
    r.stage("level-sets", |r| {
        let cfg = r.cfg.clone();
        let horizons = [cfg.horizon / 4, cfg.horizon / 2, cfg.horizon].map(|h| h.max(1));
        let start = (cfg.horizon / 10).max(1);
        let rows: Vec<_> = horizons
            .iter()
            .map(|&h| level_set_fraction(&s.map, &s.spectrum, s.spectrum.lambda_c, start.min(h), h, cfg.samples_level_set, r.seed("level-set")))
            .collect();
        r.put("level_sets", serde_json::to_value(&rows).expect("serializable"));
        Ok(())
    })
}

fn histogram_csv(h: &Histogram) -> String {
    let mut csv = String::from("lo,hi,count\n");
    for ((a, b), c) in h.bin_edges().into_iter().zip(&h.counts) {
        csv.push_str(&format!("{a:?},{b:?},{c}\n"));
    }
    csv
}

fn acdiag_stage(r: &mut Runner, s: &Subject, exps: &ExponentSample) -> Result<AcFlag, ExperimentError> {
    r.stage("acdiag", |r| {
        let cfg = r.cfg.clone();
        let fbox = build_foliated_box(&s.map, &s.spectrum, &Vec3::new(0.5, 0.5, 0.5), 0.05, 4, 0.5, &cfg.leaf_options())
            .map_err(|e| ExperimentError::Stage { stage: "acdiag".into(), message: e.to_string() })?;
        let opts = AcOptions { margin: cfg.ac_margin, volume_fraction: cfg.ac_volume_fraction, ..AcOptions::default() };
        let v = ac_diagnostic(&s.spectrum, exps, Some(&fbox), &opts);
        r.out.tables.insert("exponent_histogram.csv".into(), histogram_csv(&v.evidence.histogram));
        r.put("ac_verdict", serde_json::to_value(&v).expect("serializable"));
        r.out.manifest.verdict = Some(v.flag);
        Ok(v.flag)
    })
}

fn leaves(r: &Runner, s: &Subject, count: usize, purpose: &str, length: f64) -> Result<Vec<LeafSegment>, ExperimentError> {
    let points = uniform_points(SeedStream::new(r.cfg.seed, purpose), count);
    let opts = r.cfg.leaf_options();
    points
        .iter()
        .map(|x| integrate_center_leaf(&s.map, &s.spectrum, x, length, &opts))
        .collect::<Result<_, _>>()
        .map_err(|e| ExperimentError::Stage { stage: "leafgeom".into(), message: e.to_string() })
}

fn leafgeom_stage(r: &mut Runner, s: &Subject) -> Result<(), ExperimentError> {
    let params = r.stage("quasi-isometry", |r| {
        let cfg = r.cfg.clone();
        let ls = leaves(r, s, cfg.samples_leaves, "leaves", cfg.leaf_length)?;
        let q = quasi_isometry_estimate(&s.map, &s.spectrum, &ls, cfg.leaf_c, cfg.leaf_epsilon, 20);
        let pairs: Vec<(Vec3, Vec3)> = ls.iter().map(|l| (l.start(), l.end())).collect();
        let ratio = large_scale_ratio_check(&s.map, &s.spectrum, &pairs, 1, &q.params);
        r.put("quasi_isometry", serde_json::to_value(&q).expect("serializable"));
        r.put("ratio_check", serde_json::to_value(&ratio).expect("serializable"));
        if ratio.nonlinear_failures + ratio.linear_failures > 0 {
            return Err(ExperimentError::Certification { stage: "quasi-isometry".into(), message: "ratio bound fails beyond M".into() });
        }
        Ok(q.params)
    })?;
    r.stage("leaf-growth", |r| {
        let cfg = r.cfg.clone();
        let length = (2.0 * params.m_hat).max(2.0) + 0.5;
        let segs = leaves(r, s, cfg.samples_leaves, "growth-segments", length)?;
        let opts = cfg.leaf_options();
        let mut csv = String::from("segment,k,length,endpoint_dist,bound\n");
        let mut failures = 0;
        let mut worst: f64 = 0.0;
        for (i, seg) in segs.iter().enumerate() {
            let g = leaf_growth_check(&s.map, &s.spectrum, seg, cfg.leaf_growth_iterates, &params, &opts)
                .map_err(|e| ExperimentError::Stage { stage: "leaf-growth".into(), message: e.to_string() })?;
            for k in 0..g.lengths_k.len() {
                csv.push_str(&format!("{i},{k},{:?},{:?},{:?}\n", g.lengths_k[k], g.endpoint_dists_k[k], g.bounds_k[k]));
            }
            failures += usize::from(!g.upper_bound_ok);
            worst = worst.max(g.max_bound_ratio);
        }
        r.out.tables.insert("growth.csv".into(), csv);
        r.put("growth", json!({"segments": segs.len(), "iterates": cfg.leaf_growth_iterates, "failures": failures, "max_bound_ratio": worst}));
        if failures > 0 {
            return Err(ExperimentError::Certification { stage: "leaf-growth".into(), message: format!("{failures} segments break the growth bound") });
        }
        Ok(())
    })
}

fn spectrum_stage(r: &mut Runner) -> Result<(), ExperimentError> {
    r.stage("spectrum", |r| {
        let mut csv = String::from("n,beta_s,beta_c,beta_u,lambda_s,lambda_c,lambda_u,gap_u,gap_c,gap_s\n");
        let mut rows = Vec::new();
        for &n in &r.cfg.spectrum_ns.clone() {
            let s = family_spectrum(n, DEFAULT_ROOT_TOL)
                .map_err(|e| ExperimentError::Stage { stage: "spectrum".into(), message: e.to_string() })?;
            let nf = n as f64;
            let gaps = [s.beta_u / nf - 1.0, s.beta_c - 1.0, nf * s.beta_s - 1.0];
            csv.push_str(&format!(
                "{n},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
                s.beta_s, s.beta_c, s.beta_u, s.lambda_s, s.lambda_c, s.lambda_u, gaps[0], gaps[1], gaps[2]
            ));
            rows.push(json!({"n": n, "beta": [s.beta_s, s.beta_c, s.beta_u], "lambda": [s.lambda_s, s.lambda_c, s.lambda_u], "gaps": gaps}));
        }
        r.out.tables.insert("spectrum.csv".into(), csv);
        r.put("spectrum", Value::Array(rows));
        Ok(())
    })
}

fn run_pipeline(r: &mut Runner, pipeline: Pipeline) -> Result<(), ExperimentError> {
    match pipeline {
        Pipeline::Spectrum => spectrum_stage(r),
        Pipeline::Build => {
            let s = build_stage(r)?;
            certify_stage(r, &s)
        }
        Pipeline::Exponents => {
            let s = build_stage(r)?;
            mc_stage(r, &s, false)?;
            exponent_stage(r, &s)?;
            level_set_stage(r, &s)
        }
        Pipeline::Leafgeom => {
            let s = build_stage(r)?;
            leafgeom_stage(r, &s)
        }
        Pipeline::Acdiag => {
            let s = build_stage(r)?;
            let e = exponent_stage(r, &s)?;
            acdiag_stage(r, &s, &e).map(|_| ())
        }
        Pipeline::ReproduceTheoremB => {
            let s = build_stage(r)?;
            certify_stage(r, &s)?;
            mc_stage(r, &s, true)?;
            let e = exponent_stage(r, &s)?;
            let flag = acdiag_stage(r, &s, &e)?;
            if flag != AcFlag::NonAcSignature {
                r.out.manifest.certified = false;
            }
            Ok(())
        }
    }
}

/// Runs a pipeline. Stage failures do not propagate: they are recorded in
/// the manifest, which names the failed stage.
pub fn run_experiment(cfg: &ExperimentConfig, pipeline: Pipeline) -> Result<RunOutput, ExperimentError> {
    cfg.validate()?;
    let mut r = Runner::new(cfg, pipeline);
    let _ = run_pipeline(&mut r, pipeline);
    Ok(r.out)
}

/// Plain-text digest of the key inequalities and their slacks.
pub fn summary_text(m: &RunManifest) -> String {
    let mut s = format!("pipeline: {}\nseed: {}\n", m.pipeline.name(), m.seed);
    s.push_str(&format!("stages completed: {}\n", m.stages_completed.join(", ")));
    if let Some(f) = &m.failed_stage {
        s.push_str(&format!("FAILED at stage {f}: {}\n", m.error.as_deref().unwrap_or("")));
    }
    if let Some(margins) = m.results.get("cone_min_margin") {
        let min = margins.as_object().map(|o| o.values().filter_map(Value::as_f64).fold(f64::INFINITY, f64::min));
        if let Some(min) = min {
            s.push_str(&format!("cone margins > 0: {} (smallest margin {min:.6e})\n", min > 0.0));
        }
    }
    if let (Some(ci), Some(l)) = (m.results.get("center_integral"), m.results.get("lambda_c_linear").and_then(Value::as_f64)) {
        if let Some(lo) = ci.get("lower").and_then(Value::as_f64) {
            s.push_str(&format!(
                "center integral > lambda^c: {} (mean {:.6e}, CI lower {lo:.6e}, lambda^c {l:.6e}, slack {:.6e})\n",
                lo > l,
                ci.get("mean").and_then(Value::as_f64).unwrap_or(f64::NAN),
                lo - l
            ));
        }
    }
    if let Some(v) = m.verdict {
        s.push_str(&format!("verdict: {}\n", serde_json::to_value(v).expect("serializable").as_str().unwrap_or("?")));
    }
    s.push_str(&format!("certified: {}\n", m.certified));
    s
}

/// Writes `manifest.json`, the CSV tables, `summary.txt` and `timing.json`
/// into `dir`. Everything but `timing.json` is a deterministic function of
/// configuration and seed.
pub fn emit_report(out: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut write = |name: &str, content: &str| -> Result<(), ExperimentError> {
        let p = dir.join(name);
        std::fs::write(&p, content)?;
        written.push(p);
        Ok(())
    };
    let manifest = serde_json::to_string_pretty(&out.manifest).expect("serializable");
    write("manifest.json", &(manifest + "\n"))?;
    for (name, csv) in &out.tables {
        write(name, csv)?;
    }
    write("summary.txt", &summary_text(&out.manifest))?;
    write("timing.json", &(serde_json::to_string_pretty(&out.timing).expect("serializable") + "\n"))?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips() {
        let mut c = ExperimentConfig::default();
        c.n = 250;
        c.ac_margin = Some(0.003);
        c.boost_center = [0.1, 0.2, 0.3];
        c.spectrum_ns = vec![5, 7];
        c.leaf_step = 1.0 / 3.0;
        let back = ExperimentConfig::parse(&c.to_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn config_rejects_unknown_and_duplicate_keys() {
        assert!(matches!(ExperimentConfig::parse("n = 10\nbogus = 1"), Err(ExperimentError::Config { line: 2, .. })));
        assert!(matches!(ExperimentConfig::parse("n = 10\nn = 11"), Err(ExperimentError::Config { line: 2, .. })));
        assert!(matches!(ExperimentConfig::parse("theta = x"), Err(ExperimentError::Config { line: 1, .. })));
        assert!(matches!(ExperimentConfig::parse("theta = 1.5"), Err(ExperimentError::Invalid(_))));
        assert!(ExperimentConfig::parse("# comment\n n = 12   # trailing\n").is_ok());
    }

    #[test]
    fn spectrum_pipeline_writes_one_row_per_n() {
        let out = run_experiment(&ExperimentConfig::default(), Pipeline::Spectrum).unwrap();
        assert_eq!(out.exit_code(), 0);
        assert_eq!(out.tables["spectrum.csv"].lines().count(), 4);
    }

    #[test]
    fn failed_stage_is_recorded() {
        let cfg = ExperimentConfig { n: 3, ..ExperimentConfig::default() };
        let out = run_experiment(&cfg, Pipeline::Build).unwrap();
        assert_eq!(out.manifest.failed_stage.as_deref(), Some("build"));
        assert_eq!(out.exit_code(), 1);
    }

    #[test]
    fn rejected_construction_is_a_certified_failure() {
        let cfg = ExperimentConfig { boost_return_amplitude: 0.4, ..ExperimentConfig::default() };
        let out = run_experiment(&cfg, Pipeline::Build).unwrap();
        assert_eq!(out.manifest.failed_stage.as_deref(), Some("build"));
        assert_eq!(out.exit_code(), 2);
    }
}
