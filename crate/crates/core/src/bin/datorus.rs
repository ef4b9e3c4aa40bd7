use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use datorus::experiments::{emit_report, run_experiment, summary_text, ExperimentConfig, Pipeline};

#[derive(Parser)]
#[command(name = "datorus", version, about = "Derived-from-Anosov maps of the 3-torus: construction and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: `out` from the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Main sample budget of the pipeline.
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Family index.
    #[arg(long, global = true)]
    n: Option<i64>,
    /// Cone aperture.
    #[arg(long, global = true)]
    theta: Option<f64>,
    /// Print the manifest as JSON instead of the summary.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Spectra of the linear family.
    Spectrum,
    /// Construct and certify the DA example.
    Build,
    /// Center integral, finite-time exponents and level sets.
    Exponents,
    /// Quasi-isometry, large-scale ratios and leaf growth.
    Leafgeom,
    /// Absolute-continuity diagnostic.
    Acdiag,
    /// Build, certify, center integral and diagnostic in one run.
    ReproduceTheoremB,
}

impl Command {
    fn pipeline(self) -> Pipeline {
        match self {
            Command::Spectrum => Pipeline::Spectrum,
            Command::Build => Pipeline::Build,
            Command::Exponents => Pipeline::Exponents,
            Command::Leafgeom => Pipeline::Leafgeom,
            Command::Acdiag => Pipeline::Acdiag,
            Command::ReproduceTheoremB => Pipeline::ReproduceTheoremB,
        }
    }
}

fn apply_samples(cfg: &mut ExperimentConfig, p: Pipeline, n: usize) {
    match p {
        Pipeline::Spectrum => {}
        Pipeline::Build => cfg.samples_cones = n,
        Pipeline::Exponents | Pipeline::ReproduceTheoremB => cfg.samples_mc = n,
        Pipeline::Leafgeom => cfg.samples_leaves = n,
        Pipeline::Acdiag => cfg.samples_exponents = n,
    }
}

fn run(cli: &Cli) -> anyhow::Result<i32> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let pipeline = cli.command.pipeline();
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(n) = cli.samples {
        apply_samples(&mut cfg, pipeline, n);
    }
    if let Some(n) = cli.n {
        cfg.n = n;
    }
    if let Some(t) = cli.theta {
        cfg.theta = t;
    }
    cfg.validate()?;
    let out = run_experiment(&cfg, pipeline)?;
    emit_report(&out, &cfg.out)?;
    if cli.json {
        println!("{}", serde_json::to_string_pretty(&out.manifest)?);
    } else {
        print!("{}", summary_text(&out.manifest));
    }
    Ok(out.exit_code())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
