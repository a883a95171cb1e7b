//! Single entry point for the exclusion-process toolkit: equilibrium
//! simulation, truncated resolvent sweeps, Fourier scaling fits, and exact
//! small-torus identity checks. Every run reads one config file and writes
//! CSV results plus a JSON summary into its output directory.
//!
//! Exit codes: 0 on success, 1 on compute failure (solver breakdown, hard
//! invariant violation, unwritable output), 2 on config failure.

mod config;

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use asep_core::dual::DynamicsKind;
use asep_core::fourier::{degree3_lower_integral, fit_scaling, FitModel, ScalingSeries};
use asep_core::io::{self, Cell};
use asep_core::kmc::{estimate_all, run_batch};
use asep_core::lattice::{JumpLaw, TorusGeometry};
use asep_core::oracle::{build_generator_matrix, laplace_identity_check};
use asep_core::resolvent::{solve_truncated_resolvent, ResolventProblem};

use config::Config;

#[derive(Parser)]
#[command(
    name = "asep",
    version,
    about = "Driver for the exclusion-process toolkit",
    subcommand_required = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Equilibrium trajectories and correlation estimators
    Simulate(RunArgs),
    /// Truncated resolvent solves over a lambda list
    Resolvent(RunArgs),
    /// Fourier-space scaling integrals and exponent fit
    Fourier(RunArgs),
    /// Exact small-torus identity checks
    Oracle(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Sectioned key=value config file
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides output.dir from the config
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

enum AppError {
    Config(String),
    Compute(String),
}

impl AppError {
    fn cfg(msg: impl Into<String>) -> Self {
        AppError::Config(msg.into())
    }
}

macro_rules! compute_from {
    ($($t:ty),*) => {$(
        impl From<$t> for AppError {
            fn from(e: $t) -> Self {
                AppError::Compute(e.to_string())
            }
        }
    )*};
}
compute_from!(
    asep_core::kmc::KmcError,
    asep_core::resolvent::ResolventError,
    asep_core::fourier::FourierError,
    asep_core::oracle::OracleError,
    asep_core::io::IoError,
    asep_core::lattice::LatticeError,
    std::io::Error
);

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(()) => 0,
        Err(AppError::Compute(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(AppError::Config(msg)) => {
            eprintln!("config error: {msg}");
            2
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> Result<(), AppError> {
    match cli.cmd {
        Cmd::Simulate(args) => run_simulate(&args),
        Cmd::Resolvent(args) => run_resolvent(&args),
        Cmd::Fourier(args) => run_fourier(&args),
        Cmd::Oracle(args) => run_oracle(&args),
    }
}

fn load_config(args: &RunArgs) -> Result<Config, AppError> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        AppError::Config(format!("cannot read {}: {e}", args.config.display()))
    })?;
    Config::parse(&text).map_err(AppError::Config)
}

/// Output directory: flag beats config key beats `out/<sub>-<unix time>`.
fn resolve_out_dir(args: &RunArgs, cfg: &Config, sub: &str) -> Result<PathBuf, AppError> {
    let dir = if let Some(d) = &args.output_dir {
        d.clone()
    } else if cfg.has("output.dir") {
        PathBuf::from(cfg.str("output.dir").map_err(AppError::Config)?)
    } else {
        let stamp =
            SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        PathBuf::from(format!("out/{sub}-{stamp}"))
    };
    std::fs::create_dir_all(&dir)
        .map_err(|e| AppError::Compute(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn summary_envelope(sub: &str, cfg: &Config, started: Instant) -> serde_json::Value {
    json!({
        "subcommand": sub,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg.echo(),
        "wall_seconds": started.elapsed().as_secs_f64(),
    })
}

fn write_summary(
    dir: &Path,
    mut envelope: serde_json::Value,
    results: serde_json::Value,
) -> Result<(), AppError> {
    envelope
        .as_object_mut()
        .expect("envelope is an object")
        .insert("results".into(), results);
    io::write_json(&dir.join("summary.json"), &envelope)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn parse_lattice(cfg: &Config, dimension: usize) -> Result<TorusGeometry, AppError> {
    let raw = cfg.str("sim.lattice").map_err(AppError::Config)?;
    let line = cfg.line_of("sim.lattice");
    let sides: Vec<usize> = raw
        .split('x')
        .map(|p| {
            p.trim().parse::<usize>().map_err(|_| {
                AppError::Config(format!(
                    "sim.lattice: cannot parse '{raw}' as N or N1xN2 (line {line})"
                ))
            })
        })
        .collect::<Result<_, _>>()?;
    let geom = match (dimension, sides.as_slice()) {
        (1, [n]) => TorusGeometry::line(*n),
        (2, [n]) => TorusGeometry::new(2, [*n, *n]),
        (2, [n1, n2]) => TorusGeometry::new(2, [*n1, *n2]),
        _ => {
            return Err(AppError::Config(format!(
                "sim.lattice: '{raw}' does not match model.dimension {dimension} (line {line})"
            )))
        }
    };
    geom.map_err(|e| AppError::Config(format!("sim.lattice: {e} (line {line})")))
}

fn parse_law(cfg: &Config, dimension: usize) -> Result<JumpLaw, AppError> {
    let name = cfg.str("model.jump_law").map_err(AppError::Config)?;
    let line = cfg.line_of("model.jump_law");
    let law = match (name, dimension) {
        ("standard", _) => JumpLaw::standard(dimension as u8)
            .map_err(|e| AppError::Config(format!("model.jump_law: {e} (line {line})")))?,
        ("tasep", 1) => JumpLaw::tasep_1d(),
        ("ssep", 1) => JumpLaw::ssep_1d(),
        ("special2d", 2) => JumpLaw::special_2d(),
        _ => {
            return Err(AppError::Config(format!(
                "model.jump_law: '{name}' is not available in dimension {dimension} \
                 (choose standard, tasep, ssep, special2d; line {line})"
            )))
        }
    };
    Ok(law)
}

fn run_simulate(args: &RunArgs) -> Result<(), AppError> {
    let started = Instant::now();
    let cfg = load_config(args)?;
    cfg.check_keys(
        &[
            "model.dimension",
            "model.density",
            "model.jump_law",
            "sim.lattice",
            "sim.t_obs",
            "sim.replicas",
            "sim.seed",
            "sim.threads",
            "output.dir",
        ],
        &[
            "model.dimension",
            "model.density",
            "model.jump_law",
            "sim.lattice",
            "sim.t_obs",
            "sim.replicas",
            "sim.seed",
        ],
    )
    .map_err(AppError::Config)?;

    let dimension = cfg.usize("model.dimension").map_err(AppError::Config)?;
    if dimension != 1 && dimension != 2 {
        return Err(AppError::cfg(format!(
            "model.dimension: must be 1 or 2 (line {})",
            cfg.line_of("model.dimension")
        )));
    }
    let rho = cfg.f64("model.density").map_err(AppError::Config)?;
    if !(0.0..=1.0).contains(&rho) || !rho.is_finite() {
        return Err(AppError::cfg(format!(
            "model.density: {rho} outside [0, 1] (line {})",
            cfg.line_of("model.density")
        )));
    }
    let law = parse_law(&cfg, dimension)?;
    let geom = parse_lattice(&cfg, dimension)?;
    let times = cfg.list_f64("sim.t_obs").map_err(AppError::Config)?;
    let ok_times = !times.is_empty()
        && times.iter().all(|t| t.is_finite() && *t >= 0.0)
        && times.windows(2).all(|w| w[0] < w[1]);
    if !ok_times {
        return Err(AppError::cfg(format!(
            "sim.t_obs: times must be finite, nonnegative, strictly increasing (line {})",
            cfg.line_of("sim.t_obs")
        )));
    }
    let replicas = cfg.usize("sim.replicas").map_err(AppError::Config)?;
    if replicas == 0 {
        return Err(AppError::cfg(format!(
            "sim.replicas: need at least one replica (line {})",
            cfg.line_of("sim.replicas")
        )));
    }
    let seed = cfg.u64("sim.seed").map_err(AppError::Config)?;
    if cfg.has("sim.threads") {
        let threads = cfg.usize("sim.threads").map_err(AppError::Config)?;
        if threads == 0 {
            return Err(AppError::cfg(format!(
                "sim.threads: must be positive (line {})",
                cfg.line_of("sim.threads")
            )));
        }
        // results are ordered reductions over replica index, so the thread
        // count never changes the output bytes
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let out = resolve_out_dir(args, &cfg, "simulate")?;

    let batch = run_batch(geom, &law, rho, &times, replicas, seed)?;
    let summary = estimate_all(&batch)?;

    io::structure_table(&summary.structure)?.write_csv(&out.join("structure.csv"))?;
    io::diffusivity_table(&summary.diffusivity, dimension)?
        .write_csv(&out.join("diffusivity.csv"))?;
    if let Some(vel) = &summary.velocity {
        io::velocity_table(vel, dimension)?.write_csv(&out.join("velocity.csv"))?;
    }
    if let Some(spread) = &summary.spread {
        io::spread_table(spread)?.write_csv(&out.join("spread.csv"))?;
    }

    let velocity_json = match &summary.velocity {
        Some(v) => json!({
            "v": [io::finite(v.v[0], "v1")?, io::finite(v.v[1], "v2")?],
            "stderr": [v.stderr[0], v.stderr[1]],
            "replicas": v.replicas,
            "wrap_flagged": v.wrap_flagged,
        }),
        None => serde_json::Value::Null,
    };
    let windows: Vec<serde_json::Value> = summary
        .windows
        .iter()
        .zip(&times)
        .map(|(w, t)| json!({"t": t, "axis1": [w[0].0, w[0].1], "axis2": [w[1].0, w[1].1]}))
        .collect();
    let results = json!({
        "seed": seed,
        "replicas": replicas,
        "velocity": velocity_json,
        "moment_windows": windows,
        "files": ["structure.csv", "diffusivity.csv", "velocity.csv", "spread.csv"],
    });
    write_summary(&out, summary_envelope("simulate", &cfg, started), results)
}

// ---------------------------------------------------------------------------
// resolvent
// ---------------------------------------------------------------------------

fn run_resolvent(args: &RunArgs) -> Result<(), AppError> {
    let started = Instant::now();
    let cfg = load_config(args)?;
    cfg.check_keys(
        &[
            "resolvent.lambda",
            "resolvent.degree",
            "resolvent.window",
            "resolvent.dynamics",
            "output.dir",
        ],
        &["resolvent.lambda", "resolvent.degree", "resolvent.window", "resolvent.dynamics"],
    )
    .map_err(AppError::Config)?;

    let lambdas = cfg.list_f64("resolvent.lambda").map_err(AppError::Config)?;
    if lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(AppError::cfg(format!(
            "resolvent.lambda: all values must be positive (line {})",
            cfg.line_of("resolvent.lambda")
        )));
    }
    let degree = cfg.usize("resolvent.degree").map_err(AppError::Config)?;
    if !(2..=4).contains(&degree) {
        return Err(AppError::cfg(format!(
            "resolvent.degree: must be 2, 3 or 4 (line {})",
            cfg.line_of("resolvent.degree")
        )));
    }
    let window = cfg.usize("resolvent.window").map_err(AppError::Config)?;
    if window < 2 {
        return Err(AppError::cfg(format!(
            "resolvent.window: must be at least 2 (line {})",
            cfg.line_of("resolvent.window")
        )));
    }
    let dynamics = match cfg.str("resolvent.dynamics").map_err(AppError::Config)? {
        "hardcore" => DynamicsKind::HardCore,
        "free" => DynamicsKind::Free,
        other => {
            return Err(AppError::cfg(format!(
                "resolvent.dynamics: '{other}' is not hardcore or free (line {})",
                cfg.line_of("resolvent.dynamics")
            )))
        }
    };
    let out = resolve_out_dir(args, &cfg, "resolvent")?;

    let mut table = io::resolvent_table();
    let mut values = Vec::new();
    for &lambda in &lambdas {
        let report =
            solve_truncated_resolvent(&ResolventProblem::line(lambda, degree, window, dynamics))?;
        table.push(vec![
            Cell::Float(lambda),
            Cell::UInt(degree as u64),
            Cell::Str(dynamics.to_string()),
            Cell::UInt(window as u64),
            Cell::Float(report.value),
            Cell::Bool(report.converged),
            Cell::UInt(report.iterations as u64),
        ])?;
        values.push(json!({
            "lambda": lambda,
            "value": io::finite(report.value, "value")?,
            "converged": report.converged,
            "iterations": report.iterations,
        }));
    }
    table.write_csv(&out.join("resolvent.csv"))?;
    let results = json!({
        "degree": degree,
        "window": window,
        "dynamics": dynamics.to_string(),
        "solves": values,
        "files": ["resolvent.csv"],
    });
    write_summary(&out, summary_envelope("resolvent", &cfg, started), results)
}

// ---------------------------------------------------------------------------
// fourier
// ---------------------------------------------------------------------------

fn run_fourier(args: &RunArgs) -> Result<(), AppError> {
    let started = Instant::now();
    let cfg = load_config(args)?;
    cfg.check_keys(
        &["model.dimension", "fourier.lambda", "fourier.tol", "output.dir"],
        &["model.dimension", "fourier.lambda"],
    )
    .map_err(AppError::Config)?;

    let dimension = cfg.usize("model.dimension").map_err(AppError::Config)?;
    if dimension != 1 && dimension != 2 {
        return Err(AppError::cfg(format!(
            "model.dimension: must be 1 or 2 (line {})",
            cfg.line_of("model.dimension")
        )));
    }
    let mut lambdas = cfg.list_f64("fourier.lambda").map_err(AppError::Config)?;
    if lambdas.len() < 2 {
        return Err(AppError::cfg(format!(
            "fourier.lambda: need at least two values for a fit (line {})",
            cfg.line_of("fourier.lambda")
        )));
    }
    if lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(AppError::cfg(format!(
            "fourier.lambda: all values must be positive (line {})",
            cfg.line_of("fourier.lambda")
        )));
    }
    lambdas.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if lambdas.windows(2).any(|w| w[0] == w[1]) {
        return Err(AppError::cfg(format!(
            "fourier.lambda: values must be distinct (line {})",
            cfg.line_of("fourier.lambda")
        )));
    }
    let tol = if cfg.has("fourier.tol") {
        let tol = cfg.f64("fourier.tol").map_err(AppError::Config)?;
        if !(tol.is_finite() && tol > 0.0) {
            return Err(AppError::cfg(format!(
                "fourier.tol: must be positive (line {})",
                cfg.line_of("fourier.tol")
            )));
        }
        Some(tol)
    } else {
        None
    };
    let out = resolve_out_dir(args, &cfg, "fourier")?;

    let values: Vec<f64> = lambdas
        .iter()
        .map(|&l| degree3_lower_integral(l, dimension))
        .collect::<Result<_, _>>()?;
    let series = ScalingSeries::new(lambdas.clone(), values.clone())?;
    // d = 1 scales as a power of lambda, d = 2 as a power of |log lambda|
    let model = if dimension == 1 { FitModel::Power } else { FitModel::LogPower };
    let fit = fit_scaling(&series, model)?;
    if let Some(tol) = tol {
        if fit.residual_norm > tol {
            return Err(AppError::Compute(format!(
                "scaling fit residual {:.3e} exceeds fourier.tol {tol:.3e}",
                fit.residual_norm
            )));
        }
    }

    let mut table = io::fourier_table();
    for (&lambda, &value) in lambdas.iter().zip(&values) {
        table.push(vec![
            Cell::UInt(dimension as u64),
            Cell::Float(lambda),
            Cell::Float(value),
            Cell::Float(fit.exponent),
            Cell::Float(fit.residual_norm),
        ])?;
    }
    table.write_csv(&out.join("fourier.csv"))?;
    let results = json!({
        "dimension": dimension,
        "model": match model { FitModel::Power => "power", FitModel::LogPower => "log_power" },
        "fit_exponent": io::finite(fit.exponent, "fit_exponent")?,
        "fit_std_error": fit.std_error,
        "residual_norm": fit.residual_norm,
        "files": ["fourier.csv"],
    });
    write_summary(&out, summary_envelope("fourier", &cfg, started), results)
}

// ---------------------------------------------------------------------------
// oracle
// ---------------------------------------------------------------------------

fn run_oracle(args: &RunArgs) -> Result<(), AppError> {
    let started = Instant::now();
    let cfg = load_config(args)?;
    cfg.check_keys(&["oracle.sites", "oracle.lambda", "output.dir"], &[
        "oracle.sites",
        "oracle.lambda",
    ])
    .map_err(AppError::Config)?;

    let sites = cfg.usize("oracle.sites").map_err(AppError::Config)?;
    if !(4..=16).contains(&sites) {
        return Err(AppError::cfg(format!(
            "oracle.sites: exact enumeration supports 4..=16 sites (line {})",
            cfg.line_of("oracle.sites")
        )));
    }
    let lambda = cfg.f64("oracle.lambda").map_err(AppError::Config)?;
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(AppError::cfg(format!(
            "oracle.lambda: must be positive (line {})",
            cfg.line_of("oracle.lambda")
        )));
    }
    let out = resolve_out_dir(args, &cfg, "oracle")?;

    let geom = TorusGeometry::line(sites)?;
    let gen = build_generator_matrix(geom, &JumpLaw::tasep_1d())?;
    let check = laplace_identity_check(&gen, lambda)?;

    let mut table =
        io::Table::new("oracle", &["lambda", "n", "time_side", "resolvent_side", "relgap"]);
    table.push(vec![
        Cell::Float(check.lambda),
        Cell::UInt(sites as u64),
        Cell::Float(check.lhs),
        Cell::Float(check.rhs),
        Cell::Float(check.relgap),
    ])?;
    table.write_csv(&out.join("oracle.csv"))?;

    // the two routes are independent computations of the same transform; a
    // visible gap means one of them is wrong
    const GAP_LIMIT: f64 = 1e-6;
    let results = json!({
        "sites": sites,
        "lambda": lambda,
        "time_side": io::finite(check.lhs, "time_side")?,
        "resolvent_side": io::finite(check.rhs, "resolvent_side")?,
        "relative_gap": io::finite(check.relgap, "relative_gap")?,
        "tail_bound": check.tail_bound,
        "gap_limit": GAP_LIMIT,
        "files": ["oracle.csv"],
    });
    write_summary(&out, summary_envelope("oracle", &cfg, started), results)?;
    if check.relgap >= GAP_LIMIT {
        return Err(AppError::Compute(format!(
            "transform identity gap {:.3e} exceeds {GAP_LIMIT:.0e} at lambda {lambda}",
            check.relgap
        )));
    }
    Ok(())
}
