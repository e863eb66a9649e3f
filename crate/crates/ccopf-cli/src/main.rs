//! `ccopf` — solve, validate, and sweep chance-constrained DC dispatch
//! problems from the command line.
//!
//! Exit codes are a stable contract:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | input error (missing file, parse failure, bad arguments) |
//! | 2 | the dispatch problem is infeasible |
//! | 3 | the solver hit its iteration cap without a certificate |
//! | 4 | validation gate: an empirical frequency exceeded its target by more than three standard errors |
//!
//! `CCOPF_THREADS` caps the Monte Carlo validator's parallelism (default:
//! hardware concurrency). Reports are byte-deterministic given the inputs
//! and the seed.

mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use ccopf::case::{attach_wind, load_matpower_file, penetration, scale_wind, GridCase};
use ccopf::config::{CaseConfig, SetSpec};
use ccopf::cutting_plane::{solve_cc_opf, CuttingPlaneOptions, SolveReport, Termination};
use ccopf::network::NetworkFactors;
use ccopf::opf::{
    solve_standard_opf, Dispatch, InfeasibleKind, OpfError, StandardOpfOptions,
};
use ccopf::qp::default_backend;
use ccopf::robust::{sets_from_config, solve_robust_opf, BudgetSet, RobustError, UncertaintySet};
use ccopf::validate::{analytic_overload, monte_carlo, realized_epsilon, WindDistribution};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("iteration cap reached after {0} iterations without a certificate")]
    IterationCap(usize),
    #[error("validation gate failed: {0}")]
    Gate(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Infeasible(_) => 2,
            CliError::IterationCap(_) => 3,
            CliError::Gate(_) => 4,
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "ccopf",
    version,
    about = "Chance-constrained DC optimal power flow under wind uncertainty"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the dispatch problem and write a JSON report.
    Solve(SolveArgs),
    /// Simulate a dispatch under a wind distribution and gate the empirical
    /// violation frequencies against their chance targets.
    Validate(ValidateArgs),
    /// Sweep one parameter axis and write a CSV of the outcomes.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// MATPOWER-style case file.
    #[arg(long)]
    case: PathBuf,
    /// Wind/chance JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Output path (JSON report, or CSV for `sweep`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Deterministic DC OPF at mean wind with hard limits.
    Standard,
    /// Chance-constrained dispatch via the cutting-plane solver.
    Ccopf,
    /// Data-robust chance-constrained dispatch (needs a `robust` config section).
    Robust,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Standard => "standard",
            Mode::Ccopf => "ccopf",
            Mode::Robust => "robust",
        }
    }
}

#[derive(Args)]
struct SolverArgs {
    /// Iteration cap of the cutting-plane loop.
    #[arg(long, default_value_t = ccopf::cutting_plane::DEFAULT_MAX_ITER)]
    max_iterations: usize,
    /// Conic violation tolerance (MW² of uncovered flow variance).
    #[arg(long, default_value_t = ccopf::cutting_plane::DEFAULT_VIOLATION_TOL)]
    violation_tol: f64,
    /// Tolerance of the exact chance re-check (probability units).
    #[arg(long, default_value_t = ccopf::cutting_plane::DEFAULT_CHANCE_TOL)]
    chance_tol: f64,
}

impl SolverArgs {
    fn options(&self) -> CuttingPlaneOptions {
        CuttingPlaneOptions {
            violation_tol: self.violation_tol,
            chance_tol: self.chance_tol,
            max_iterations: self.max_iterations,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, value_enum, default_value_t = Mode::Ccopf)]
    mode: Mode,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Solver used when no prior dispatch report is given.
    #[arg(long, value_enum, default_value_t = Mode::Ccopf)]
    mode: Mode,
    /// Re-use the control from a prior `solve` report instead of solving.
    #[arg(long)]
    dispatch: Option<PathBuf>,
    /// Wind fluctuation family: gaussian, laplace, logistic, weibull:<shape>,
    /// t:<dof>, or cauchy.
    #[arg(long, default_value = "gaussian")]
    dist: String,
    #[arg(long, default_value_t = 10_000)]
    samples: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional per-line CSV (line, epsilon, analytic, empirical, SE).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Axis {
    /// Scale total wind output to the given fraction of total demand.
    Penetration,
    /// Relative error on every forecast mean; reports the worst realized tail.
    #[value(name = "mean_error")]
    MeanError,
    /// Relative error on every forecast spread; reports the worst realized tail.
    #[value(name = "std_error")]
    StdError,
    /// Budget cap of the robust sets (solves in robust mode).
    #[value(name = "Gamma", alias = "gamma")]
    Gamma,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Solver used at each grid point (ignored for the Gamma axis, which is
    /// robust by definition).
    #[arg(long, value_enum, default_value_t = Mode::Ccopf)]
    mode: Mode,
    #[arg(long, value_enum)]
    axis: Axis,
    /// First grid value (default depends on the axis).
    #[arg(long)]
    from: Option<f64>,
    /// Last grid value (default depends on the axis).
    #[arg(long)]
    to: Option<f64>,
    #[arg(long, default_value_t = 11)]
    steps: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Usage problems are input errors (exit 1); --help and --version
            // print to stdout and succeed.
            let code = u8::from(err.use_stderr());
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.code());
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    match std::env::var("CCOPF_THREADS") {
        Ok(text) => {
            let n: usize = text
                .parse()
                .map_err(|_| input(format!("CCOPF_THREADS must be a positive integer, got {text:?}")))?;
            if n == 0 {
                return Err(input("CCOPF_THREADS must be a positive integer, got 0"));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(input)
        }
        Err(_) => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Validate(args) => cmd_validate(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

fn load_inputs(common: &CommonArgs) -> Result<(GridCase, CaseConfig), CliError> {
    let base = load_matpower_file(&common.case)
        .map_err(|e| input(format!("{}: {e}", common.case.display())))?;
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| input(format!("{}: {e}", common.config.display())))?;
    let config =
        CaseConfig::from_json(&text).map_err(|e| input(format!("{}: {e}", common.config.display())))?;
    let case =
        attach_wind(&base, &config).map_err(|e| input(format!("{}: {e}", common.config.display())))?;
    Ok((case, config))
}

fn infeasible_slug(kind: InfeasibleKind) -> &'static str {
    match kind {
        InfeasibleKind::GenerationBounds => "generation_bounds",
        InfeasibleKind::LineLimits => "line_limits",
        InfeasibleKind::Tightened => "tightened_master",
    }
}

fn map_opf_error(e: OpfError) -> CliError {
    match e {
        OpfError::Infeasible(kind) => CliError::Infeasible(infeasible_slug(kind).into()),
        other => input(other),
    }
}

fn map_robust_error(e: RobustError) -> CliError {
    match e {
        RobustError::Opf(e) => map_opf_error(e),
        RobustError::Set(e) => input(e),
    }
}

/// Solve in the requested mode. Standard mode has no cutting-plane trace.
fn solve_for_mode(
    factors: &NetworkFactors,
    config: &CaseConfig,
    mode: Mode,
    opts: &CuttingPlaneOptions,
) -> Result<(Dispatch, Option<SolveReport>), CliError> {
    let backend = default_backend();
    match mode {
        Mode::Standard => {
            let dispatch = solve_standard_opf(factors, &backend, &StandardOpfOptions::default())
                .map_err(map_opf_error)?;
            Ok((dispatch, None))
        }
        Mode::Ccopf => {
            let (dispatch, report) =
                solve_cc_opf(factors, &backend, opts).map_err(map_opf_error)?;
            Ok((dispatch, Some(report)))
        }
        Mode::Robust => {
            let section = config.robust.as_ref().ok_or_else(|| {
                input("mode `robust` requires a `robust` section in the config")
            })?;
            let (mean_set, var_set) =
                sets_from_config(section, factors.case().wind_farms.len()).map_err(input)?;
            let (dispatch, report) = solve_robust_opf(
                factors,
                mean_set.as_ref(),
                var_set.as_ref(),
                &backend,
                opts,
            )
            .map_err(map_robust_error)?;
            Ok((dispatch, Some(report)))
        }
    }
}

/// CSV float field: scientific notation keeps sub-normal tail probabilities
/// readable while still round-tripping exactly.
fn csv_float(x: f64) -> String {
    format!("{x:e}")
}

fn write_json(path: &PathBuf, doc: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(doc).map_err(input)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn cmd_solve(args: SolveArgs) -> Result<(), CliError> {
    let (case, config) = load_inputs(&args.common)?;
    let factors = NetworkFactors::build(&case).map_err(input)?;
    let mode = args.mode;

    match solve_for_mode(&factors, &config, mode, &args.solver.options()) {
        Ok((dispatch, solve)) => {
            let doc = report::dispatch_report(mode.name(), &case, &dispatch, solve.as_ref());
            write_json(&args.common.out, &doc)?;
            let phrase = match &solve {
                Some(r) => format!("{:?} after {} iterations", r.termination, r.iterations),
                None => "deterministic".into(),
            };
            println!(
                "{}: objective {:.6}, {}, report -> {}",
                mode.name(),
                dispatch.objective,
                phrase,
                args.common.out.display()
            );
            if let Some(r) = &solve {
                if r.termination == Termination::IterationCap {
                    return Err(CliError::IterationCap(r.iterations));
                }
            }
            Ok(())
        }
        Err(CliError::Infeasible(kind)) => {
            // Still leave a machine-readable artifact naming the binding
            // constraint family before signalling the failure.
            write_json(
                &args.common.out,
                &report::infeasible_report(mode.name(), &kind),
            )?;
            Err(CliError::Infeasible(kind))
        }
        Err(e) => Err(e),
    }
}

fn cmd_validate(args: ValidateArgs) -> Result<(), CliError> {
    let (case, config) = load_inputs(&args.common)?;
    let factors = NetworkFactors::build(&case).map_err(input)?;
    let dist = WindDistribution::parse(&args.dist).map_err(input)?;

    let control = match &args.dispatch {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| input(format!("{}: {e}", path.display())))?;
            let doc: Value = serde_json::from_str(&text)
                .map_err(|e| input(format!("{}: {e}", path.display())))?;
            let control = report::control_from_report(&doc)
                .map_err(|e| input(format!("{}: {e}", path.display())))?;
            if control.p_bar.len() != case.generators.len() {
                return Err(input(format!(
                    "dispatch report has {} generators but the case has {}",
                    control.p_bar.len(),
                    case.generators.len()
                )));
            }
            control
        }
        None => solve_for_mode(&factors, &config, args.mode, &args.solver.options())?
            .0
            .control,
    };

    let analytic: Vec<(f64, f64)> = analytic_overload(&factors, &control)
        .map_err(input)?
        .iter()
        .map(|p| (p.up, p.down))
        .collect();
    let sim = monte_carlo(&factors, &control, dist, args.samples, args.seed).map_err(input)?;

    let mut offenders = Vec::new();
    for (line, outcome) in case.lines.iter().zip(&sim.lines) {
        if !line.is_limited() {
            continue;
        }
        let id = format!(
            "line {}-{}",
            case.external_id(line.from_bus),
            case.external_id(line.to_bus)
        );
        for (side, freq) in [("up", &outcome.up), ("down", &outcome.down)] {
            if freq.rate > line.epsilon + 3.0 * freq.standard_error {
                offenders.push(format!(
                    "{id} {side}: rate {:.5} > target {} + 3*SE {:.5}",
                    freq.rate, line.epsilon, freq.standard_error
                ));
            }
        }
    }
    for (gen, freq) in case.generators.iter().zip(&sim.generators) {
        if freq.rate > gen.epsilon + 3.0 * freq.standard_error {
            offenders.push(format!(
                "generator at bus {}: rate {:.5} > target {} + 3*SE {:.5}",
                case.external_id(gen.bus),
                freq.rate,
                gen.epsilon,
                freq.standard_error
            ));
        }
    }

    let doc = report::validation_report(&case, &sim, &analytic, &offenders);
    write_json(&args.common.out, &doc)?;

    if let Some(csv_path) = &args.csv {
        let mut writer = csv::Writer::from_path(csv_path)
            .map_err(|e| input(format!("{}: {e}", csv_path.display())))?;
        writer
            .write_record(["line", "epsilon", "analytic", "empirical", "standard_error"])
            .map_err(input)?;
        for ((line, outcome), &(up, down)) in case.lines.iter().zip(&sim.lines).zip(&analytic) {
            writer
                .write_record([
                    format!(
                        "{}-{}",
                        case.external_id(line.from_bus),
                        case.external_id(line.to_bus)
                    ),
                    csv_float(line.epsilon),
                    csv_float(up + down),
                    csv_float(outcome.joint.rate),
                    csv_float(outcome.joint.standard_error),
                ])
                .map_err(input)?;
        }
        writer.flush().map_err(input)?;
    }

    println!(
        "{} x {} samples (seed {}): {}, report -> {}",
        sim.distribution,
        sim.samples,
        sim.seed,
        if offenders.is_empty() {
            "all frequencies within target".to_string()
        } else {
            format!("{} frequencies above target", offenders.len())
        },
        args.common.out.display()
    );
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(CliError::Gate(offenders.join("; ")))
    }
}

fn grid(args: &SweepArgs, default_from: f64, default_to: f64) -> Result<Vec<f64>, CliError> {
    let from = args.from.unwrap_or(default_from);
    let to = args.to.unwrap_or(default_to);
    if args.steps == 0 {
        return Err(input("--steps must be at least 1"));
    }
    if args.steps == 1 {
        return Ok(vec![from]);
    }
    Ok((0..args.steps)
        .map(|i| from + (to - from) * i as f64 / (args.steps - 1) as f64)
        .collect())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let (case, config) = load_inputs(&args.common)?;
    let opts = args.solver.options();
    let mut writer = csv::Writer::from_path(&args.common.out)
        .map_err(|e| input(format!("{}: {e}", args.common.out.display())))?;
    let mut rows = 0usize;

    match args.axis {
        Axis::Penetration => {
            let base = penetration(&case).map_err(input)?;
            if base <= 0.0 {
                return Err(input(
                    "penetration sweep needs a case with nonzero wind (check the config's wind list)",
                ));
            }
            writer
                .write_record(["penetration", "feasible", "objective"])
                .map_err(input)?;
            for value in grid(&args, 0.05, 0.5)? {
                let scaled = scale_wind(&case, value / base).map_err(input)?;
                let factors = NetworkFactors::build(&scaled).map_err(input)?;
                let row = match solve_for_mode(&factors, &config, args.mode, &opts) {
                    Ok((dispatch, _)) => {
                        [csv_float(value), "true".into(), csv_float(dispatch.objective)]
                    }
                    Err(CliError::Infeasible(_)) => [csv_float(value), "false".into(), String::new()],
                    Err(e) => return Err(e),
                };
                writer.write_record(row).map_err(input)?;
                rows += 1;
            }
        }
        Axis::MeanError | Axis::StdError => {
            let factors = NetworkFactors::build(&case).map_err(input)?;
            let (dispatch, _) = solve_for_mode(&factors, &config, args.mode, &opts)?;
            let forecast_mean: Vec<f64> = case.wind_farms.iter().map(|f| f.mean_mw).collect();
            let forecast_var: Vec<f64> = case.wind_farms.iter().map(|f| f.variance()).collect();
            let header = match args.axis {
                Axis::MeanError => "mean_error",
                _ => "std_error",
            };
            writer
                .write_record([header, "max_realized_epsilon"])
                .map_err(input)?;
            for value in grid(&args, 0.0, 0.25)? {
                let (true_mean, true_var) = match args.axis {
                    Axis::MeanError => (
                        forecast_mean.iter().map(|m| m * (1.0 + value)).collect(),
                        forecast_var.clone(),
                    ),
                    _ => (
                        forecast_mean.clone(),
                        forecast_var
                            .iter()
                            .map(|v| v * (1.0 + value * value))
                            .collect::<Vec<f64>>(),
                    ),
                };
                let tails = realized_epsilon(&factors, &dispatch.control, &true_mean, &true_var)
                    .map_err(input)?;
                let worst = tails
                    .iter()
                    .map(|(up, down)| up + down)
                    .fold(0.0f64, f64::max);
                writer
                    .write_record([csv_float(value), csv_float(worst)])
                    .map_err(input)?;
                rows += 1;
            }
        }
        Axis::Gamma => {
            let section = config
                .robust
                .as_ref()
                .ok_or_else(|| input("Gamma sweep requires a `robust` section in the config"))?;
            let (mean_spec, var_spec) = section.split();
            let budget_gamma = |spec: Option<&SetSpec>| -> Result<Option<Vec<f64>>, CliError> {
                match spec {
                    None => Ok(None),
                    Some(SetSpec::Budget { gamma, .. }) => Ok(Some(gamma.clone())),
                    Some(SetSpec::Ellipsoid { .. }) => Err(input(
                        "Gamma sweep only applies to budget sets (the config uses an ellipsoid)",
                    )),
                }
            };
            let mean_gamma = budget_gamma(mean_spec)?;
            let var_gamma = budget_gamma(var_spec)?;
            if mean_gamma.is_none() && var_gamma.is_none() {
                return Err(input("the `robust` section defines no budget sets to sweep"));
            }
            let factors = NetworkFactors::build(&case).map_err(input)?;
            let backend = default_backend();
            writer
                .write_record(["gamma", "feasible", "objective"])
                .map_err(input)?;
            for value in grid(&args, 0.0, 2.0)? {
                let build = |gamma: &Option<Vec<f64>>| -> Result<Option<UncertaintySet>, CliError> {
                    gamma
                        .as_ref()
                        .map(|g| {
                            BudgetSet::new(g.clone(), value)
                                .map(UncertaintySet::Budget)
                                .map_err(input)
                        })
                        .transpose()
                };
                let mean_set = build(&mean_gamma)?;
                let var_set = build(&var_gamma)?;
                let row = match solve_robust_opf(
                    &factors,
                    mean_set.as_ref(),
                    var_set.as_ref(),
                    &backend,
                    &opts,
                )
                .map_err(map_robust_error)
                {
                    Ok((dispatch, _)) => {
                        [csv_float(value), "true".into(), csv_float(dispatch.objective)]
                    }
                    Err(CliError::Infeasible(_)) => [csv_float(value), "false".into(), String::new()],
                    Err(e) => return Err(e),
                };
                writer.write_record(row).map_err(input)?;
                rows += 1;
            }
        }
    }

    writer.flush().map_err(input)?;
    println!("{rows} rows -> {}", args.common.out.display());
    Ok(())
}
