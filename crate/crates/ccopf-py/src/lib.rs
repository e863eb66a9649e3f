//! Python bindings: load a grid, solve it (deterministic, chance-constrained
//! or robust), and validate dispatches by analytic tails or seeded Monte
//! Carlo — the same pipeline the CLI drives, importable as `ccopf_py`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ccopf::case::{attach_wind, load_matpower_file, GridCase};
use ccopf::config::{CaseConfig, RobustSection};
use ccopf::cutting_plane::{solve_cc_opf, CuttingPlaneOptions, SolveReport, Termination};
use ccopf::network::NetworkFactors;
use ccopf::opf::{solve_standard_opf, StandardOpfOptions};
use ccopf::qp::default_backend;
use ccopf::robust::{sets_from_config, solve_robust_opf};
use ccopf::validate::{self, WindDistribution};

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// An immutable grid: buses, lines, generators and wind farms, with the
/// chance targets already attached.
#[pyclass(frozen)]
struct Grid {
    case: GridCase,
    robust: Option<RobustSection>,
}

impl Grid {
    fn factors(&self) -> PyResult<NetworkFactors> {
        NetworkFactors::build(&self.case).map_err(value_err)
    }
}

#[pymethods]
impl Grid {
    /// Load a MATPOWER-style case file; the optional JSON config attaches
    /// wind farms and chance targets.
    #[new]
    #[pyo3(signature = (case_path, config_path=None))]
    fn new(case_path: &str, config_path: Option<&str>) -> PyResult<Self> {
        let base = load_matpower_file(std::path::Path::new(case_path)).map_err(value_err)?;
        match config_path {
            None => Ok(Grid {
                case: base,
                robust: None,
            }),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| value_err(format!("{path}: {e}")))?;
                let config = CaseConfig::from_json(&text).map_err(value_err)?;
                let case = attach_wind(&base, &config).map_err(value_err)?;
                Ok(Grid {
                    case,
                    robust: config.robust,
                })
            }
        }
    }

    #[getter]
    fn n_buses(&self) -> usize {
        self.case.n_buses()
    }

    #[getter]
    fn n_lines(&self) -> usize {
        self.case.lines.len()
    }

    #[getter]
    fn n_generators(&self) -> usize {
        self.case.generators.len()
    }

    #[getter]
    fn n_wind_farms(&self) -> usize {
        self.case.wind_farms.len()
    }

    #[getter]
    fn total_load_mw(&self) -> f64 {
        self.case.total_load()
    }

    #[getter]
    fn total_wind_mean_mw(&self) -> f64 {
        self.case.total_wind_mean()
    }

    /// Total forecast wind output over total demand.
    #[getter]
    fn penetration(&self) -> PyResult<f64> {
        ccopf::case::penetration(&self.case).map_err(value_err)
    }

    /// `(bus, mean_mw, std_mw)` per wind farm, in farm order.
    #[getter]
    fn wind(&self) -> Vec<(usize, f64, f64)> {
        self.case
            .wind_farms
            .iter()
            .map(|w| (self.case.external_id(w.bus), w.mean_mw, w.std_mw))
            .collect()
    }

    /// `(from, to, limit_mw_or_None, epsilon)` per line, in line order.
    #[getter]
    fn lines(&self) -> Vec<(usize, usize, Option<f64>, f64)> {
        self.case
            .lines
            .iter()
            .map(|l| {
                (
                    self.case.external_id(l.from_bus),
                    self.case.external_id(l.to_bus),
                    l.is_limited().then_some(l.flow_limit_mw),
                    l.epsilon,
                )
            })
            .collect()
    }

    /// New grid with every farm's mean and spread scaled by `factor`.
    fn scale_wind(&self, factor: f64) -> PyResult<Grid> {
        Ok(Grid {
            case: ccopf::case::scale_wind(&self.case, factor).map_err(value_err)?,
            robust: self.robust.clone(),
        })
    }

    /// New grid with every bus load scaled by `factor`.
    fn scale_loads(&self, factor: f64) -> PyResult<Grid> {
        Ok(Grid {
            case: ccopf::case::scale_loads(&self.case, factor).map_err(value_err)?,
            robust: self.robust.clone(),
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Grid({} buses, {} lines, {} generators, {} wind farms)",
            self.case.n_buses(),
            self.case.lines.len(),
            self.case.generators.len(),
            self.case.wind_farms.len()
        )
    }
}

/// A solved dispatch: the affine control, its statistics, and the solver
/// trace when one exists.
#[pyclass(frozen)]
struct Dispatch {
    mode: String,
    inner: ccopf::opf::Dispatch,
    report: Option<SolveReport>,
    generator_buses: Vec<usize>,
}

#[pymethods]
impl Dispatch {
    #[getter]
    fn mode(&self) -> &str {
        &self.mode
    }

    #[getter]
    fn objective(&self) -> f64 {
        self.inner.objective
    }

    /// Scheduled output per generator (MW).
    #[getter]
    fn p_bar(&self) -> Vec<f64> {
        self.inner.control.p_bar.clone()
    }

    /// Participation factor per generator.
    #[getter]
    fn alpha(&self) -> Vec<f64> {
        self.inner.control.alpha.clone()
    }

    #[getter]
    fn generator_buses(&self) -> Vec<usize> {
        self.generator_buses.clone()
    }

    /// `(mean_mw, std_mw)` per line.
    #[getter]
    fn flow_stats(&self) -> Vec<(f64, f64)> {
        self.inner
            .flow_stats
            .iter()
            .map(|s| (s.mean_mw, s.std_mw))
            .collect()
    }

    /// `(mean_mw, std_mw)` per generator.
    #[getter]
    fn generator_stats(&self) -> Vec<(f64, f64)> {
        self.inner
            .gen_stats
            .iter()
            .map(|s| (s.mean_mw, s.std_mw))
            .collect()
    }

    /// `"chance_feasible"`, `"conic_feasible"`, `"iteration_cap"`, or
    /// `"deterministic"` for the standard solver.
    #[getter]
    fn termination(&self) -> &'static str {
        match &self.report {
            None => "deterministic",
            Some(r) => match r.termination {
                Termination::ChanceFeasible => "chance_feasible",
                Termination::ConicFeasible => "conic_feasible",
                Termination::IterationCap => "iteration_cap",
            },
        }
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.report.as_ref().map_or(1, |r| r.iterations)
    }

    /// `(objective, max_conic_violation, cuts_added)` per iteration.
    #[getter]
    fn trace(&self) -> Vec<(f64, f64, usize)> {
        self.report.as_ref().map_or_else(Vec::new, |r| {
            r.trace
                .iter()
                .map(|t| (t.objective, t.max_conic_violation, t.cuts_added))
                .collect()
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Dispatch(mode={}, objective={:.6}, termination={})",
            self.mode,
            self.inner.objective,
            self.termination()
        )
    }
}

/// Empirical violation frequencies from a seeded Monte Carlo run.
#[pyclass(frozen)]
struct Validation {
    #[pyo3(get)]
    distribution: String,
    #[pyo3(get)]
    samples: u64,
    #[pyo3(get)]
    seed: u64,
    /// Per line: empirical up / down / joint overload rates.
    #[pyo3(get)]
    line_up: Vec<f64>,
    #[pyo3(get)]
    line_down: Vec<f64>,
    #[pyo3(get)]
    line_joint: Vec<f64>,
    /// Standard error of the joint rate per line.
    #[pyo3(get)]
    line_joint_se: Vec<f64>,
    /// Per generator: empirical rate of leaving its output bounds.
    #[pyo3(get)]
    generators: Vec<f64>,
}

#[pymethods]
impl Validation {
    fn __repr__(&self) -> String {
        format!(
            "Validation({} x {}, worst joint rate {:.5})",
            self.distribution,
            self.samples,
            self.line_joint.iter().cloned().fold(0.0, f64::max)
        )
    }
}

/// Solve the grid: `mode` is `"standard"`, `"ccopf"`, or `"robust"`
/// (robust needs the config's `robust` section).
#[pyfunction]
#[pyo3(signature = (grid, mode="ccopf", max_iterations=None, violation_tol=None, chance_tol=None))]
fn solve(
    grid: &Grid,
    mode: &str,
    max_iterations: Option<usize>,
    violation_tol: Option<f64>,
    chance_tol: Option<f64>,
) -> PyResult<Dispatch> {
    let factors = grid.factors()?;
    let backend = default_backend();
    let mut opts = CuttingPlaneOptions::default();
    if let Some(cap) = max_iterations {
        opts.max_iterations = cap;
    }
    if let Some(tol) = violation_tol {
        opts.violation_tol = tol;
    }
    if let Some(tol) = chance_tol {
        opts.chance_tol = tol;
    }

    let (inner, report) = match mode {
        "standard" => (
            solve_standard_opf(&factors, &backend, &StandardOpfOptions::default())
                .map_err(runtime_err)?,
            None,
        ),
        "ccopf" => {
            let (d, r) = solve_cc_opf(&factors, &backend, &opts).map_err(runtime_err)?;
            (d, Some(r))
        }
        "robust" => {
            let section = grid.robust.as_ref().ok_or_else(|| {
                value_err("mode 'robust' requires a config with a `robust` section")
            })?;
            let (mean_set, var_set) =
                sets_from_config(section, grid.case.wind_farms.len()).map_err(value_err)?;
            let (d, r) = solve_robust_opf(
                &factors,
                mean_set.as_ref(),
                var_set.as_ref(),
                &backend,
                &opts,
            )
            .map_err(runtime_err)?;
            (d, Some(r))
        }
        other => {
            return Err(value_err(format!(
                "unknown mode {other:?} (expected standard, ccopf, or robust)"
            )))
        }
    };
    let generator_buses = grid
        .case
        .generators
        .iter()
        .map(|g| grid.case.external_id(g.bus))
        .collect();
    Ok(Dispatch {
        mode: mode.to_string(),
        inner,
        report,
        generator_buses,
    })
}

/// Seeded Monte Carlo frequencies of line overloads and generator bound
/// violations under a wind family (`"gaussian"`, `"laplace"`, `"logistic"`,
/// `"weibull:<shape>"`, `"t:<dof>"`, `"cauchy"`).
#[pyfunction]
#[pyo3(signature = (grid, dispatch, dist="gaussian", samples=10_000, seed=0))]
fn simulate(
    grid: &Grid,
    dispatch: &Dispatch,
    dist: &str,
    samples: u64,
    seed: u64,
) -> PyResult<Validation> {
    let factors = grid.factors()?;
    let family = WindDistribution::parse(dist).map_err(value_err)?;
    let report = validate::monte_carlo(&factors, &dispatch.inner.control, family, samples, seed)
        .map_err(value_err)?;
    Ok(Validation {
        distribution: report.distribution,
        samples: report.samples,
        seed: report.seed,
        line_up: report.lines.iter().map(|l| l.up.rate).collect(),
        line_down: report.lines.iter().map(|l| l.down.rate).collect(),
        line_joint: report.lines.iter().map(|l| l.joint.rate).collect(),
        line_joint_se: report.lines.iter().map(|l| l.joint.standard_error).collect(),
        generators: report.generators.iter().map(|g| g.rate).collect(),
    })
}

/// Closed-form Gaussian `(up, down)` overload probabilities per line.
#[pyfunction]
fn analytic_overload(grid: &Grid, dispatch: &Dispatch) -> PyResult<Vec<(f64, f64)>> {
    let factors = grid.factors()?;
    Ok(validate::analytic_overload(&factors, &dispatch.inner.control)
        .map_err(value_err)?
        .iter()
        .map(|p| (p.up, p.down))
        .collect())
}

/// `(up, down)` tail probabilities per line when the true wind means and
/// variances differ from the forecast the dispatch was computed against.
#[pyfunction]
fn realized_epsilon(
    grid: &Grid,
    dispatch: &Dispatch,
    true_means_mw: Vec<f64>,
    true_variances_mw2: Vec<f64>,
) -> PyResult<Vec<(f64, f64)>> {
    let factors = grid.factors()?;
    validate::realized_epsilon(
        &factors,
        &dispatch.inner.control,
        &true_means_mw,
        &true_variances_mw2,
    )
    .map_err(value_err)
}

/// Upper-tail standard normal quantile: the `z` with `P(Z > z) = r`.
#[pyfunction]
fn eta(r: f64) -> f64 {
    ccopf::opf::eta(r)
}

/// `(P(X > upper), P(X < lower))` for a normal with the given moments.
#[pyfunction]
fn interval_tails(mean: f64, std: f64, lower: f64, upper: f64) -> (f64, f64) {
    ccopf::opf::interval_tails(mean, std, lower, upper)
}

#[pymodule]
fn ccopf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Grid>()?;
    m.add_class::<Dispatch>()?;
    m.add_class::<Validation>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_overload, m)?)?;
    m.add_function(wrap_pyfunction!(realized_epsilon, m)?)?;
    m.add_function(wrap_pyfunction!(eta, m)?)?;
    m.add_function(wrap_pyfunction!(interval_tails, m)?)?;
    Ok(())
}
