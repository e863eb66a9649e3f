//! Cutting-plane solver for the chance-constrained dispatch problem.
//!
//! The only nonlinearity in the problem is, per limited line, the conic
//! envelope
//!
//! ```text
//! C(δ) = sqrt( Σ_k σ_k² (π_ik − π_jk − δ_i + δ_j)² ) ≤ s
//! ```
//!
//! relating the participation response `δ` to the auxiliary spread variable
//! `s` that the tightened flow limits consume. `C` is convex (a Euclidean
//! norm of an affine map), so it is the upper envelope of its tangent
//! planes, and the solver works with an outer approximation:
//!
//! 1. solve the master QP (all linear rows gathered so far);
//! 2. if every `C(δ*) − s*` is within tolerance, the relaxation is exact —
//!    re-derive the exact statistics from `(p̄*, α*)` and certify the chance
//!    constraints independently;
//! 3. otherwise add the tangent of `C` at `δ*` for the most violated line
//!    and repeat.
//!
//! Because cuts only ever shrink the feasible set, the master objective is
//! a monotonically nondecreasing lower bound on the true optimum, and every
//! cut is a valid inequality — the loop never discards one.
//!
//! The same loop serves the distributionally robust variant: everything
//! set-dependent sits behind [`ConicOracle`], which the robust module
//! implements with worst-case margins and inflated envelopes.

use crate::network::NetworkFactors;
use crate::opf::{
    dispatch_from_control, interval_tails, AffineControl, ChanceBoundKind, Diagnostics,
    Dispatch, GenChanceConvention, InfeasibleKind, OpfError,
};
use crate::qp::{QpBackend, QpOutcome, QpProblem};

pub const DEFAULT_VIOLATION_TOL: f64 = 1e-6;
pub const DEFAULT_CHANCE_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 200;

/// Set-dependent pieces of the master problem and its separation step.
///
/// The nominal implementation ([`NominalOracle`]) uses the forecast
/// variances and no mean margins; the robust module substitutes worst-case
/// values over its uncertainty sets.
pub trait ConicOracle {
    /// Extra mean-flow reserve in MW on (upward, downward) overloads of a
    /// line — zero nominally.
    fn mean_margin_mw(&self, line_idx: usize) -> (f64, f64);

    /// Aggregate wind variance entering generator spreads (MW²).
    fn gen_variance(&self) -> f64;

    /// The conic envelope `C(δ)` for a line at a padded response vector.
    fn value(&self, line_idx: usize, delta: &[f64]) -> f64;

    /// A supporting tangent of `C` at `δ̂`: returns
    /// `(C(δ̂), ∂C/∂δ_i, ∂C/∂δ_j)` for the line's endpoints. Must satisfy
    /// `C(δ) ≥ C(δ̂) + g_i (δ_i − δ̂_i) + g_j (δ_j − δ̂_j)` for all δ.
    fn support(&self, line_idx: usize, delta: &[f64]) -> (f64, f64, f64);
}

/// Forecast-variance oracle: plain Gaussian statistics, no robustness.
pub struct NominalOracle<'a> {
    factors: &'a NetworkFactors,
}

impl<'a> NominalOracle<'a> {
    pub fn new(factors: &'a NetworkFactors) -> Self {
        NominalOracle { factors }
    }

    /// `Σ_k σ_k² c_k` and `Σ_k σ_k² c_k²` for a line's slope coefficients
    /// `c_k = π_ik − π_jk − δ_i + δ_j`.
    fn moments(&self, line_idx: usize, delta: &[f64]) -> (f64, f64) {
        let case = self.factors.case();
        let line = &case.lines[line_idx];
        let mut weighted = 0.0;
        let mut weighted_sq = 0.0;
        for (k, farm) in case.wind_farms.iter().enumerate() {
            let pi = self.factors.wind_column(k);
            let c = pi[line.from_bus] - pi[line.to_bus] - delta[line.from_bus]
                + delta[line.to_bus];
            weighted += farm.variance() * c;
            weighted_sq += farm.variance() * c * c;
        }
        (weighted, weighted_sq)
    }
}

impl ConicOracle for NominalOracle<'_> {
    fn mean_margin_mw(&self, _line_idx: usize) -> (f64, f64) {
        (0.0, 0.0)
    }

    fn gen_variance(&self) -> f64 {
        self.factors.case().total_wind_variance()
    }

    fn value(&self, line_idx: usize, delta: &[f64]) -> f64 {
        self.moments(line_idx, delta).1.sqrt()
    }

    fn support(&self, line_idx: usize, delta: &[f64]) -> (f64, f64, f64) {
        let (weighted, weighted_sq) = self.moments(line_idx, delta);
        let value = weighted_sq.sqrt();
        if value <= 1e-300 {
            // at the exact cone tip the only valid tangent is flat
            return (0.0, 0.0, 0.0);
        }
        (value, -weighted / value, weighted / value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Conic certificate and the independent chance re-check both passed.
    ChanceFeasible,
    /// Conic criterion met, but the exact re-check stayed outside tolerance
    /// and no further cut could separate the point (numerical edge).
    ConicFeasible,
    /// Stopped by the iteration cap before a certificate.
    IterationCap,
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    /// Master objective — a lower bound on the optimum at this iteration.
    pub objective: f64,
    pub max_conic_violation: f64,
    /// Cuts appended after this solve.
    pub cuts_added: usize,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub termination: Termination,
    pub iterations: usize,
    pub cuts_added: usize,
    pub trace: Vec<IterationRecord>,
    /// Largest tail-probability excess over its ε at the final point,
    /// from the independent re-check (negative: satisfied with room).
    pub chance_excess: f64,
}

#[derive(Debug, Clone)]
pub struct CuttingPlaneOptions {
    /// Conic feasibility tolerance on `C(δ*) − s*`.
    pub violation_tol: f64,
    /// Allowed tail-probability excess in the final re-check.
    pub chance_tol: f64,
    pub max_iterations: usize,
    /// Cuts appended per round (most violated lines first).
    pub cuts_per_iteration: usize,
    pub bound: ChanceBoundKind,
    pub convention: GenChanceConvention,
}

impl Default for CuttingPlaneOptions {
    fn default() -> Self {
        CuttingPlaneOptions {
            violation_tol: DEFAULT_VIOLATION_TOL,
            chance_tol: DEFAULT_CHANCE_TOL,
            max_iterations: DEFAULT_MAX_ITER,
            cuts_per_iteration: 1,
            bound: ChanceBoundKind::PerSide,
            convention: GenChanceConvention::default(),
        }
    }
}

/// Variable layout of the master QP:
/// `[p̄ (m), α (m), θ̂ (n−1), δ (n−1), s (one per limited line)]`.
struct MasterLayout {
    n_gen: usize,
    n_red: usize,
    theta0: usize,
    delta0: usize,
    s0: usize,
    /// Indices into `case.lines` of the limited lines, in order of their
    /// `s` variables.
    limited: Vec<usize>,
}

impl MasterLayout {
    fn total(&self) -> usize {
        self.s0 + self.limited.len()
    }
}

/// Solve the nominal chance-constrained dispatch problem.
pub fn solve_cc_opf(
    factors: &NetworkFactors,
    backend: &dyn QpBackend,
    opts: &CuttingPlaneOptions,
) -> Result<(Dispatch, SolveReport), OpfError> {
    let oracle = NominalOracle::new(factors);
    run_cutting_plane(factors, &oracle, backend, opts)
}

/// The shared loop: works for any [`ConicOracle`].
pub fn run_cutting_plane(
    factors: &NetworkFactors,
    oracle: &dyn ConicOracle,
    backend: &dyn QpBackend,
    opts: &CuttingPlaneOptions,
) -> Result<(Dispatch, SolveReport), OpfError> {
    let case = factors.case();
    let (mut master, layout) = build_master(factors, oracle, opts)?;

    let mut trace: Vec<IterationRecord> = Vec::new();
    let mut cuts_total = 0usize;
    let mut iterations = 0usize;

    loop {
        iterations += 1;
        let solution = match backend.solve(&master)? {
            QpOutcome::Optimal(sol) => sol,
            QpOutcome::Infeasible => {
                return Err(OpfError::Infeasible(InfeasibleKind::Tightened))
            }
            QpOutcome::Unbounded => {
                return Err(OpfError::Qp(crate::qp::QpError::Numerical(
                    "master problem unbounded".into(),
                )))
            }
        };
        let x = &solution.x;
        let delta = pad_slack(&x[layout.delta0..layout.delta0 + layout.n_red], factors);

        let mut violations: Vec<(usize, f64)> = layout
            .limited
            .iter()
            .enumerate()
            .map(|(s_idx, &line_idx)| {
                let c = oracle.value(line_idx, &delta);
                (s_idx, c - x[layout.s0 + s_idx])
            })
            .collect();
        let max_violation = violations
            .iter()
            .map(|&(_, v)| v)
            .fold(f64::NEG_INFINITY, f64::max)
            .max(0.0);

        trace.push(IterationRecord {
            objective: solution.objective,
            max_conic_violation: max_violation,
            cuts_added: 0,
        });

        if max_violation <= opts.violation_tol {
            // conic certificate holds at master precision — rebuild the
            // exact statistics from the control alone and re-check
            let control = AffineControl::polished(
                x[..layout.n_gen].to_vec(),
                x[layout.n_gen..2 * layout.n_gen].to_vec(),
            )?;
            let excess = chance_excess(factors, oracle, &control)?;
            if excess <= opts.chance_tol {
                return finish(
                    factors,
                    control,
                    Termination::ChanceFeasible,
                    iterations,
                    cuts_total,
                    trace,
                    excess,
                );
            }
            // master precision and exact statistics disagree: try to
            // separate at the exact response; if even that fails, report
            // the conic certificate with the measured excess
            let exact_delta = factors.delta_from_alpha(&control.alpha_per_bus(case))?;
            let mut separated = false;
            for (s_idx, &line_idx) in layout.limited.iter().enumerate() {
                let c = oracle.value(line_idx, &exact_delta);
                if c - x[layout.s0 + s_idx] > opts.violation_tol {
                    add_cut(&mut master, &layout, factors, oracle, line_idx, s_idx, &exact_delta);
                    cuts_total += 1;
                    trace.last_mut().unwrap().cuts_added += 1;
                    separated = true;
                }
            }
            if !separated {
                return finish(
                    factors,
                    control,
                    Termination::ConicFeasible,
                    iterations,
                    cuts_total,
                    trace,
                    excess,
                );
            }
        } else {
            // most violated first; ties resolved toward the lower line id
            violations.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap()
                    .then_with(|| layout.limited[a.0].cmp(&layout.limited[b.0]))
            });
            for &(s_idx, viol) in violations.iter().take(opts.cuts_per_iteration) {
                if viol <= opts.violation_tol {
                    break;
                }
                add_cut(
                    &mut master,
                    &layout,
                    factors,
                    oracle,
                    layout.limited[s_idx],
                    s_idx,
                    &delta,
                );
                cuts_total += 1;
                trace.last_mut().unwrap().cuts_added += 1;
            }
        }

        if iterations >= opts.max_iterations {
            let control = AffineControl::polished(
                x[..layout.n_gen].to_vec(),
                x[layout.n_gen..2 * layout.n_gen].to_vec(),
            )?;
            let excess = chance_excess(factors, oracle, &control)?;
            return finish(
                factors,
                control,
                Termination::IterationCap,
                iterations,
                cuts_total,
                trace,
                excess,
            );
        }
    }
}

fn finish(
    factors: &NetworkFactors,
    control: AffineControl,
    termination: Termination,
    iterations: usize,
    cuts_added: usize,
    trace: Vec<IterationRecord>,
    chance_excess: f64,
) -> Result<(Dispatch, SolveReport), OpfError> {
    let diagnostics = Diagnostics {
        iterations,
        max_conic_violation: trace.last().map(|r| r.max_conic_violation).unwrap_or(0.0),
        lower_bounds: trace.iter().map(|r| r.objective).collect(),
    };
    let dispatch = dispatch_from_control(factors, control, diagnostics)?;
    Ok((
        dispatch,
        SolveReport {
            termination,
            iterations,
            cuts_added,
            trace,
            chance_excess,
        },
    ))
}

fn pad_slack(reduced: &[f64], factors: &NetworkFactors) -> Vec<f64> {
    let mut out = reduced.to_vec();
    out.insert(factors.slack(), 0.0);
    out
}

fn build_master(
    factors: &NetworkFactors,
    oracle: &dyn ConicOracle,
    opts: &CuttingPlaneOptions,
) -> Result<(QpProblem, MasterLayout), OpfError> {
    let case = factors.case();
    let n_gen = case.generators.len();
    let n_red = case.n_buses() - 1;
    let layout = MasterLayout {
        n_gen,
        n_red,
        theta0: 2 * n_gen,
        delta0: 2 * n_gen + n_red,
        s0: 2 * n_gen + 2 * n_red,
        limited: case
            .lines
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_limited())
            .map(|(i, _)| i)
            .collect(),
    };

    let need = case.total_load() - case.total_wind_mean();
    let p_min_total: f64 = case.generators.iter().map(|g| g.p_min_mw).sum();
    let p_max_total: f64 = case.generators.iter().map(|g| g.p_max_mw).sum();
    if need < p_min_total || need > p_max_total {
        return Err(OpfError::Infeasible(InfeasibleKind::GenerationBounds));
    }

    let mut qp = QpProblem::new(layout.total());

    // expected cost: Σ c2 (p̄² + Σσ² α²) + c1 p̄ + c0 — the α² weight stays
    // the forecast aggregate variance in every mode
    let total_var = case.total_wind_variance();
    let gen_sigma = oracle.gen_variance().sqrt();
    for (g, gen) in case.generators.iter().enumerate() {
        qp.add_square_cost(g, gen.cost_quadratic);
        qp.add_linear_cost(g, gen.cost_linear);
        qp.constant += gen.cost_constant;
        qp.add_square_cost(n_gen + g, gen.cost_quadratic * total_var);

        let m = opts.bound.multiplier(gen.epsilon)?;
        match opts.convention {
            GenChanceConvention::ParticipationScaled => {
                qp.set_bounds(g, gen.p_min_mw, gen.p_max_mw);
                // p̄ ± m √(Σσ²) α within [p_min, p_max]
                qp.add_ineq(vec![(g, 1.0), (n_gen + g, m * gen_sigma)], gen.p_max_mw);
                qp.add_ineq(vec![(g, -1.0), (n_gen + g, m * gen_sigma)], -gen.p_min_mw);
            }
            GenChanceConvention::Unscaled => {
                let lo = gen.p_min_mw + m * gen_sigma;
                let hi = gen.p_max_mw - m * gen_sigma;
                if lo > hi {
                    return Err(OpfError::Infeasible(InfeasibleKind::Tightened));
                }
                qp.set_bounds(g, lo, hi);
            }
        }
        qp.set_bounds(n_gen + g, 0.0, 1.0);
    }

    // nodal equations for mean angles and the participation response
    let fixed = case.fixed_injection();
    for (i, row) in factors.reduced_rows().iter().enumerate() {
        let mut theta_row: Vec<(usize, f64)> = row
            .iter()
            .map(|&(j, v)| (layout.theta0 + j, v))
            .collect();
        let mut delta_row: Vec<(usize, f64)> = row
            .iter()
            .map(|&(j, v)| (layout.delta0 + j, v))
            .collect();
        for (g, gen) in case.generators.iter().enumerate() {
            if gen.bus == i {
                theta_row.push((g, -1.0));
                delta_row.push((n_gen + g, -1.0));
            }
        }
        qp.add_eq(theta_row, fixed[i]);
        qp.add_eq(delta_row, 0.0);
    }
    // responders cover the aggregate deviation exactly, and scheduled
    // generation covers expected net load (closes the slack bus equations)
    qp.add_eq((0..n_gen).map(|g| (n_gen + g, 1.0)).collect(), 1.0);
    qp.add_eq((0..n_gen).map(|g| (g, 1.0)).collect(), need);

    // tightened flow limits: ±β(θ̂_i − θ̂_j) + margin + η β s ≤ fmax
    let slack = case.slack_bus;
    for (s_idx, &line_idx) in layout.limited.iter().enumerate() {
        let line = &case.lines[line_idx];
        let m = opts.bound.multiplier(line.epsilon)?;
        let (up_margin, down_margin) = oracle.mean_margin_mw(line_idx);
        let s_col = (layout.s0 + s_idx, m * line.susceptance);
        let mut flow = Vec::new();
        if line.from_bus != slack {
            flow.push((layout.theta0 + line.from_bus, line.susceptance));
        }
        if line.to_bus != slack {
            flow.push((layout.theta0 + line.to_bus, -line.susceptance));
        }
        let mut up_row = flow.clone();
        up_row.push(s_col);
        qp.add_ineq(up_row, line.flow_limit_mw - up_margin);
        let mut down_row: Vec<(usize, f64)> = flow.iter().map(|&(j, v)| (j, -v)).collect();
        down_row.push(s_col);
        qp.add_ineq(down_row, line.flow_limit_mw - down_margin);

        qp.set_bounds(layout.s0 + s_idx, 0.0, f64::INFINITY);
    }

    Ok((qp, layout))
}

/// Append the tangent of `C` at `δ̂` for one line:
/// `g_i δ_i + g_j δ_j − s ≤ −C(δ̂) + g_i δ̂_i + g_j δ̂_j`.
fn add_cut(
    master: &mut QpProblem,
    layout: &MasterLayout,
    factors: &NetworkFactors,
    oracle: &dyn ConicOracle,
    line_idx: usize,
    s_idx: usize,
    delta_hat: &[f64],
) {
    let (value, g_i, g_j) = oracle.support(line_idx, delta_hat);
    // a flat tangent (cone tip) cannot separate anything
    if value <= 1e-12 && g_i == 0.0 && g_j == 0.0 {
        return;
    }
    let case = factors.case();
    let line = &case.lines[line_idx];
    let slack = case.slack_bus;
    // δ̂ is padded, so slack terms contribute zero to the right-hand side;
    // the matching variable terms are dropped (the response is pinned there)
    let rhs = -value + g_i * delta_hat[line.from_bus] + g_j * delta_hat[line.to_bus];
    let mut row = vec![(layout.s0 + s_idx, -1.0)];
    if line.from_bus != slack {
        row.push((layout.delta0 + line.from_bus, g_i));
    }
    if line.to_bus != slack {
        row.push((layout.delta0 + line.to_bus, g_j));
    }
    master.add_ineq(row, rhs);
}

/// Exact chance re-check from the control alone: rebuild θ̄ and δ with
/// fresh network solves and measure every tail probability against its ε.
/// Returns the worst excess `P − ε` over all sides of all constraints.
pub fn chance_excess(
    factors: &NetworkFactors,
    oracle: &dyn ConicOracle,
    control: &AffineControl,
) -> Result<f64, OpfError> {
    let case = factors.case();
    let solution = crate::opf::flow_statistics(factors, control)?;
    let mut excess = f64::NEG_INFINITY;

    for (line_idx, line) in case.lines.iter().enumerate() {
        if !line.is_limited() {
            continue;
        }
        let (up_margin, down_margin) = oracle.mean_margin_mw(line_idx);
        let std = line.susceptance * oracle.value(line_idx, &solution.delta);
        let mean = solution.flows[line_idx].mean_mw;
        let (up, _) = interval_tails(
            mean + up_margin,
            std,
            f64::NEG_INFINITY,
            line.flow_limit_mw,
        );
        let (_, down) = interval_tails(
            mean - down_margin,
            std,
            -line.flow_limit_mw,
            f64::INFINITY,
        );
        excess = excess.max(up - line.epsilon).max(down - line.epsilon);
    }

    let gen_sigma = oracle.gen_variance().sqrt();
    for (g, gen) in case.generators.iter().enumerate() {
        let std = control.alpha[g].max(0.0) * gen_sigma;
        let (up, down) =
            interval_tails(control.p_bar[g], std, gen.p_min_mw, gen.p_max_mw);
        excess = excess.max(up - gen.epsilon).max(down - gen.epsilon);
    }
    Ok(excess)
}
