//! Dispatch statistics and chance margins for affinely controlled
//! generation under Gaussian wind fluctuations, plus the deterministic
//! (uncertainty-blind) OPF used as a baseline.
//!
//! A dispatch is the pair (p̄, α): scheduled outputs plus participation
//! factors. When the aggregate wind deviation is Ω = Σ_k ω_k, generator `g`
//! produces `p̄_g − α_g Ω`, so every bus quantity is an affine function of ω
//! and flows stay Gaussian with means and variances available in closed
//! form. Chance constraints on flows and outputs then reduce to tightened
//! linear limits via the normal quantile.

use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::case::GridCase;
use crate::network::{NetworkError, NetworkFactors};
use crate::qp::{QpBackend, QpError, QpOutcome, QpProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfeasibleKind {
    /// Aggregate demand cannot be met within generator limits.
    GenerationBounds,
    /// Generation suffices but no flow-feasible dispatch exists.
    LineLimits,
    /// The tightened master problem has no feasible point.
    Tightened,
}

#[derive(Debug, Error)]
pub enum OpfError {
    #[error("dispatch is not viable: power balance residual {residual:.6e} MW exceeds {tol:.3e} MW")]
    NonViable { residual: f64, tol: f64 },
    #[error("problem is infeasible ({0:?})")]
    Infeasible(InfeasibleKind),
    #[error("fixed multiplier {omega} is below the required quantile {required:.6}")]
    MultiplierTooSmall { omega: f64, required: f64 },
    #[error("bad control: {0}")]
    BadControl(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Upper-tail standard normal quantile: the `z` with `P(Z > z) = r`.
///
/// One Newton step on the CDF polishes the library quantile to full double
/// precision (the identity `Φ(η(r)) = 1 − r` then holds to ~1e-15).
pub fn eta(r: f64) -> f64 {
    assert!(
        r > 0.0 && r < 1.0,
        "tail probability must lie strictly in (0, 1), got {r}"
    );
    let normal = Normal::new(0.0, 1.0).unwrap();
    let z = normal.inverse_cdf(1.0 - r);
    let err = normal.cdf(z) - (1.0 - r);
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    z - err / pdf
}

/// Tail probabilities `(P(X > upper), P(X < lower))` for a Gaussian with
/// the given mean and standard deviation. Degenerate spread collapses to
/// indicators; an infinite limit contributes zero probability.
pub fn interval_tails(mean: f64, std: f64, lower: f64, upper: f64) -> (f64, f64) {
    let up = if upper == f64::INFINITY {
        0.0
    } else if std <= 0.0 {
        if mean > upper {
            1.0
        } else {
            0.0
        }
    } else {
        let normal = Normal::new(0.0, 1.0).unwrap();
        1.0 - normal.cdf((upper - mean) / std)
    };
    let down = if lower == f64::NEG_INFINITY {
        0.0
    } else if std <= 0.0 {
        if mean < lower {
            1.0
        } else {
            0.0
        }
    } else {
        let normal = Normal::new(0.0, 1.0).unwrap();
        normal.cdf((lower - mean) / std)
    };
    (up, down)
}

/// Scheduled outputs and participation factors, one entry per generator.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineControl {
    pub p_bar: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl AffineControl {
    /// Strict constructor: α entries nonnegative (to 1e-9) and summing to
    /// one (to 1e-8).
    pub fn new(p_bar: Vec<f64>, alpha: Vec<f64>) -> Result<AffineControl, OpfError> {
        if p_bar.len() != alpha.len() {
            return Err(OpfError::BadControl(format!(
                "{} outputs vs {} participation factors",
                p_bar.len(),
                alpha.len()
            )));
        }
        let total: f64 = alpha.iter().sum();
        if (total - 1.0).abs() > 1e-8 {
            return Err(OpfError::BadControl(format!(
                "participation sums to {total}, expected 1"
            )));
        }
        if let Some(a) = alpha.iter().find(|&&a| a < -1e-9) {
            return Err(OpfError::BadControl(format!(
                "negative participation {a}"
            )));
        }
        Ok(AffineControl { p_bar, alpha })
    }

    /// Tolerant constructor for solver output: clamps participation factors
    /// that are negative by at most 1e-6 and renormalizes the sum.
    pub fn polished(p_bar: Vec<f64>, alpha: Vec<f64>) -> Result<AffineControl, OpfError> {
        let mut alpha = alpha;
        for a in &mut alpha {
            if *a < 0.0 {
                if *a < -1e-6 {
                    return Err(OpfError::BadControl(format!(
                        "participation {a} too negative to be roundoff"
                    )));
                }
                *a = 0.0;
            }
        }
        let total: f64 = alpha.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(OpfError::BadControl(format!(
                "participation sums to {total}, too far from 1 to renormalize"
            )));
        }
        for a in &mut alpha {
            *a /= total;
        }
        AffineControl::new(p_bar, alpha)
    }

    pub fn n_generators(&self) -> usize {
        self.p_bar.len()
    }

    pub fn alpha_per_bus(&self, case: &GridCase) -> Vec<f64> {
        let mut out = vec![0.0; case.n_buses()];
        for (g, gen) in case.generators.iter().enumerate() {
            out[gen.bus] += self.alpha[g];
        }
        out
    }

    pub fn p_bar_per_bus(&self, case: &GridCase) -> Vec<f64> {
        let mut out = vec![0.0; case.n_buses()];
        for (g, gen) in case.generators.iter().enumerate() {
            out[gen.bus] += self.p_bar[g];
        }
        out
    }
}

/// Net scheduled power surplus `Σ p̄ + Σ μ − Σ d`; zero for a viable dispatch.
pub fn viability_residual(case: &GridCase, control: &AffineControl) -> f64 {
    control.p_bar.iter().sum::<f64>() + case.total_wind_mean() - case.total_load()
}

fn viability_tolerance(case: &GridCase) -> f64 {
    1e-8 * case.total_load().max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowStat {
    pub mean_mw: f64,
    pub std_mw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenStat {
    pub mean_mw: f64,
    pub std_mw: f64,
}

/// Mean angles, participation response, and per-line flow statistics.
#[derive(Debug, Clone)]
pub struct FlowSolution {
    pub theta_bar: Vec<f64>,
    pub delta: Vec<f64>,
    pub flows: Vec<FlowStat>,
}

/// Per-line Gaussian flow statistics for a viable dispatch.
///
/// Mean: `β (θ̄_i − θ̄_j)`. Variance: `β² Σ_k σ_k² (π_ik − π_jk − δ_i + δ_j)²`
/// — the angle response to farm `k` is its shift column minus the aggregate
/// participation response.
pub fn flow_statistics(
    factors: &NetworkFactors,
    control: &AffineControl,
) -> Result<FlowSolution, OpfError> {
    let case = factors.case();
    let residual = viability_residual(case, control);
    let tol = viability_tolerance(case);
    if residual.abs() > tol {
        return Err(OpfError::NonViable { residual, tol });
    }

    let mut injection = case.fixed_injection();
    for (inj, p) in injection.iter_mut().zip(control.p_bar_per_bus(case)) {
        *inj += p;
    }
    // the viability check above guarantees balance; tiny residuals are
    // shifted onto the largest load so the solve's own gate cannot trip
    let net: f64 = injection.iter().sum();
    if net != 0.0 {
        if let Some(i) = (0..case.n_buses()).max_by(|&a, &b| {
            case.buses[a]
                .load_mw
                .partial_cmp(&case.buses[b].load_mw)
                .unwrap()
        }) {
            injection[i] -= net;
        }
    }
    let theta_bar = factors.mean_angles(&injection)?;
    let delta = factors.delta_from_alpha(&control.alpha_per_bus(case))?;

    let flows = line_statistics(factors, &theta_bar, &delta);
    Ok(FlowSolution {
        theta_bar,
        delta,
        flows,
    })
}

/// Flow statistics given precomputed angle vectors (used by the solver loop,
/// where θ̄ and δ come from the master problem rather than fresh solves).
pub fn line_statistics(
    factors: &NetworkFactors,
    theta_bar: &[f64],
    delta: &[f64],
) -> Vec<FlowStat> {
    let case = factors.case();
    case.lines
        .iter()
        .map(|line| {
            let (i, j, beta) = (line.from_bus, line.to_bus, line.susceptance);
            let mean = beta * (theta_bar[i] - theta_bar[j]);
            let mut var = 0.0;
            for (k, farm) in case.wind_farms.iter().enumerate() {
                let pi = factors.wind_column(k);
                let slope = pi[i] - pi[j] - delta[i] + delta[j];
                var += farm.variance() * slope * slope;
            }
            FlowStat {
                mean_mw: mean,
                std_mw: beta * var.sqrt(),
            }
        })
        .collect()
}

/// Output statistics: mean `p̄_g`, spread `α_g √(Σ_k σ_k²)`.
pub fn generator_statistics(case: &GridCase, control: &AffineControl) -> Vec<GenStat> {
    let sigma = case.total_wind_variance().sqrt();
    control
        .p_bar
        .iter()
        .zip(&control.alpha)
        .map(|(&p, &a)| GenStat {
            mean_mw: p,
            std_mw: a.max(0.0) * sigma,
        })
        .collect()
}

/// Expected generation cost `Σ_g c2 (p̄_g² + Σσ² α_g²) + c1 p̄_g + c0`.
/// The quadratic term picks up the output variance — a dispatch that leans
/// on one generator for balancing pays for it here.
pub fn expected_cost(case: &GridCase, control: &AffineControl) -> f64 {
    let total_var = case.total_wind_variance();
    case.generators
        .iter()
        .enumerate()
        .map(|(g, gen)| {
            let p = control.p_bar[g];
            let a = control.alpha[g];
            gen.cost_quadratic * (p * p + total_var * a * a)
                + gen.cost_linear * p
                + gen.cost_constant
        })
        .sum()
}

/// How the quantile multiplier guarding each limit is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChanceBoundKind {
    /// Each side of each limit gets its own budget ε; multiplier `η(ε)`.
    PerSide,
    /// One fixed multiplier for every constraint. Simpler and more
    /// conservative; rejected if it undercuts any constraint's `η(ε)`.
    FixedMultiplier(f64),
}

impl ChanceBoundKind {
    pub fn multiplier(&self, epsilon: f64) -> Result<f64, OpfError> {
        let required = eta(epsilon);
        match *self {
            ChanceBoundKind::PerSide => Ok(required),
            ChanceBoundKind::FixedMultiplier(omega) => {
                if omega + 1e-12 < required {
                    Err(OpfError::MultiplierTooSmall {
                        omega,
                        required,
                    })
                } else {
                    Ok(omega)
                }
            }
        }
    }
}

/// Which spread enters the generator-limit chance constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GenChanceConvention {
    /// Generator `g` fluctuates by `α_g √(Σσ²)` — its actual response.
    #[default]
    ParticipationScaled,
    /// Every generator is guarded by the full aggregate spread `√(Σσ²)`,
    /// regardless of its participation. Strictly more conservative;
    /// kept for comparison runs.
    Unscaled,
}

/// Signed slack (MW) of every chance constraint at a dispatch; negative
/// means violated. Lines: `fmax − |E f| − m·std(f)`. Generators: distance of
/// `p̄ ± m·spread` to the nearer limit.
#[derive(Debug, Clone)]
pub struct ChanceMargins {
    /// Per line; `None` for unlimited lines.
    pub line_slack_mw: Vec<Option<f64>>,
    pub gen_slack_mw: Vec<f64>,
}

impl ChanceMargins {
    /// Largest violation in MW (zero when everything holds).
    pub fn worst_violation(&self) -> f64 {
        let lines = self
            .line_slack_mw
            .iter()
            .flatten()
            .fold(0.0f64, |acc, &s| acc.max(-s));
        self.gen_slack_mw
            .iter()
            .fold(lines, |acc, &s| acc.max(-s))
    }
}

pub fn chance_margins(
    factors: &NetworkFactors,
    control: &AffineControl,
    bound: ChanceBoundKind,
    convention: GenChanceConvention,
) -> Result<ChanceMargins, OpfError> {
    let case = factors.case();
    let solution = flow_statistics(factors, control)?;

    let mut line_slack = Vec::with_capacity(case.lines.len());
    for (line, stat) in case.lines.iter().zip(&solution.flows) {
        if !line.is_limited() {
            line_slack.push(None);
            continue;
        }
        let m = bound.multiplier(line.epsilon)?;
        line_slack.push(Some(
            line.flow_limit_mw - stat.mean_mw.abs() - m * stat.std_mw,
        ));
    }

    let sigma = case.total_wind_variance().sqrt();
    let mut gen_slack = Vec::with_capacity(case.generators.len());
    for (g, gen) in case.generators.iter().enumerate() {
        let m = bound.multiplier(gen.epsilon)?;
        let spread = match convention {
            GenChanceConvention::ParticipationScaled => control.alpha[g].max(0.0) * sigma,
            GenChanceConvention::Unscaled => sigma,
        };
        let p = control.p_bar[g];
        let up = gen.p_max_mw - p - m * spread;
        let down = p - gen.p_min_mw - m * spread;
        gen_slack.push(up.min(down));
    }

    Ok(ChanceMargins {
        line_slack_mw: line_slack,
        gen_slack_mw: gen_slack,
    })
}

/// Solver bookkeeping carried on a [`Dispatch`].
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub iterations: usize,
    pub max_conic_violation: f64,
    /// Master objective after each iteration (a nondecreasing lower bound
    /// on the final objective for the cutting-plane solver).
    pub lower_bounds: Vec<f64>,
}

/// A solved operating point with its statistics.
#[derive(Debug, Clone)]
pub struct Dispatch {
    pub control: AffineControl,
    pub theta_bar: Vec<f64>,
    pub delta: Vec<f64>,
    pub flow_stats: Vec<FlowStat>,
    pub gen_stats: Vec<GenStat>,
    /// Expected cost of the dispatch (same semantics in every mode).
    pub objective: f64,
    pub diagnostics: Diagnostics,
}

/// Package a control into a full [`Dispatch`], recomputing all statistics.
pub fn dispatch_from_control(
    factors: &NetworkFactors,
    control: AffineControl,
    diagnostics: Diagnostics,
) -> Result<Dispatch, OpfError> {
    let case = factors.case();
    let solution = flow_statistics(factors, &control)?;
    let gen_stats = generator_statistics(case, &control);
    let objective = expected_cost(case, &control);
    Ok(Dispatch {
        theta_bar: solution.theta_bar,
        delta: solution.delta,
        flow_stats: solution.flows,
        gen_stats,
        objective,
        control,
        diagnostics,
    })
}

/// How participation factors are assigned after a deterministic solve
/// (the deterministic problem itself never sees α).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlphaRule {
    /// Uniform over generators scheduled strictly inside their limits
    /// (they have room to move); falls back to all generators if none are.
    #[default]
    UniformInterior,
    /// Uniform over all generators.
    UniformAll,
}

#[derive(Debug, Clone, Default)]
pub struct StandardOpfOptions {
    pub alpha_rule: AlphaRule,
}

/// Deterministic DC OPF at mean wind: minimizes cost subject to balance and
/// hard line limits, ignoring fluctuations. Participation factors are
/// assigned afterwards so the result can be evaluated — and stressed — like
/// any other dispatch.
pub fn solve_standard_opf(
    factors: &NetworkFactors,
    backend: &dyn QpBackend,
    opts: &StandardOpfOptions,
) -> Result<Dispatch, OpfError> {
    let case = factors.case();
    let n_gen = case.generators.len();
    let n_red = case.n_buses() - 1;

    let need = case.total_load() - case.total_wind_mean();
    let p_min_total: f64 = case.generators.iter().map(|g| g.p_min_mw).sum();
    let p_max_total: f64 = case.generators.iter().map(|g| g.p_max_mw).sum();
    let tol = viability_tolerance(case);
    if need < p_min_total - tol || need > p_max_total + tol {
        return Err(OpfError::Infeasible(InfeasibleKind::GenerationBounds));
    }

    // variables: [p_0 .. p_{m-1}, θ̂_0 .. θ̂_{n-2}]
    let theta0 = n_gen;
    let mut qp = QpProblem::new(n_gen + n_red);
    for (g, gen) in case.generators.iter().enumerate() {
        qp.add_square_cost(g, gen.cost_quadratic);
        qp.add_linear_cost(g, gen.cost_linear);
        qp.constant += gen.cost_constant;
        qp.set_bounds(g, gen.p_min_mw, gen.p_max_mw);
    }

    // nodal balance at every non-slack bus: B̂ θ̂ − p_bus = μ − d
    let fixed = case.fixed_injection();
    for (i, row) in factors.reduced_rows().iter().enumerate() {
        let mut cols: Vec<(usize, f64)> =
            row.iter().map(|&(j, v)| (theta0 + j, v)).collect();
        for (g, gen) in case.generators.iter().enumerate() {
            if gen.bus == i {
                cols.push((g, -1.0));
            }
        }
        qp.add_eq(cols, fixed[i]);
    }
    // total balance closes the slack bus's nodal equation
    qp.add_eq(
        (0..n_gen).map(|g| (g, 1.0)).collect(),
        case.total_load() - case.total_wind_mean(),
    );

    let slack = case.slack_bus;
    for line in case.lines.iter().filter(|l| l.is_limited()) {
        let mut row = Vec::new();
        if line.from_bus != slack {
            row.push((theta0 + line.from_bus, line.susceptance));
        }
        if line.to_bus != slack {
            row.push((theta0 + line.to_bus, -line.susceptance));
        }
        qp.add_ineq(row.clone(), line.flow_limit_mw);
        let neg: Vec<(usize, f64)> = row.iter().map(|&(j, v)| (j, -v)).collect();
        qp.add_ineq(neg, line.flow_limit_mw);
    }

    let solution = match backend.solve(&qp)? {
        QpOutcome::Optimal(sol) => sol,
        // generation adequacy was pre-checked, so line limits are binding
        QpOutcome::Infeasible => {
            return Err(OpfError::Infeasible(InfeasibleKind::LineLimits))
        }
        QpOutcome::Unbounded => {
            return Err(OpfError::Qp(QpError::Numerical(
                "deterministic dispatch unbounded (nonconvex cost?)".into(),
            )))
        }
    };

    let p_bar: Vec<f64> = solution.x[..n_gen].to_vec();
    let alpha = assign_alpha(case, &p_bar, opts.alpha_rule);
    let control = AffineControl::polished(p_bar, alpha)?;
    dispatch_from_control(
        factors,
        control,
        Diagnostics {
            iterations: 1,
            ..Diagnostics::default()
        },
    )
}

fn assign_alpha(case: &GridCase, p_bar: &[f64], rule: AlphaRule) -> Vec<f64> {
    let n = case.generators.len();
    let interior: Vec<usize> = match rule {
        AlphaRule::UniformAll => (0..n).collect(),
        AlphaRule::UniformInterior => {
            let picked: Vec<usize> = case
                .generators
                .iter()
                .enumerate()
                .filter(|(g, gen)| {
                    let room = 1e-6 * (gen.p_max_mw - gen.p_min_mw).max(1.0);
                    p_bar[*g] > gen.p_min_mw + room && p_bar[*g] < gen.p_max_mw - room
                })
                .map(|(g, _)| g)
                .collect();
            if picked.is_empty() {
                (0..n).collect()
            } else {
                picked
            }
        }
    };
    let share = 1.0 / interior.len() as f64;
    let mut alpha = vec![0.0; n];
    for g in interior {
        alpha[g] = share;
    }
    alpha
}
