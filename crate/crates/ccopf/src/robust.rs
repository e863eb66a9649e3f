//! Data-robust dispatch: chance constraints that hold for every forecast
//! consistent with declared error sets.
//!
//! Forecast errors live per wind farm: a mean shift `r` (true mean
//! `μ̃ = μ̄ + r`) and a variance shift `v` (true variance `σ̃² = σ̄² + v`),
//! each ranging over a small convex [`UncertaintySet`]. Requiring the line
//! and generator chance constraints for every admissible `(r, v)` folds into
//! three ingredients, all reachable through the shared cutting-plane engine:
//!
//! * a per-line, per-direction **mean reserve** `β·max_r Σ_k r_k (π_ik − π_jk)`
//!   — decision-free (the slack bus absorbs the aggregate shift), so it is
//!   precomputed once and subtracted from the line rating;
//! * a **worst-case conic envelope**
//!   `C(δ) = √(Σ_k σ̄_k² w_k + max_v Σ_k v_k w_k)` with weights
//!   `w_k = (π_ik − π_jk − δ_i + δ_j)²`, still convex in `δ` and therefore
//!   still served by tangent cuts: a cut fixes the worst `v̄` at `δ̂` and
//!   linearizes the resulting fixed-`v̄` envelope, which underestimates the
//!   true worst case everywhere;
//! * a single **inflated generator variance** `Σ_k σ̄_k² + max_v Σ_k v_k`
//!   (the generator weight vector is all ones, independent of `δ`), computed
//!   once and used for the generator half-widths.
//!
//! A compact reformulation that instead carries the inner maximization's LP
//! dual variables per line is possible but places a square root over terms
//! linear in those duals — a nonconvex constraint (see the
//! `square_root_of_linear_terms_is_not_convex` test) — so cuts are the only
//! solve path here.
//!
//! The expected-cost objective keeps the forecast variances: robustness
//! guards feasibility, not the cost model.

use serde::Serialize;
use thiserror::Error;

use crate::config::{RobustSection, SetSpec};
use crate::cutting_plane::{run_cutting_plane, ConicOracle, CuttingPlaneOptions, SolveReport};
use crate::network::NetworkFactors;
use crate::opf::{flow_statistics, AffineControl, ChanceBoundKind, Dispatch, OpfError};
use crate::qp::QpBackend;

#[derive(Debug, Error)]
pub enum SetError {
    #[error("uncertainty set: {0}")]
    BadParameter(String),
    #[error("uncertainty set is {got}-dimensional but the case has {expected} wind farms")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("ellipsoid matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error(
        "variance set can push farm {farm} below zero variance: \
         worst downward shift {reach} exceeds the forecast variance {base}"
    )]
    VarianceFloor { farm: usize, reach: f64, base: f64 },
}

/// Everything that can go wrong while building and solving a robust model.
#[derive(Debug, Error)]
pub enum RobustError {
    #[error(transparent)]
    Set(#[from] SetError),
    #[error(transparent)]
    Opf(#[from] OpfError),
}

/// Box-with-budget error set:
/// `{ v : |v_k| ≤ γ_k, Σ_k |v_k|/γ_k ≤ Γ }`.
///
/// `γ_k` caps each farm's error individually and `Γ` caps how many farms can
/// err at full amplitude simultaneously. Zero entries (or `Γ = 0`) pin the
/// corresponding coordinates to zero, degenerating gracefully toward `{0}`.
#[derive(Debug, Clone, Serialize)]
pub struct BudgetSet {
    gamma: Vec<f64>,
    cap: f64,
}

impl BudgetSet {
    pub fn new(gamma: Vec<f64>, cap: f64) -> Result<Self, SetError> {
        if !cap.is_finite() || cap < 0.0 {
            return Err(SetError::BadParameter(format!(
                "budget cap must be finite and nonnegative, got {cap}"
            )));
        }
        if let Some(bad) = gamma.iter().find(|g| !g.is_finite() || **g < 0.0) {
            return Err(SetError::BadParameter(format!(
                "per-farm amplitudes must be finite and nonnegative, got {bad}"
            )));
        }
        Ok(BudgetSet { gamma, cap })
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    /// Fractional knapsack over utilizations `u_k = |v_k|/γ_k ∈ [0, 1]`,
    /// `Σ u_k ≤ Γ`, maximizing `Σ gains_k u_k` (gains must be ≥ 0). Returns
    /// the utilization profile and the attained value. Ties and zero gains
    /// resolve toward lower indices and zero utilization, keeping the
    /// maximizer deterministic.
    fn knapsack(&self, gains: &[f64]) -> (Vec<f64>, f64) {
        let mut order: Vec<usize> = (0..gains.len()).collect();
        order.sort_by(|&a, &b| gains[b].partial_cmp(&gains[a]).unwrap().then(a.cmp(&b)));
        let mut u = vec![0.0; gains.len()];
        let mut room = self.cap;
        let mut value = 0.0;
        for k in order {
            if room <= 0.0 || gains[k] <= 0.0 {
                break;
            }
            let take = room.min(1.0);
            u[k] = take;
            value += gains[k] * take;
            room -= take;
        }
        (u, value)
    }
}

/// Ellipsoidal error set `{ v : vᵀ A v ≤ b }` with `A` symmetric positive
/// definite. `b = 0` degenerates to `{0}`.
#[derive(Debug, Clone, Serialize)]
pub struct EllipsoidSet {
    a: Vec<Vec<f64>>,
    b: f64,
    /// Lower Cholesky factor of `A`, kept for the linear solves behind
    /// support evaluations.
    #[serde(skip)]
    chol: Vec<Vec<f64>>,
}

impl EllipsoidSet {
    #[allow(clippy::needless_range_loop)] // triangular scans read clearer indexed
    pub fn new(a: Vec<Vec<f64>>, b: f64) -> Result<Self, SetError> {
        let n = a.len();
        if a.iter().any(|row| row.len() != n) {
            return Err(SetError::BadParameter(
                "ellipsoid matrix must be square".into(),
            ));
        }
        if !b.is_finite() || b < 0.0 {
            return Err(SetError::BadParameter(format!(
                "ellipsoid radius must be finite and nonnegative, got {b}"
            )));
        }
        let mut scale: f64 = 0.0;
        for i in 0..n {
            for j in 0..i {
                let skew = (a[i][j] - a[j][i]).abs();
                if skew > 1e-9 * a[i][j].abs().max(a[j][i].abs()).max(1.0) {
                    return Err(SetError::BadParameter(format!(
                        "ellipsoid matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
            if !a[i][i].is_finite() {
                return Err(SetError::BadParameter(
                    "ellipsoid matrix has a non-finite diagonal".into(),
                ));
            }
            scale = scale.max(a[i][i].abs());
        }
        let chol = dense_cholesky(&a, 1e-12 * scale.max(1.0))
            .ok_or(SetError::NotPositiveDefinite)?;
        Ok(EllipsoidSet { a, b, chol })
    }

    pub fn matrix(&self) -> &[Vec<f64>] {
        &self.a
    }

    pub fn radius(&self) -> f64 {
        self.b
    }

    /// Solve `A x = rhs` through the cached factor.
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = rhs.len();
        let l = &self.chol;
        let mut x = rhs.to_vec();
        for i in 0..n {
            for j in 0..i {
                x[i] -= l[i][j] * x[j];
            }
            x[i] /= l[i][i];
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= l[j][i] * x[j];
            }
            x[i] /= l[i][i];
        }
        x
    }
}

/// Lower Cholesky factor of a dense symmetric matrix; `None` when a pivot
/// falls below `tol` (not positive definite).
#[allow(clippy::needless_range_loop)] // paired row reads need the index
fn dense_cholesky(a: &[Vec<f64>], tol: f64) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = 0.5 * (a[i][j] + a[j][i]);
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= tol {
                    return None;
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Some(l)
}

/// A convex, sign-symmetric set of per-farm forecast errors containing 0.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum UncertaintySet {
    Budget(BudgetSet),
    Ellipsoid(EllipsoidSet),
}

impl UncertaintySet {
    /// Build from the JSON description, checking the dimension against the
    /// case's wind-farm count.
    pub fn from_spec(spec: &SetSpec, n_farms: usize) -> Result<Self, SetError> {
        let set = match spec {
            SetSpec::Budget { gamma, cap } => {
                UncertaintySet::Budget(BudgetSet::new(gamma.clone(), *cap)?)
            }
            SetSpec::Ellipsoid { a, b } => {
                UncertaintySet::Ellipsoid(EllipsoidSet::new(a.clone(), *b)?)
            }
        };
        if set.dim() != n_farms {
            return Err(SetError::DimensionMismatch {
                expected: n_farms,
                got: set.dim(),
            });
        }
        Ok(set)
    }

    pub fn dim(&self) -> usize {
        match self {
            UncertaintySet::Budget(s) => s.gamma.len(),
            UncertaintySet::Ellipsoid(s) => s.a.len(),
        }
    }

    /// The support value `max { cᵀv : v in the set }`.
    pub fn support(&self, c: &[f64]) -> f64 {
        self.argmax(c).1
    }

    /// A maximizer of `cᵀv` over the set, with its value.
    ///
    /// Budget sets reduce to a fractional knapsack on `|c_k| γ_k` (take the
    /// largest gains at full amplitude until the budget runs out, then a
    /// fraction of the next); ellipsoids scale `A⁻¹c` onto the boundary,
    /// giving the closed form `√(b · cᵀA⁻¹c)`.
    pub fn argmax(&self, c: &[f64]) -> (Vec<f64>, f64) {
        assert_eq!(c.len(), self.dim(), "coefficient dimension mismatch");
        match self {
            UncertaintySet::Budget(s) => {
                let gains: Vec<f64> = c
                    .iter()
                    .zip(&s.gamma)
                    .map(|(ck, gk)| ck.abs() * gk)
                    .collect();
                let (u, value) = s.knapsack(&gains);
                let v = c
                    .iter()
                    .zip(&s.gamma)
                    .zip(&u)
                    .map(|((ck, gk), uk)| ck.signum() * gk * uk)
                    .collect();
                (v, value)
            }
            UncertaintySet::Ellipsoid(s) => {
                let x = s.solve(c);
                let t: f64 = c.iter().zip(&x).map(|(ck, xk)| ck * xk).sum();
                if t <= 0.0 || s.b == 0.0 {
                    return (vec![0.0; c.len()], 0.0);
                }
                let scale = (s.b / t).sqrt();
                let v: Vec<f64> = x.iter().map(|xk| scale * xk).collect();
                (v, (s.b * t).sqrt())
            }
        }
    }

    /// The largest `|v_k|` the set allows — the support value at `±e_k`.
    pub fn max_abs_coordinate(&self, k: usize) -> f64 {
        match self {
            UncertaintySet::Budget(s) => s.gamma[k] * s.cap.min(1.0),
            UncertaintySet::Ellipsoid(_) => {
                let mut e = vec![0.0; self.dim()];
                e[k] = 1.0;
                self.support(&e)
            }
        }
    }

    /// Membership test with a relative tolerance — for checking maximizers.
    pub fn contains(&self, v: &[f64], tol: f64) -> bool {
        match self {
            UncertaintySet::Budget(s) => {
                let mut used = 0.0;
                for (vk, gk) in v.iter().zip(&s.gamma) {
                    if *gk == 0.0 {
                        if vk.abs() > tol {
                            return false;
                        }
                    } else {
                        if vk.abs() > gk * (1.0 + tol) {
                            return false;
                        }
                        used += vk.abs() / gk;
                    }
                }
                used <= s.cap + tol * (1.0 + s.cap)
            }
            UncertaintySet::Ellipsoid(s) => {
                let n = v.len();
                let mut quad = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        quad += v[i] * s.a[i][j] * v[j];
                    }
                }
                quad <= s.b * (1.0 + tol) + tol
            }
        }
    }
}

/// The LP dual of the budget-set weighted maximization, minimized by a
/// breakpoint scan. Used as an independent check on the knapsack maximizer
/// (strong duality: the two values agree exactly).
///
/// For `max { Σ w_k v_k : 0 ≤ v_k ≤ γ_k, Σ v_k/γ_k ≤ Γ }` with `w ≥ 0`, the
/// dual is `min { Γa + Σ γ_k b_k : b_k + a/γ_k ≥ w_k, a ≥ 0, b ≥ 0 }` — the
/// budget row enters each dual constraint through its coefficient `1/γ_k`,
/// so the amplitude weighting must follow `a` into the constraints, not just
/// sit in the objective. Substituting `b'_k = γ_k b_k` gives the form scanned
/// here: `min { Γa + Σ b'_k : a + b'_k ≥ γ_k w_k }`, whose optimum lies at a
/// breakpoint `a ∈ {0} ∪ {γ_k w_k}`.
pub fn budget_dual_value(set: &BudgetSet, weights: &[f64]) -> f64 {
    assert_eq!(weights.len(), set.gamma.len(), "weight dimension mismatch");
    assert!(
        weights.iter().all(|w| *w >= 0.0),
        "dual oracle needs nonnegative weights"
    );
    let caps: Vec<f64> = weights.iter().zip(&set.gamma).map(|(w, g)| w * g).collect();
    let mut best = f64::INFINITY;
    for &a in std::iter::once(&0.0).chain(caps.iter()) {
        let value: f64 =
            set.cap * a + caps.iter().map(|ck| (ck - a).max(0.0)).sum::<f64>();
        best = best.min(value);
    }
    best
}

/// Build the optional mean/variance sets named by a parsed `robust` config
/// section, dimension-checked against the wind-farm count.
pub fn sets_from_config(
    section: &RobustSection,
    n_farms: usize,
) -> Result<(Option<UncertaintySet>, Option<UncertaintySet>), SetError> {
    let (mean, variance) = section.split();
    let mean = mean
        .map(|spec| UncertaintySet::from_spec(spec, n_farms))
        .transpose()?;
    let variance = variance
        .map(|spec| UncertaintySet::from_spec(spec, n_farms))
        .transpose()?;
    Ok((mean, variance))
}

/// Worst-case oracle for the cutting-plane engine: precomputed mean reserves
/// per line, an inflated generator variance, and envelope/tangent queries
/// that maximize over the variance set.
pub struct RobustOracle<'a> {
    factors: &'a NetworkFactors,
    var_set: Option<&'a UncertaintySet>,
    /// Per line: (upward, downward) mean reserve in MW.
    margins: Vec<(f64, f64)>,
    /// `Σ_k σ̄_k² + max_v Σ_k v_k` — the generator spread variance.
    gen_variance: f64,
}

impl<'a> RobustOracle<'a> {
    /// Validates set dimensions and, for the variance set, that no reachable
    /// shift can push a farm's variance below zero; then precomputes every
    /// decision-free quantity.
    pub fn new(
        factors: &'a NetworkFactors,
        mean_set: Option<&'a UncertaintySet>,
        var_set: Option<&'a UncertaintySet>,
    ) -> Result<Self, SetError> {
        let case = factors.case();
        let n_farms = case.wind_farms.len();
        for set in [mean_set, var_set].into_iter().flatten() {
            if set.dim() != n_farms {
                return Err(SetError::DimensionMismatch {
                    expected: n_farms,
                    got: set.dim(),
                });
            }
        }
        if let Some(set) = var_set {
            for (k, farm) in case.wind_farms.iter().enumerate() {
                let reach = set.max_abs_coordinate(k);
                let base = farm.variance();
                if reach > base + 1e-12 * base.max(1.0) {
                    return Err(SetError::VarianceFloor {
                        farm: k,
                        reach,
                        base,
                    });
                }
            }
        }

        let margins = case
            .lines
            .iter()
            .enumerate()
            .map(|(line_idx, _)| match mean_set {
                None => (0.0, 0.0),
                Some(set) => {
                    let c = line_coefficients(factors, line_idx);
                    let beta = case.lines[line_idx].susceptance;
                    let flipped: Vec<f64> = c.iter().map(|ck| -ck).collect();
                    (beta * set.support(&c), beta * set.support(&flipped))
                }
            })
            .collect();

        let base: f64 = case.total_wind_variance();
        let gen_variance = match var_set {
            None => base,
            Some(set) => base + set.support(&vec![1.0; n_farms]),
        };

        Ok(RobustOracle {
            factors,
            var_set,
            margins,
            gen_variance,
        })
    }

    /// Squared response slopes `w_k = (π_ik − π_jk − δ_i + δ_j)²`.
    fn weights(&self, line_idx: usize, delta: &[f64]) -> Vec<f64> {
        let case = self.factors.case();
        let line = &case.lines[line_idx];
        let shift = delta[line.from_bus] - delta[line.to_bus];
        (0..case.wind_farms.len())
            .map(|k| {
                let pi = self.factors.wind_column(k);
                let slope = pi[line.from_bus] - pi[line.to_bus] - shift;
                slope * slope
            })
            .collect()
    }

    /// Worst admissible variances at the response `δ̂` for one line:
    /// forecast variances plus the maximizing shift for these weights.
    fn worst_variances(&self, line_idx: usize, delta: &[f64]) -> Vec<f64> {
        let case = self.factors.case();
        let w = self.weights(line_idx, delta);
        let shift = match self.var_set {
            None => vec![0.0; w.len()],
            Some(set) => set.argmax(&w).0,
        };
        case.wind_farms
            .iter()
            .zip(&shift)
            // the construction-time floor check makes the clamp a no-op up
            // to roundoff
            .map(|(farm, vk)| (farm.variance() + vk).max(0.0))
            .collect()
    }
}

impl ConicOracle for RobustOracle<'_> {
    fn mean_margin_mw(&self, line_idx: usize) -> (f64, f64) {
        self.margins[line_idx]
    }

    fn gen_variance(&self) -> f64 {
        self.gen_variance
    }

    fn value(&self, line_idx: usize, delta: &[f64]) -> f64 {
        let case = self.factors.case();
        let w = self.weights(line_idx, delta);
        let base: f64 = case
            .wind_farms
            .iter()
            .zip(&w)
            .map(|(farm, wk)| farm.variance() * wk)
            .sum();
        let extra = match self.var_set {
            None => 0.0,
            Some(set) => set.support(&w),
        };
        (base + extra).sqrt()
    }

    fn support(&self, line_idx: usize, delta: &[f64]) -> (f64, f64, f64) {
        // Freeze the worst variance shift at δ̂ and linearize the resulting
        // fixed-shift envelope. That envelope touches the worst-case one at
        // δ̂ (the shift is maximizing there) and lies below it everywhere
        // else, so its tangent is a valid cut for the worst case too.
        let case = self.factors.case();
        let line = &case.lines[line_idx];
        let sigma2 = self.worst_variances(line_idx, delta);
        let shift = delta[line.from_bus] - delta[line.to_bus];
        let mut weighted = 0.0;
        let mut weighted_sq = 0.0;
        for (k, s2) in sigma2.iter().enumerate() {
            let pi = self.factors.wind_column(k);
            let slope = pi[line.from_bus] - pi[line.to_bus] - shift;
            weighted += s2 * slope;
            weighted_sq += s2 * slope * slope;
        }
        let value = weighted_sq.sqrt();
        if value <= 1e-300 {
            return (0.0, 0.0, 0.0);
        }
        (value, -weighted / value, weighted / value)
    }
}

/// Restriction of a line's angle-difference solution rows to the wind
/// coordinates: `c_k = π_ik − π_jk`.
fn line_coefficients(factors: &NetworkFactors, line_idx: usize) -> Vec<f64> {
    let case = factors.case();
    let line = &case.lines[line_idx];
    (0..case.wind_farms.len())
        .map(|k| {
            let pi = factors.wind_column(k);
            pi[line.from_bus] - pi[line.to_bus]
        })
        .collect()
}

/// Per-line worst-case slack in MW for a given control, `(upward, downward)`
/// per limited line (`None` when unlimited): rating minus worst mean flow
/// minus the tightened spread term. Nonnegative slacks certify the robust
/// chance constraints.
pub fn robust_line_margins(
    factors: &NetworkFactors,
    oracle: &RobustOracle,
    control: &AffineControl,
    bound: ChanceBoundKind,
) -> Result<Vec<Option<(f64, f64)>>, OpfError> {
    let case = factors.case();
    let solution = flow_statistics(factors, control)?;
    let mut out = Vec::with_capacity(case.lines.len());
    for (line_idx, line) in case.lines.iter().enumerate() {
        if !line.is_limited() {
            out.push(None);
            continue;
        }
        let m = bound.multiplier(line.epsilon)?;
        let spread = m * line.susceptance * oracle.value(line_idx, &solution.delta);
        let (up_margin, down_margin) = oracle.mean_margin_mw(line_idx);
        let mean = solution.flows[line_idx].mean_mw;
        let up = line.flow_limit_mw - (mean + up_margin + spread);
        let down = line.flow_limit_mw - (-mean + down_margin + spread);
        out.push(Some((up, down)));
    }
    Ok(out)
}

/// Solve the data-robust dispatch problem: nominal behaviour for any half
/// whose set is omitted. The report's `chance_excess` is measured against
/// the worst-case mean and variance, so a pass certifies every distribution
/// the sets admit.
pub fn solve_robust_opf(
    factors: &NetworkFactors,
    mean_set: Option<&UncertaintySet>,
    var_set: Option<&UncertaintySet>,
    backend: &dyn QpBackend,
    opts: &CuttingPlaneOptions,
) -> Result<(Dispatch, SolveReport), RobustError> {
    let oracle = RobustOracle::new(factors, mean_set, var_set)?;
    Ok(run_cutting_plane(factors, &oracle, backend, opts)?)
}
