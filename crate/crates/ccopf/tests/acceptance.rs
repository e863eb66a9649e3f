//! Release gate: every guarantee the toolkit advertises, checked end to end
//! against independent oracles — closed-form normal tails, brute-force grid
//! search, seeded Monte Carlo, and exact knapsack duals. Each test prints a
//! single summary line (visible with `--nocapture`) and enforces its own
//! wall-clock budget so a performance regression fails as loudly as a wrong
//! number.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use ccopf::case::{attach_wind, load_matpower_file, CaseBuilder, GridCase};
use ccopf::config::{CaseConfig, SetSpec};
use ccopf::cutting_plane::{solve_cc_opf, CuttingPlaneOptions, SolveReport, Termination};
use ccopf::network::NetworkFactors;
use ccopf::opf::{
    chance_margins, eta, expected_cost, flow_statistics, interval_tails, solve_standard_opf,
    viability_residual, AffineControl, ChanceBoundKind, Dispatch, GenChanceConvention,
    StandardOpfOptions,
};
use ccopf::qp::default_backend;
use ccopf::robust::{budget_dual_value, sets_from_config, solve_robust_opf, BudgetSet, UncertaintySet};
use ccopf::validate::{
    affine_flow_map, analytic_overload, monte_carlo, realized_epsilon, WindDistribution,
};

fn cases_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../cases")
}

fn load_pair(case_file: &str, config_file: &str) -> (GridCase, CaseConfig) {
    let dir = cases_dir();
    let base = load_matpower_file(&dir.join(case_file))
        .unwrap_or_else(|e| panic!("{case_file}: {e}"));
    let text = std::fs::read_to_string(dir.join(config_file))
        .unwrap_or_else(|e| panic!("{config_file}: {e}"));
    let config = CaseConfig::from_json(&text).unwrap_or_else(|e| panic!("{config_file}: {e}"));
    let case = attach_wind(&base, &config).unwrap_or_else(|e| panic!("{case_file}: {e}"));
    (case, config)
}

fn budget(t0: Instant, limit_s: u64, label: &str) -> Duration {
    let dt = t0.elapsed();
    assert!(
        dt < Duration::from_secs(limit_s),
        "{label} exceeded its {limit_s}s budget: {dt:?}"
    );
    dt
}

/// The master objective trace is a lower-bound sequence (cuts only tighten
/// the relaxation), so it must be nondecreasing up to solver noise.
fn assert_monotone_lower_bounds(report: &SolveReport, label: &str) {
    for pair in report.trace.windows(2) {
        let slack = 1e-7 * pair[0].objective.abs().max(1.0);
        assert!(
            pair[1].objective >= pair[0].objective - slack,
            "{label}: lower bound dropped from {} to {}",
            pair[0].objective,
            pair[1].objective
        );
    }
}

/// Analytic per-side overload probabilities of every line and generator must
/// sit at or below their targets (within the solver's chance tolerance).
fn assert_dispatch_certified(factors: &NetworkFactors, dispatch: &Dispatch, label: &str) {
    let case = factors.case();
    let probs = analytic_overload(factors, &dispatch.control).unwrap();
    for (line, p) in case.lines.iter().zip(&probs) {
        assert!(
            p.up <= line.epsilon + 1e-6 && p.down <= line.epsilon + 1e-6,
            "{label}: line {}-{} tails ({:.3e}, {:.3e}) exceed eps {}",
            case.external_id(line.from_bus),
            case.external_id(line.to_bus),
            p.up,
            p.down,
            line.epsilon
        );
    }
    for (gen, stat) in case.generators.iter().zip(&dispatch.gen_stats) {
        let (up, down) = interval_tails(stat.mean_mw, stat.std_mw, gen.p_min_mw, gen.p_max_mw);
        assert!(
            up <= gen.epsilon + 1e-6 && down <= gen.epsilon + 1e-6,
            "{label}: generator at bus {} tails ({up:.3e}, {down:.3e}) exceed eps {}",
            case.external_id(gen.bus),
            gen.epsilon
        );
    }
}

/// Normal-quantile calibration: the guard multiplier must invert the
/// standard normal CDF to full double precision across the targets used in
/// practice, and the canonical two-sigma point must land where it should.
#[test]
fn normal_quantiles_are_calibrated() {
    let t0 = Instant::now();
    let probe = eta(0.0227);
    assert!(
        (probe - 2.0).abs() <= 0.01,
        "eta(0.0227) = {probe}, expected 2.00 +/- 0.01"
    );
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut worst = 0.0f64;
    for r in [0.001, 0.01, 0.0227, 0.1, 0.3] {
        worst = worst.max((normal.cdf(eta(r)) - (1.0 - r)).abs());
    }
    assert!(worst <= 1e-9, "round-trip error {worst:.3e} above 1e-9");
    let dt = budget(t0, 1, "quantile calibration");
    println!(
        "PASS quantile calibration: eta(0.0227) = {probe:.5}, max CDF round-trip error {worst:.2e}, {dt:?}"
    );
}

/// A random connected grid (spanning tree plus up to two chords) with one or
/// two generators and up to three wind farms on interior buses. The whole
/// load sits on the last bus, which stays clean and therefore becomes the
/// slack. Returns the case and a balanced uniform control to evaluate.
fn random_grid(rng: &mut ChaCha8Rng) -> (GridCase, AffineControl) {
    let n: usize = rng.random_range(6..=10);
    let n_gens: usize = rng.random_range(1..=2);
    let n_farms: usize = rng.random_range(1..=3);

    let mut pool: Vec<usize> = (1..n).collect();
    pool.shuffle(rng);
    let gen_buses = pool[..n_gens].to_vec();
    let farm_buses = pool[n_gens..n_gens + n_farms].to_vec();

    let farms: Vec<(usize, f64, f64)> = farm_buses
        .iter()
        .map(|&b| (b, rng.random_range(2.0..8.0), rng.random_range(0.5..3.0)))
        .collect();
    let wind_total: f64 = farms.iter().map(|f| f.1).sum();
    let load = wind_total + rng.random_range(5.0..30.0);

    let mut builder = CaseBuilder::new();
    for bus in 1..=n {
        builder = builder.bus(bus, if bus == n { load } else { 0.0 });
    }
    for child in 2..=n {
        let parent = rng.random_range(1..child);
        builder = builder.line(parent, child, rng.random_range(5.0..25.0), f64::INFINITY);
    }
    for _ in 0..rng.random_range(0..=2usize) {
        let a = rng.random_range(1..=n);
        let b = rng.random_range(1..=n);
        if a != b {
            builder = builder.line(a, b, rng.random_range(5.0..25.0), f64::INFINITY);
        }
    }
    for &bus in &gen_buses {
        builder = builder.generator(
            bus,
            0.0,
            150.0,
            rng.random_range(0.01..0.1),
            rng.random_range(1.0..10.0),
            0.0,
        );
    }
    for &(bus, mean, std) in &farms {
        builder = builder.wind(bus, mean, std);
    }
    let case = builder.build().expect("random grid builds");

    let need = load - wind_total;
    let control = AffineControl::new(
        vec![need / n_gens as f64; n_gens],
        vec![1.0 / n_gens as f64; n_gens],
    )
    .unwrap();
    (case, control)
}

/// The closed-form flow mean and variance must agree with seeded Gaussian
/// Monte Carlo on a batch of random grids, line by line, within three
/// standard errors of the respective sample estimate.
#[test]
fn flow_moments_match_monte_carlo_on_random_grids() {
    let t0 = Instant::now();
    const GRIDS: usize = 25;
    const SAMPLES: usize = 100_000;
    let mut master = ChaCha8Rng::seed_from_u64(90_210);
    let mut worst_sigmas = 0.0f64;

    for g in 0..GRIDS {
        let (case, control) = random_grid(&mut master);
        let factors = NetworkFactors::build(&case).expect("factors build");
        let predicted = flow_statistics(&factors, &control).expect("flow statistics");
        let map = affine_flow_map(&factors, &control).expect("flow map");

        let n_lines = case.lines.len();
        let mut sum = vec![0.0f64; n_lines];
        let mut sum_sq = vec![0.0f64; n_lines];
        let mut draw = ChaCha8Rng::seed_from_u64(1_000 + g as u64);
        let mut omega = vec![0.0f64; case.wind_farms.len()];
        for _ in 0..SAMPLES {
            for (w, farm) in omega.iter_mut().zip(&case.wind_farms) {
                let z: f64 = draw.sample(StandardNormal);
                *w = z * farm.std_mw;
            }
            for (l, (s, s2)) in sum.iter_mut().zip(sum_sq.iter_mut()).enumerate() {
                // Accumulate centered on the predicted mean so the variance
                // estimate does not lose digits to a large offset.
                let d = map.evaluate(l, &omega) - predicted.flows[l].mean_mw;
                *s += d;
                *s2 += d * d;
            }
        }

        let n = SAMPLES as f64;
        for (l, stat) in predicted.flows.iter().enumerate() {
            let mean_err = sum[l] / n;
            let sample_var = (sum_sq[l] - sum[l] * sum[l] / n) / (n - 1.0);
            let var = stat.std_mw * stat.std_mw;
            let se_mean = stat.std_mw / n.sqrt();
            let se_var = var * (2.0 / (n - 1.0)).sqrt();
            assert!(
                mean_err.abs() <= 3.0 * se_mean + 1e-9,
                "grid {g} line {l}: mean off by {mean_err:.3e} (se {se_mean:.3e})"
            );
            assert!(
                (sample_var - var).abs() <= 3.0 * se_var + 1e-9,
                "grid {g} line {l}: variance {sample_var:.6} vs {var:.6} (se {se_var:.3e})"
            );
            // Summary metric: sigma ratio is only meaningful when sampling
            // noise dominates the absolute floor (dead lines sit at zero
            // variance exactly and are covered by the 1e-9 slack).
            if se_var > 1e-9 {
                worst_sigmas = worst_sigmas.max((sample_var - var).abs() / se_var);
            }
        }
    }
    let dt = budget(t0, 30, "flow moment check");
    println!(
        "PASS flow moments vs Monte Carlo: {GRIDS} random grids x {SAMPLES} samples, worst variance gap {worst_sigmas:.2} sigma, {dt:?}"
    );
}

/// On a single-generator case the affine family is one-dimensional: alpha is
/// forced to one and the power balance pins the output. A brute-force grid
/// search over that family — each candidate screened by the exact balance
/// residual and the analytic chance margins — must reproduce the solver's
/// objective.
#[test]
fn single_generator_case_matches_grid_search() {
    let t0 = Instant::now();
    let (case, _) = load_pair("case3_path.m", "case3_path_wind.json");
    assert_eq!(case.generators.len(), 1, "desk case has one generator");
    let factors = NetworkFactors::build(&case).unwrap();
    let backend = default_backend();
    let opts = CuttingPlaneOptions::default();
    let (dispatch, report) = solve_cc_opf(&factors, &backend, &opts).expect("solver succeeds");
    assert_eq!(report.termination, Termination::ChanceFeasible);

    let gen = &case.generators[0];
    let need = case.total_load() - case.total_wind_mean();
    const STEPS: usize = 120_000;
    let mut candidates: Vec<f64> = (0..=STEPS)
        .map(|i| gen.p_min_mw + (gen.p_max_mw - gen.p_min_mw) * i as f64 / STEPS as f64)
        .collect();
    candidates.push(need);

    let mut best = f64::INFINITY;
    for p in candidates {
        let control = AffineControl::new(vec![p], vec![1.0]).unwrap();
        if viability_residual(&case, &control).abs() > 1e-9 {
            continue;
        }
        let margins = match chance_margins(
            &factors,
            &control,
            ChanceBoundKind::PerSide,
            GenChanceConvention::ParticipationScaled,
        ) {
            Ok(m) => m,
            Err(_) => continue,
        };
        if margins.worst_violation() > 1e-9 {
            continue;
        }
        best = best.min(expected_cost(&case, &control));
    }
    assert!(best.is_finite(), "grid search found no feasible dispatch");

    let rel = (dispatch.objective - best).abs() / best.abs().max(1.0);
    assert!(
        rel <= 1e-3,
        "solver objective {} vs grid-search {} (relative gap {rel:.3e})",
        dispatch.objective,
        best
    );
    let dt = budget(t0, 5, "grid-search comparison");
    println!(
        "PASS grid-search oracle: objective {:.6} vs {best:.6}, relative gap {rel:.2e}, {dt:?}",
        dispatch.objective
    );
}

/// Every bundled case must solve to a full certificate: conic violations
/// inside tolerance, a monotone lower-bound trace, and analytic per-side
/// overload probabilities at or below every line and generator target. The
/// bundled robust configuration must certify the same way.
#[test]
fn bundled_cases_solve_with_certificates() {
    let t0 = Instant::now();
    let pairs = [
        ("case2.m", "case2_wind.json"),
        ("case3_path.m", "case3_path_wind.json"),
        ("case3_triangle.m", "case3_triangle_wind.json"),
        ("case9_wind.m", "case9_wind.json"),
    ];
    let backend = default_backend();
    let opts = CuttingPlaneOptions::default();
    let mut summary = Vec::new();

    for (case_file, config_file) in pairs {
        let (case, _) = load_pair(case_file, config_file);
        let factors = NetworkFactors::build(&case).unwrap();
        let (dispatch, report) =
            solve_cc_opf(&factors, &backend, &opts).unwrap_or_else(|e| panic!("{case_file}: {e}"));
        assert_eq!(
            report.termination,
            Termination::ChanceFeasible,
            "{case_file}: terminated {:?}",
            report.termination
        );
        let final_violation = report
            .trace
            .last()
            .map(|r| r.max_conic_violation)
            .unwrap_or(0.0);
        assert!(
            final_violation <= opts.violation_tol + 1e-12,
            "{case_file}: final conic violation {final_violation:.3e}"
        );
        assert_monotone_lower_bounds(&report, case_file);
        assert_dispatch_certified(&factors, &dispatch, case_file);
        summary.push(format!(
            "{case_file} it={} obj={:.4}",
            report.iterations, dispatch.objective
        ));
    }

    // The robust configuration ships with the same nine-bus network; its
    // dispatch must carry the identical nominal certificate (the worst-case
    // guard is only ever tighter).
    let (case, config) = load_pair("case9_wind.m", "case9_wind_robust.json");
    let factors = NetworkFactors::build(&case).unwrap();
    let section = config.robust.expect("robust section present");
    let (mean_set, var_set) =
        sets_from_config(&section, case.wind_farms.len()).expect("sets build");
    let (dispatch, report) = solve_robust_opf(
        &factors,
        mean_set.as_ref(),
        var_set.as_ref(),
        &backend,
        &opts,
    )
    .expect("robust solve succeeds");
    assert_eq!(report.termination, Termination::ChanceFeasible);
    assert_monotone_lower_bounds(&report, "case9_wind_robust");
    assert_dispatch_certified(&factors, &dispatch, "case9_wind_robust");
    summary.push(format!(
        "case9_wind_robust it={} obj={:.4}",
        report.iterations, dispatch.objective
    ));

    let dt = budget(t0, 60, "bundled certificates");
    println!("PASS bundled certificates: {}, {dt:?}", summary.join("; "));
}

/// The stressed nine-bus case separates the two solvers: the deterministic
/// dispatch leaves at least one line with more than twice its permitted
/// overload probability, while the chance-constrained dispatch brings every
/// line back inside target.
#[test]
fn stressed_case_separates_standard_and_chance_constrained() {
    let t0 = Instant::now();
    let (case, _) = load_pair("case9_wind.m", "case9_wind.json");
    let factors = NetworkFactors::build(&case).unwrap();
    let backend = default_backend();

    let standard = solve_standard_opf(&factors, &backend, &StandardOpfOptions::default())
        .expect("standard OPF solves");
    let probs = analytic_overload(&factors, &standard.control).unwrap();
    let mut worst_ratio = 0.0f64;
    let mut worst_tail = 0.0f64;
    for (line, p) in case.lines.iter().zip(&probs) {
        if line.is_limited() {
            let tail = p.up.max(p.down);
            if tail / line.epsilon > worst_ratio {
                worst_ratio = tail / line.epsilon;
                worst_tail = tail;
            }
        }
    }
    assert!(
        worst_ratio > 2.0,
        "standard dispatch worst tail {worst_tail:.4} is only {worst_ratio:.2}x its target"
    );

    let opts = CuttingPlaneOptions::default();
    let (cc, report) = solve_cc_opf(&factors, &backend, &opts).expect("cc solve succeeds");
    assert_eq!(report.termination, Termination::ChanceFeasible);
    let cc_probs = analytic_overload(&factors, &cc.control).unwrap();
    for (line, p) in case.lines.iter().zip(&cc_probs) {
        assert!(
            p.up <= line.epsilon + 1e-6 && p.down <= line.epsilon + 1e-6,
            "chance-constrained dispatch leaks on line {}-{}",
            case.external_id(line.from_bus),
            case.external_id(line.to_bus)
        );
    }
    let dt = budget(t0, 30, "standard-vs-cc contrast");
    println!(
        "PASS standard-vs-cc contrast: standard worst tail {worst_tail:.4} ({worst_ratio:.2}x target), cc within target, {dt:?}"
    );
}

/// Re-simulating the Gaussian-calibrated dispatch under mismatched families:
/// a heavy upper tail (Weibull shape 1.2) must overshoot the target, while
/// the near-Gaussian logistic and Student-t families stay within 1.5x.
#[test]
fn out_of_sample_families_rank_as_expected() {
    let t0 = Instant::now();
    let (case, _) = load_pair("case9_wind.m", "case9_wind.json");
    let target = 0.0227;
    assert!(case
        .lines
        .iter()
        .filter(|l| l.is_limited())
        .all(|l| (l.epsilon - target).abs() < 1e-12));
    let factors = NetworkFactors::build(&case).unwrap();
    let backend = default_backend();
    let opts = CuttingPlaneOptions::default();
    let (dispatch, report) = solve_cc_opf(&factors, &backend, &opts).unwrap();
    assert_eq!(report.termination, Termination::ChanceFeasible);

    const SAMPLES: u64 = 10_000;
    const SEED: u64 = 4_242;
    let worst_joint = |dist: WindDistribution| -> f64 {
        let report = monte_carlo(&factors, &dispatch.control, dist, SAMPLES, SEED).unwrap();
        report
            .lines
            .iter()
            .map(|l| l.joint.rate)
            .fold(0.0, f64::max)
    };

    let weibull = worst_joint(WindDistribution::Weibull { shape: 1.2 });
    let logistic = worst_joint(WindDistribution::Logistic);
    let student = worst_joint(WindDistribution::StudentT { dof: 2.5 });

    assert!(
        weibull > target,
        "heavy-tailed Weibull rate {weibull:.4} did not exceed the target {target}"
    );
    assert!(
        logistic <= 1.5 * target,
        "logistic rate {logistic:.4} above 1.5x target"
    );
    assert!(
        student <= 1.5 * target,
        "t(2.5) rate {student:.4} above 1.5x target"
    );
    let dt = budget(t0, 60, "out-of-sample ranking");
    println!(
        "PASS out-of-sample ranking: weibull(1.2) {weibull:.4} > {target}, logistic {logistic:.4} and t(2.5) {student:.4} <= {:.4}, {dt:?}",
        1.5 * target
    );
}

/// Robust pricing: a zero uncertainty budget collapses to the nominal
/// problem, widening the budget never cheapens the dispatch, and the
/// closed-form budget dual matches the knapsack primal to working precision.
#[test]
fn robust_budgets_price_consistently()  {
    let t0 = Instant::now();
    let (case, config) = load_pair("case9_wind.m", "case9_wind_robust.json");
    let factors = NetworkFactors::build(&case).unwrap();
    let backend = default_backend();
    let opts = CuttingPlaneOptions::default();

    let section = config.robust.expect("robust section present");
    let (mean_spec, var_spec) = section.split();
    let gamma_of = |spec: Option<&SetSpec>| -> Vec<f64> {
        match spec.expect("budget spec present") {
            SetSpec::Budget { gamma, .. } => gamma.clone(),
            SetSpec::Ellipsoid { .. } => panic!("expected a budget set"),
        }
    };
    let mean_gamma = gamma_of(mean_spec);
    let var_gamma = gamma_of(var_spec);

    let (nominal, _) = solve_cc_opf(&factors, &backend, &opts).unwrap();
    let mut objectives = Vec::new();
    for cap in [0.0, 0.5, 1.0, 2.0] {
        let mean_set = UncertaintySet::Budget(BudgetSet::new(mean_gamma.clone(), cap).unwrap());
        let var_set = UncertaintySet::Budget(BudgetSet::new(var_gamma.clone(), cap).unwrap());
        let (dispatch, report) =
            solve_robust_opf(&factors, Some(&mean_set), Some(&var_set), &backend, &opts)
                .unwrap_or_else(|e| panic!("cap {cap}: {e}"));
        assert_eq!(
            report.termination,
            Termination::ChanceFeasible,
            "cap {cap}: terminated {:?}",
            report.termination
        );
        objectives.push(dispatch.objective);
    }

    let zero_gap = (objectives[0] - nominal.objective).abs() / nominal.objective.abs().max(1.0);
    assert!(
        zero_gap <= 1e-6,
        "zero-budget objective {} vs nominal {} (relative gap {zero_gap:.3e})",
        objectives[0],
        nominal.objective
    );
    for pair in objectives.windows(2) {
        assert!(
            pair[1] >= pair[0] - 1e-7 * pair[0].abs().max(1.0),
            "objective fell from {} to {} as the budget widened",
            pair[0],
            pair[1]
        );
    }

    // Strong duality of the inner maximization: the breakpoint-scan dual
    // must equal the fractional-knapsack primal on random budget sets.
    let mut rng = ChaCha8Rng::seed_from_u64(5_150);
    let mut worst_gap = 0.0f64;
    for _ in 0..50 {
        let dim: usize = rng.random_range(1..=8);
        let gamma: Vec<f64> = (0..dim)
            .map(|_| {
                if rng.random_range(0.0..1.0) < 0.15 {
                    0.0
                } else {
                    rng.random_range(0.0..5.0)
                }
            })
            .collect();
        let cap = rng.random_range(0.0..4.0);
        let weights: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..3.0)).collect();
        let set = BudgetSet::new(gamma, cap).unwrap();
        let primal = UncertaintySet::Budget(set.clone()).support(&weights);
        let dual = budget_dual_value(&set, &weights);
        let gap = (primal - dual).abs() / primal.abs().max(1.0);
        worst_gap = worst_gap.max(gap);
        assert!(
            gap <= 1e-8,
            "duality gap {gap:.3e}: primal {primal} vs dual {dual}"
        );
    }

    let dt = budget(t0, 60, "robust pricing");
    println!(
        "PASS robust pricing: zero-budget gap {zero_gap:.2e}, objectives {objectives:?} nondecreasing, worst duality gap {worst_gap:.2e}, {dt:?}"
    );
}

/// Forecast-error sensitivity: with the true parameters equal to the
/// forecast the realized tails reproduce the analytic ones exactly, and
/// inflating every standard deviation by a factor sqrt(1 + V^2) degrades the
/// worst tail monotonically but no faster than the normal-tail envelope
/// allows.
#[test]
fn realized_epsilon_tracks_forecast_errors() {
    let t0 = Instant::now();
    let (case, _) = load_pair("case9_wind.m", "case9_wind.json");
    let factors = NetworkFactors::build(&case).unwrap();
    let backend = default_backend();
    let opts = CuttingPlaneOptions::default();
    let (dispatch, report) = solve_cc_opf(&factors, &backend, &opts).unwrap();
    assert_eq!(report.termination, Termination::ChanceFeasible);

    let forecast_mean: Vec<f64> = case.wind_farms.iter().map(|f| f.mean_mw).collect();
    let forecast_var: Vec<f64> = case.wind_farms.iter().map(|f| f.variance()).collect();

    let exact = realized_epsilon(&factors, &dispatch.control, &forecast_mean, &forecast_var)
        .expect("realized tails");
    let analytic = analytic_overload(&factors, &dispatch.control).unwrap();
    for (l, ((up, down), p)) in exact.iter().zip(&analytic).enumerate() {
        assert!(
            (up - p.up).abs() <= 1e-12 && (down - p.down).abs() <= 1e-12,
            "line {l}: realized ({up:.3e}, {down:.3e}) vs analytic ({:.3e}, {:.3e})",
            p.up,
            p.down
        );
    }

    let worst_tail = |spread_error: f64| -> f64 {
        let scale = 1.0 + spread_error * spread_error;
        let true_var: Vec<f64> = forecast_var.iter().map(|v| v * scale).collect();
        realized_epsilon(&factors, &dispatch.control, &forecast_mean, &true_var)
            .unwrap()
            .iter()
            .map(|(up, down)| up + down)
            .fold(0.0, f64::max)
    };

    let base = worst_tail(0.0);
    let target = 0.0227;
    assert!(
        (base - target).abs() <= 5e-6,
        "binding tail {base:.6} not at the target {target}"
    );
    // Mean-value envelope: scaling every sigma by s shrinks the binding
    // quantile from q0 to q0/s, and the tail gains at most the gap times the
    // normal density at the shrunken quantile (the density's maximum on the
    // traversed interval).
    let q0 = eta(base);
    let mut previous = 0.0f64;
    let mut last = base;
    for spread_error in [0.0, 0.05, 0.10, 0.25] {
        let tail = worst_tail(spread_error);
        assert!(
            tail >= previous - 1e-12,
            "worst tail fell from {previous:.6} to {tail:.6} at V = {spread_error}"
        );
        let s = (1.0 + spread_error * spread_error).sqrt();
        let qv = q0 / s;
        let density = (-0.5 * qv * qv).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let cap = base + density * (q0 - qv) + 1e-9;
        assert!(
            tail <= cap,
            "worst tail {tail:.6} at V = {spread_error} exceeds the envelope {cap:.6}"
        );
        previous = tail;
        last = tail;
    }

    let dt = budget(t0, 10, "forecast-error sensitivity");
    println!(
        "PASS forecast-error sensitivity: zero-error tails exact, worst tail {base:.5} -> {last:.5} over V <= 0.25 within the envelope, {dt:?}"
    );
}

/// Optional large-case smoke test: drop MATPOWER files under `cases/user/`
/// (with an optional same-stem `.json` wind config) and the solver must
/// certify each of them without leaning on the iteration cap.
#[test]
fn user_supplied_cases_solve_within_iteration_budget() {
    let user_dir = cases_dir().join("user");
    let mut files: Vec<PathBuf> = match std::fs::read_dir(&user_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "m"))
            .collect(),
        Err(_) => Vec::new(),
    };
    files.sort();
    if files.is_empty() {
        println!("SKIP large-case smoke: no MATPOWER files under cases/user/");
        return;
    }

    let backend = default_backend();
    let opts = CuttingPlaneOptions::default();
    for path in files {
        let t0 = Instant::now();
        let mut case = load_matpower_file(&path).unwrap_or_else(|e| panic!("{path:?}: {e}"));
        let config_path = path.with_extension("json");
        if config_path.exists() {
            let text = std::fs::read_to_string(&config_path).unwrap();
            let config = CaseConfig::from_json(&text).unwrap();
            case = attach_wind(&case, &config).unwrap();
        }
        let factors = NetworkFactors::build(&case).unwrap();
        let (_, report) =
            solve_cc_opf(&factors, &backend, &opts).unwrap_or_else(|e| panic!("{path:?}: {e}"));
        assert!(
            report.iterations <= 100,
            "{path:?}: {} master iterations",
            report.iterations
        );
        assert_ne!(report.termination, Termination::IterationCap);
        println!(
            "PASS large-case smoke: {:?} solved in {} iterations, {:?}",
            path.file_name().unwrap(),
            report.iterations,
            t0.elapsed()
        );
    }
}
