//! Randomized structural properties of the network algebra and the affine
//! dispatch model, checked over generated grids: Laplacian identities,
//! linearity of the reduced solves, Kirchhoff conservation, affinity of the
//! simulated flows in the wind deviation, exact homogeneity of the flow
//! spread in sigma, and monotonicity of the chance slack in the target.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ccopf::case::{CaseBuilder, GridCase};
use ccopf::network::{Laplacian, NetworkFactors};
use ccopf::opf::{
    chance_margins, flow_statistics, AffineControl, ChanceBoundKind, GenChanceConvention,
};

/// A connected random grid: spanning tree plus up to two chords, one or two
/// generators, and (optionally) up to three wind farms on interior buses.
/// The last bus stays clean so the automatic slack selection lands on it.
/// The per-farm spread scale lets homogeneity tests rebuild the identical
/// topology with every sigma multiplied by a constant.
fn build_grid(n: usize, seed: u64, farms: usize, sigma_scale: f64) -> GridCase {
    assert!((4..=10).contains(&n) && farms <= 3 && n > 2 + farms);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut pool: Vec<usize> = (1..n).collect();
    // Deterministic shuffle driven by the same stream as the parameters.
    for i in (1..pool.len()).rev() {
        pool.swap(i, rng.random_range(0..=i));
    }
    let n_gens = rng.random_range(1..=2usize);
    let gen_buses = pool[..n_gens].to_vec();
    let farm_buses = pool[n_gens..n_gens + farms].to_vec();

    let farm_params: Vec<(usize, f64, f64)> = farm_buses
        .iter()
        .map(|&b| {
            (
                b,
                rng.random_range(2.0..8.0),
                rng.random_range(0.5..3.0) * sigma_scale,
            )
        })
        .collect();
    let wind_total: f64 = farm_params.iter().map(|f| f.1).sum();
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
    for &(bus, mean, std) in &farm_params {
        builder = builder.wind(bus, mean, std);
    }
    builder.build().expect("random grid builds")
}

/// Uniform balanced dispatch for the grid's generators.
fn uniform_control(case: &GridCase) -> AffineControl {
    let n_gens = case.generators.len();
    let need = case.total_load() - case.total_wind_mean();
    AffineControl::new(
        vec![need / n_gens as f64; n_gens],
        vec![1.0 / n_gens as f64; n_gens],
    )
    .unwrap()
}

/// A random injection vector re-centered to sum to zero (the only kind the
/// reduced system accepts).
fn balanced_injection(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut u: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
    let shift = u.iter().sum::<f64>() / n as f64;
    for x in &mut u {
        *x -= shift;
    }
    u
}

/// Line flows implied by solving the angles for an explicit per-bus
/// injection — the "simulate one outcome" path the statistics must match.
fn flows_of_injection(factors: &NetworkFactors, injection: &[f64]) -> Vec<f64> {
    let theta = factors.mean_angles(injection).expect("angles solve");
    factors
        .case()
        .lines
        .iter()
        .map(|l| l.susceptance * (theta[l.from_bus] - theta[l.to_bus]))
        .collect()
}

/// Per-bus injection realized by a control at one wind outcome omega.
fn injection_at(case: &GridCase, control: &AffineControl, omega: &[f64]) -> Vec<f64> {
    let shortfall: f64 = omega.iter().sum();
    let mut injection = case.fixed_injection();
    let p_bar = control.p_bar_per_bus(case);
    let alpha = control.alpha_per_bus(case);
    for i in 0..case.n_buses() {
        injection[i] += p_bar[i] - alpha[i] * shortfall;
    }
    for (farm, w) in case.wind_farms.iter().zip(omega) {
        injection[farm.bus] += w;
    }
    injection
}

proptest! {
    /// Off-diagonals are assembled first and the diagonal is set to minus
    /// their sum, so every row of the Laplacian must cancel to machine
    /// precision, and the external/internal bus maps must invert each other.
    #[test]
    fn laplacian_rows_cancel_and_bus_maps_invert(n in 4usize..=10, seed in any::<u64>()) {
        let case = build_grid(n, seed, 0, 1.0);
        let lap = Laplacian::from_case(&case);
        for i in 0..case.n_buses() {
            let scale = lap.entry(i, i).abs().max(1.0);
            prop_assert!(lap.row_sum(i).abs() <= 1e-12 * scale);
            prop_assert_eq!(case.internal_id(case.external_id(i)), Some(i));
        }
    }

    /// Each stored wind-shift column, padded with a zero slack entry, must
    /// solve the reduced system against the unit injection at its farm bus.
    #[test]
    fn wind_columns_solve_their_defining_systems(n in 6usize..=10, seed in any::<u64>(), farms in 1usize..=3) {
        let case = build_grid(n, seed, farms, 1.0);
        let factors = NetworkFactors::build(&case).unwrap();
        let lap = Laplacian::from_case(&case).dense();
        let slack = case.slack_bus;
        for (k, farm) in case.wind_farms.iter().enumerate() {
            let pi = factors.wind_column(k);
            prop_assert!(pi[slack] == 0.0);
            for (i, row) in lap.iter().enumerate() {
                if i == slack {
                    continue;
                }
                let lhs: f64 = row.iter().zip(pi).map(|(l, p)| l * p).sum();
                let rhs = if i == farm.bus { 1.0 } else { 0.0 };
                prop_assert!(
                    (lhs - rhs).abs() <= 1e-8,
                    "row {} residual {:.3e}", i, lhs - rhs
                );
            }
        }
    }

    /// The reduced solve is linear: angles of a linear combination of
    /// balanced injections equal the combination of the angle solutions.
    #[test]
    fn angle_solves_are_linear(n in 4usize..=10, seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let case = build_grid(n, seed, 0, 1.0);
        let factors = NetworkFactors::build(&case).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let u = balanced_injection(&mut rng, case.n_buses());
        let v = balanced_injection(&mut rng, case.n_buses());
        let combo: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();

        let theta_u = factors.mean_angles(&u).unwrap();
        let theta_v = factors.mean_angles(&v).unwrap();
        let theta_c = factors.mean_angles(&combo).unwrap();
        for i in 0..case.n_buses() {
            let expected = a * theta_u[i] + b * theta_v[i];
            prop_assert!(
                (theta_c[i] - expected).abs() <= 1e-9 * expected.abs().max(1.0),
                "bus {}: {} vs {}", i, theta_c[i], expected
            );
        }
    }

    /// Kirchhoff: the net line flow out of every bus equals its injection.
    #[test]
    fn flows_conserve_every_balanced_injection(n in 4usize..=10, seed in any::<u64>()) {
        let case = build_grid(n, seed, 0, 1.0);
        let factors = NetworkFactors::build(&case).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf10e);
        let u = balanced_injection(&mut rng, case.n_buses());
        let flows = flows_of_injection(&factors, &u);

        let mut net = vec![0.0f64; case.n_buses()];
        for (line, f) in case.lines.iter().zip(&flows) {
            net[line.from_bus] += f;
            net[line.to_bus] -= f;
        }
        let scale = u.iter().fold(1.0f64, |acc, x| acc.max(x.abs()));
        for i in 0..case.n_buses() {
            prop_assert!(
                (net[i] - u[i]).abs() <= 1e-8 * scale,
                "bus {}: net {} vs injection {}", i, net[i], u[i]
            );
        }
    }

    /// For a fixed control the simulated line flow is affine in the wind
    /// deviation: any affine combination of outcomes (weights summing to
    /// one) maps to the same combination of flows.
    #[test]
    fn simulated_flows_are_affine_in_the_deviation(
        n in 6usize..=10,
        seed in any::<u64>(),
        farms in 1usize..=3,
        a in -1.5f64..2.5,
    ) {
        let case = build_grid(n, seed, farms, 1.0);
        let factors = NetworkFactors::build(&case).unwrap();
        let control = uniform_control(&case);
        let b = 1.0 - a;

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xaff1);
        let w1: Vec<f64> = (0..farms).map(|_| rng.random_range(-5.0..5.0)).collect();
        let w2: Vec<f64> = (0..farms).map(|_| rng.random_range(-5.0..5.0)).collect();
        let combo: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();

        let f1 = flows_of_injection(&factors, &injection_at(&case, &control, &w1));
        let f2 = flows_of_injection(&factors, &injection_at(&case, &control, &w2));
        let fc = flows_of_injection(&factors, &injection_at(&case, &control, &combo));
        for l in 0..case.lines.len() {
            let expected = a * f1[l] + b * f2[l];
            prop_assert!(
                (fc[l] - expected).abs() <= 1e-9 * expected.abs().max(1.0),
                "line {}: {} vs {}", l, fc[l], expected
            );
        }
    }

    /// Scaling every farm's sigma by t scales every line's flow spread by
    /// exactly t and leaves the flow means untouched.
    #[test]
    fn flow_spread_is_homogeneous_in_sigma(
        n in 6usize..=10,
        seed in any::<u64>(),
        farms in 1usize..=3,
        t in 0.1f64..4.0,
    ) {
        let base = build_grid(n, seed, farms, 1.0);
        let scaled = build_grid(n, seed, farms, t);
        let control = uniform_control(&base);

        let stats_base = flow_statistics(&NetworkFactors::build(&base).unwrap(), &control).unwrap();
        let stats_scaled =
            flow_statistics(&NetworkFactors::build(&scaled).unwrap(), &control).unwrap();
        for (sb, ss) in stats_base.flows.iter().zip(&stats_scaled.flows) {
            prop_assert!(
                (ss.std_mw - t * sb.std_mw).abs() <= 1e-10 * (t * sb.std_mw).max(1.0),
                "std {} vs {}", ss.std_mw, t * sb.std_mw
            );
            prop_assert!((ss.mean_mw - sb.mean_mw).abs() <= 1e-9 * sb.mean_mw.abs().max(1.0));
        }
    }

    /// Loosening a line's overload target can only widen its chance slack:
    /// the guard multiplier shrinks as epsilon grows.
    #[test]
    fn line_chance_slack_grows_with_epsilon(
        seed in any::<u64>(),
        eps_low in 0.001f64..0.4,
        gap in 0.01f64..0.09,
    ) {
        let eps_high = (eps_low + gap).min(0.499);
        let with_eps = |eps: f64| -> GridCase {
            CaseBuilder::new()
                .bus(1, 0.0)
                .bus(2, 0.0)
                .bus(3, 20.0)
                .generator(1, 0.0, 60.0, 0.05, 5.0, 0.0)
                .wind(2, 6.0, 2.0)
                .line_eps(1, 2, 10.0, 18.0, eps)
                .line_eps(2, 3, 10.0, 25.0, eps)
                .build()
                .unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = rng.random_range(10.0..18.0);
        // Shift load so the (single-generator) control stays balanced while
        // still exploring different operating points.
        let mut case_low = with_eps(eps_low);
        let mut case_high = with_eps(eps_high);
        let shift = p + 6.0 - 20.0;
        case_low.buses[2].load_mw += shift;
        case_high.buses[2].load_mw += shift;

        let control = AffineControl::new(vec![p], vec![1.0]).unwrap();
        let slack_at = |case: &GridCase| -> Vec<f64> {
            chance_margins(
                &NetworkFactors::build(case).unwrap(),
                &control,
                ChanceBoundKind::PerSide,
                GenChanceConvention::ParticipationScaled,
            )
            .unwrap()
            .line_slack_mw
            .into_iter()
            .flatten()
            .collect()
        };
        for (lo, hi) in slack_at(&case_low).iter().zip(slack_at(&case_high)) {
            prop_assert!(hi >= lo - 1e-12, "slack fell from {} to {}", lo, hi);
        }
    }
}
