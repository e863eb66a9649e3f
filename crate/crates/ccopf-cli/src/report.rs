//! Machine-readable report encoding.
//!
//! Reports are versioned JSON documents built for CI diffing: keys are
//! sorted (the default `serde_json` map is a BTree map), every float is
//! serialized as a 17-significant-digit decimal string so values round-trip
//! exactly, and nothing time- or host-dependent is recorded. Identical
//! inputs therefore produce byte-identical files.

use ccopf::case::GridCase;
use ccopf::cutting_plane::{SolveReport, Termination};
use ccopf::opf::{interval_tails, AffineControl, Dispatch};
use ccopf::validate::ValidationReport;
use serde_json::{json, Map, Value};

pub const SCHEMA: u64 = 1;

/// A float as a decimal string with 17 significant digits (enough to
/// reconstruct the exact `f64`).
pub fn float(x: f64) -> Value {
    Value::String(format!("{x:.16e}"))
}

fn float_vec(xs: &[f64]) -> Value {
    Value::Array(xs.iter().map(|&x| float(x)).collect())
}

/// Parse a float previously encoded by [`float`].
pub fn parse_float(v: &Value) -> Option<f64> {
    v.as_str()?.parse().ok()
}

fn termination_str(t: Termination) -> &'static str {
    match t {
        Termination::ChanceFeasible => "chance_feasible",
        Termination::ConicFeasible => "conic_feasible",
        Termination::IterationCap => "iteration_cap",
    }
}

/// Full dispatch report: the control, per-line and per-generator statistics
/// with their analytic tail probabilities, and the solver trace when the
/// cutting-plane loop produced one.
pub fn dispatch_report(
    mode: &str,
    case: &GridCase,
    dispatch: &Dispatch,
    solve: Option<&SolveReport>,
) -> Value {
    let control = &dispatch.control;
    let gen_buses: Vec<Value> = case
        .generators
        .iter()
        .map(|g| json!(case.external_id(g.bus)))
        .collect();

    let lines: Vec<Value> = case
        .lines
        .iter()
        .zip(&dispatch.flow_stats)
        .map(|(line, stat)| {
            let (up, down) = interval_tails(
                stat.mean_mw,
                stat.std_mw,
                -line.flow_limit_mw,
                line.flow_limit_mw,
            );
            json!({
                "from": case.external_id(line.from_bus),
                "to": case.external_id(line.to_bus),
                "limit_mw": if line.is_limited() { float(line.flow_limit_mw) } else { Value::Null },
                "epsilon": float(line.epsilon),
                "mean_mw": float(stat.mean_mw),
                "std_mw": float(stat.std_mw),
                "overload_up": float(up),
                "overload_down": float(down),
            })
        })
        .collect();

    let generators: Vec<Value> = case
        .generators
        .iter()
        .zip(&dispatch.gen_stats)
        .map(|(gen, stat)| {
            let (up, down) = interval_tails(stat.mean_mw, stat.std_mw, gen.p_min_mw, gen.p_max_mw);
            json!({
                "bus": case.external_id(gen.bus),
                "p_min_mw": float(gen.p_min_mw),
                "p_max_mw": float(gen.p_max_mw),
                "epsilon": float(gen.epsilon),
                "mean_mw": float(stat.mean_mw),
                "std_mw": float(stat.std_mw),
                "tail_above": float(up),
                "tail_below": float(down),
            })
        })
        .collect();

    let mut doc = Map::new();
    doc.insert("schema".into(), json!(SCHEMA));
    doc.insert("mode".into(), json!(mode));
    doc.insert("status".into(), json!("solved"));
    doc.insert("objective".into(), float(dispatch.objective));
    doc.insert(
        "control".into(),
        json!({
            "generator_buses": gen_buses,
            "p_bar_mw": float_vec(&control.p_bar),
            "alpha": float_vec(&control.alpha),
        }),
    );
    doc.insert("lines".into(), Value::Array(lines));
    doc.insert("generators".into(), Value::Array(generators));

    match solve {
        Some(report) => {
            doc.insert(
                "termination".into(),
                json!(termination_str(report.termination)),
            );
            doc.insert("iterations".into(), json!(report.iterations));
            doc.insert("cuts_added".into(), json!(report.cuts_added));
            doc.insert("chance_excess".into(), float(report.chance_excess));
            let trace: Vec<Value> = report
                .trace
                .iter()
                .map(|r| {
                    json!({
                        "objective": float(r.objective),
                        "max_conic_violation": float(r.max_conic_violation),
                        "cuts_added": r.cuts_added,
                    })
                })
                .collect();
            doc.insert("trace".into(), Value::Array(trace));
        }
        None => {
            doc.insert("termination".into(), json!("deterministic"));
            doc.insert("iterations".into(), json!(1));
            doc.insert("trace".into(), Value::Array(Vec::new()));
        }
    }
    Value::Object(doc)
}

/// Report written when the problem itself has no feasible dispatch: records
/// which constraint family is binding.
pub fn infeasible_report(mode: &str, kind: &str) -> Value {
    json!({
        "schema": SCHEMA,
        "mode": mode,
        "status": "infeasible",
        "binding": kind,
    })
}

/// Simulation report plus the per-line/per-generator gate verdicts.
/// `offenders` lists every frequency that exceeded its target by more than
/// three standard errors.
pub fn validation_report(
    case: &GridCase,
    report: &ValidationReport,
    analytic: &[(f64, f64)],
    offenders: &[String],
) -> Value {
    let lines: Vec<Value> = case
        .lines
        .iter()
        .zip(&report.lines)
        .zip(analytic)
        .map(|((line, outcome), &(up, down))| {
            json!({
                "from": case.external_id(line.from_bus),
                "to": case.external_id(line.to_bus),
                "epsilon": float(line.epsilon),
                "analytic_up": float(up),
                "analytic_down": float(down),
                "up": frequency(&outcome.up),
                "down": frequency(&outcome.down),
                "joint": frequency(&outcome.joint),
            })
        })
        .collect();
    let generators: Vec<Value> = case
        .generators
        .iter()
        .zip(&report.generators)
        .map(|(gen, freq)| {
            json!({
                "bus": case.external_id(gen.bus),
                "epsilon": float(gen.epsilon),
                "outside_bounds": frequency(freq),
            })
        })
        .collect();

    json!({
        "schema": SCHEMA,
        "status": if offenders.is_empty() { "ok" } else { "gate_failed" },
        "distribution": report.distribution,
        "samples": report.samples,
        "seed": report.seed,
        "lines": lines,
        "generators": generators,
        "offenders": offenders,
    })
}

fn frequency(f: &ccopf::validate::Frequency) -> Value {
    json!({
        "rate": float(f.rate),
        "standard_error": float(f.standard_error),
        "count": f.count,
    })
}

/// Extract the affine control out of a dispatch report produced by
/// [`dispatch_report`].
pub fn control_from_report(doc: &Value) -> Result<AffineControl, String> {
    let control = doc
        .get("control")
        .ok_or("report has no `control` section")?;
    let floats = |key: &str| -> Result<Vec<f64>, String> {
        control
            .get(key)
            .and_then(Value::as_array)
            .ok_or(format!("control section has no `{key}` array"))?
            .iter()
            .map(|v| parse_float(v).ok_or(format!("bad float in `{key}`")))
            .collect()
    };
    AffineControl::new(floats("p_bar_mw")?, floats("alpha")?).map_err(|e| e.to_string())
}
