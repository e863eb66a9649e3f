//! Parser for the MATPOWER case-file subset the DC pipeline needs:
//! `baseMVA`, and the `bus`, `branch`, `gen`, `gencost` tables. Only
//! polynomial (model 2) costs of degree ≤ 2 are accepted.
//!
//! Columns used: bus id and Pd; branch from/to/x/rateA/status; gen
//! bus/status/Pmax/Pmin; gencost model/n/coefficients. rateA = 0 means
//! "unlimited" and maps to an infinite flow limit (no chance constraint).
//! Out-of-service branches and generators are dropped. Parallel branches are
//! merged by default (susceptances and limits summed).

use super::{CaseBuilder, CaseError, GridCase, DEFAULT_EPSILON, DEFAULT_MVA_BASE};

/// What to do with several in-service branches joining the same bus pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParallelBranchMode {
    /// Sum susceptances and flow limits into one equivalent line.
    #[default]
    Merge,
    /// Keep them as distinct lines with independent chance constraints.
    KeepSeparate,
}

#[derive(Debug, Clone)]
pub struct ParseOptions {
    pub parallel: ParallelBranchMode,
    /// Overrides the file's baseMVA when set.
    pub mva_base: Option<f64>,
    /// Epsilon given to lines/generators until a config is attached.
    pub default_epsilon: f64,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            parallel: ParallelBranchMode::Merge,
            mva_base: None,
            default_epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Parse MATPOWER case text with default options.
pub fn parse_matpower(text: &str) -> Result<GridCase, CaseError> {
    parse_matpower_with(text, &ParseOptions::default())
}

struct Row {
    line_no: usize,
    values: Vec<f64>,
}

struct Tables {
    base_mva: Option<f64>,
    bus: Vec<Row>,
    branch: Vec<Row>,
    gen: Vec<Row>,
    gencost: Vec<Row>,
}

pub fn parse_matpower_with(text: &str, opts: &ParseOptions) -> Result<GridCase, CaseError> {
    let tables = scan_tables(text)?;
    let base_mva = opts
        .mva_base
        .or(tables.base_mva)
        .unwrap_or(DEFAULT_MVA_BASE);

    let need = |rows: &Vec<Row>, name: &str| -> Result<(), CaseError> {
        if rows.is_empty() {
            Err(CaseError::Syntax {
                line: 0,
                msg: format!("missing mpc.{name} table"),
            })
        } else {
            Ok(())
        }
    };
    need(&tables.bus, "bus")?;
    need(&tables.branch, "branch")?;
    need(&tables.gen, "gen")?;
    need(&tables.gencost, "gencost")?;

    let mut builder = CaseBuilder::new()
        .mva_base(base_mva)
        .default_epsilon(opts.default_epsilon);

    let col = |row: &Row, idx: usize, what: &str| -> Result<f64, CaseError> {
        row.values.get(idx).copied().ok_or_else(|| CaseError::Syntax {
            line: row.line_no,
            msg: format!("{what}: expected at least {} columns", idx + 1),
        })
    };
    let int_col = |row: &Row, idx: usize, what: &str| -> Result<usize, CaseError> {
        let v = col(row, idx, what)?;
        if v >= 0.0 && v.fract() == 0.0 && v <= usize::MAX as f64 {
            Ok(v as usize)
        } else {
            Err(CaseError::Syntax {
                line: row.line_no,
                msg: format!("{what}: {v} is not a valid id"),
            })
        }
    };

    let mut bus_ids = Vec::new();
    for row in &tables.bus {
        let id = int_col(row, 0, "bus id")?;
        let pd = col(row, 2, "bus Pd")?;
        bus_ids.push(id);
        builder = builder.bus(id, pd);
    }
    let known_bus = |ext: usize, what: &str| -> Result<(), CaseError> {
        if bus_ids.contains(&ext) {
            Ok(())
        } else {
            Err(CaseError::UnknownBus {
                bus: ext,
                what: what.into(),
            })
        }
    };

    // branch: fbus tbus r x b rateA rateB rateC ratio angle status ...
    let mut branches: Vec<(usize, usize, f64, f64)> = Vec::new();
    for row in &tables.branch {
        let from = int_col(row, 0, "branch from-bus")?;
        let to = int_col(row, 1, "branch to-bus")?;
        known_bus(from, "a branch")?;
        known_bus(to, "a branch")?;
        let x = col(row, 3, "branch reactance")?;
        let rate_a = col(row, 5, "branch rateA")?;
        let status = row.values.get(10).copied().unwrap_or(1.0);
        if status == 0.0 {
            continue;
        }
        if !x.is_finite() || x <= 0.0 {
            return Err(CaseError::BadReactance { from, to, x });
        }
        let susceptance = base_mva / x;
        let limit = if rate_a > 0.0 { rate_a } else { f64::INFINITY };
        branches.push((from, to, susceptance, limit));
    }
    if opts.parallel == ParallelBranchMode::Merge {
        let mut merged: Vec<(usize, usize, f64, f64)> = Vec::new();
        for (from, to, b, lim) in branches {
            let key = (from.min(to), from.max(to));
            match merged
                .iter_mut()
                .find(|(f, t, _, _)| (*f, *t) == key)
            {
                Some(entry) => {
                    entry.2 += b;
                    entry.3 += lim;
                }
                None => merged.push((key.0, key.1, b, lim)),
            }
        }
        branches = merged;
    }
    for (from, to, b, lim) in branches {
        builder = builder.line(from, to, b, lim);
    }

    // gen: bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin ...
    let n_gen_rows = tables.gen.len();
    let n_cost_rows = tables.gencost.len();
    if n_cost_rows != n_gen_rows && n_cost_rows != 2 * n_gen_rows {
        return Err(CaseError::Syntax {
            line: tables.gencost.first().map(|r| r.line_no).unwrap_or(0),
            msg: format!(
                "gencost has {n_cost_rows} rows for {n_gen_rows} generators \
                 (expected {n_gen_rows} or {})",
                2 * n_gen_rows
            ),
        });
    }
    for (row, cost_row) in tables.gen.iter().zip(tables.gencost.iter()) {
        let bus = int_col(row, 0, "gen bus")?;
        known_bus(bus, "a generator")?;
        let status = row.values.get(7).copied().unwrap_or(1.0);
        if status <= 0.0 {
            continue;
        }
        let p_max = col(row, 8, "gen Pmax")?;
        let p_min = col(row, 9, "gen Pmin")?;
        let (c2, c1, c0) = parse_cost_row(cost_row)?;
        builder = builder.generator(bus, p_min, p_max, c2, c1, c0);
    }

    builder.build()
}

/// gencost row: model startup shutdown n c(n-1) ... c0, model 2 only.
fn parse_cost_row(row: &Row) -> Result<(f64, f64, f64), CaseError> {
    let bad = |msg: String| CaseError::Syntax {
        line: row.line_no,
        msg,
    };
    let model = *row
        .values
        .first()
        .ok_or_else(|| bad("empty gencost row".into()))?;
    if model != 2.0 {
        return Err(bad(format!(
            "gencost model {model} unsupported (only polynomial model 2)"
        )));
    }
    let n = *row
        .values
        .get(3)
        .ok_or_else(|| bad("gencost row missing term count".into()))? as usize;
    if row.values.len() < 4 + n {
        return Err(bad(format!(
            "gencost row declares {n} coefficients but has {}",
            row.values.len().saturating_sub(4)
        )));
    }
    let coeffs = &row.values[4..4 + n];
    match n {
        3 => Ok((coeffs[0], coeffs[1], coeffs[2])),
        2 => Ok((0.0, coeffs[0], coeffs[1])),
        _ => Err(bad(format!(
            "gencost with n = {n} unsupported (quadratic or linear only)"
        ))),
    }
}

/// Scan `mpc.<name> = [ rows ];` blocks and the `mpc.baseMVA` scalar,
/// tracking source lines for error reporting. `%` starts a comment.
fn scan_tables(text: &str) -> Result<Tables, CaseError> {
    let mut tables = Tables {
        base_mva: None,
        bus: Vec::new(),
        branch: Vec::new(),
        gen: Vec::new(),
        gencost: Vec::new(),
    };
    let mut current: Option<(String, Vec<Row>)> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('%') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }

        if let Some((_, rows)) = current.as_mut() {
            let (data, closed) = match line.find(']') {
                Some(pos) => (&line[..pos], true),
                None => (line, false),
            };
            for chunk in data.split(';') {
                let values = parse_numbers(chunk, line_no)?;
                if !values.is_empty() {
                    rows.push(Row { line_no, values });
                }
            }
            if closed {
                let (name, rows) = current.take().unwrap();
                store_table(&mut tables, &name, rows);
            }
            continue;
        }

        let Some(rest) = line.strip_prefix("mpc.") else {
            // function header, comments, or irrelevant statements
            continue;
        };
        let Some(eq) = rest.find('=') else {
            return Err(CaseError::Syntax {
                line: line_no,
                msg: format!("expected '=' in '{line}'"),
            });
        };
        let name = rest[..eq].trim().to_string();
        let value = rest[eq + 1..].trim();
        if let Some(open) = value.find('[') {
            let tail = &value[open + 1..];
            let mut rows = Vec::new();
            let (data, closed) = match tail.find(']') {
                Some(pos) => (&tail[..pos], true),
                None => (tail, false),
            };
            for chunk in data.split(';') {
                let values = parse_numbers(chunk, line_no)?;
                if !values.is_empty() {
                    rows.push(Row { line_no, values });
                }
            }
            if closed {
                store_table(&mut tables, &name, rows);
            } else {
                current = Some((name, rows));
            }
        } else if name == "baseMVA" {
            let v = value.trim_end_matches(';').trim();
            let parsed: f64 = v.parse().map_err(|_| CaseError::Syntax {
                line: line_no,
                msg: format!("bad baseMVA value '{v}'"),
            })?;
            tables.base_mva = Some(parsed);
        }
        // other scalar/string fields (version, comments) are ignored
    }

    if let Some((name, _)) = current {
        return Err(CaseError::Syntax {
            line: text.lines().count(),
            msg: format!("unterminated mpc.{name} table (missing ']')"),
        });
    }
    Ok(tables)
}

fn store_table(tables: &mut Tables, name: &str, rows: Vec<Row>) {
    match name {
        "bus" => tables.bus = rows,
        "branch" => tables.branch = rows,
        "gen" => tables.gen = rows,
        "gencost" => tables.gencost = rows,
        _ => {}
    }
}

fn parse_numbers(chunk: &str, line_no: usize) -> Result<Vec<f64>, CaseError> {
    let mut out = Vec::new();
    for (col_idx, tok) in chunk.split_whitespace().enumerate() {
        let tok = tok.trim_matches(',');
        if tok.is_empty() {
            continue;
        }
        let v: f64 = tok.parse().map_err(|_| CaseError::Syntax {
            line: line_no,
            msg: format!("column {}: '{tok}' is not a number", col_idx + 1),
        })?;
        out.push(v);
    }
    Ok(out)
}

/// Read and parse a case file from disk.
pub fn load_matpower_file(path: &std::path::Path) -> Result<GridCase, CaseError> {
    let text = std::fs::read_to_string(path).map_err(|e| CaseError::Syntax {
        line: 0,
        msg: format!("cannot read {}: {e}", path.display()),
    })?;
    parse_matpower(&text)
}
