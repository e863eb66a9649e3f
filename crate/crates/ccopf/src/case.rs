//! Grid case data model: buses, lines, generators, wind farms.
//!
//! A [`GridCase`] is immutable once built. Internally buses are renumbered to
//! a contiguous 0-based range with the slack bus always the *last* internal
//! index, so the reduced network matrix is simply the leading principal
//! block. External (case-file) ids are kept on each bus for reporting.
//!
//! The slack bus must carry neither a generator nor a wind farm; if no bus
//! qualifies, a dummy bus with zero demand is appended and tied to the grid
//! by an unlimited line (a leaf bus with zero injection carries zero flow, so
//! the addition never changes any result).

use std::collections::BTreeMap;

use thiserror::Error;

use crate::config::CaseConfig;

mod matpower;

pub use matpower::{load_matpower_file, parse_matpower, parse_matpower_with, ParallelBranchMode, ParseOptions};

/// MVA base applied when a case file does not state one.
pub const DEFAULT_MVA_BASE: f64 = 100.0;

/// Epsilon assigned to lines/generators before a wind/chance config is
/// attached; [`attach_wind`] replaces it.
pub const DEFAULT_EPSILON: f64 = 0.05;

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("case syntax error at line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown bus {bus} referenced by {what}")]
    UnknownBus { bus: usize, what: String },
    #[error("branch {from}-{to} has non-positive reactance {x}")]
    BadReactance { from: usize, to: usize, x: f64 },
    #[error("network is disconnected (bus {bus} unreachable from bus {root})")]
    Disconnected { bus: usize, root: usize },
    #[error("bus {bus}: {msg}")]
    BadBus { bus: usize, msg: String },
    #[error("line {from}-{to}: {msg}")]
    BadLine { from: usize, to: usize, msg: String },
    #[error("generator at bus {bus}: {msg}")]
    BadGenerator { bus: usize, msg: String },
    #[error("wind farm at bus {bus}: {msg}")]
    BadWind { bus: usize, msg: String },
    #[error("duplicate wind farm on bus {bus}")]
    DuplicateWind { bus: usize },
    #[error("wind farm on generator bus {bus}")]
    WindOnGenerator { bus: usize },
    #[error("wind farm on slack bus {bus}")]
    WindOnSlack { bus: usize },
    #[error("epsilon {value} outside (0, 0.5)")]
    BadEpsilon { value: f64 },
    #[error("total demand is zero")]
    ZeroDemand,
    #[error("non-positive load scale factor {0}")]
    BadScaleFactor(f64),
    #[error("config: {0}")]
    BadConfig(String),
}

/// A network node. `load_mw` is the demand d_i.
#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    /// Id as written in the case file.
    pub external_id: usize,
    pub load_mw: f64,
}

/// A transmission line. Susceptance is stored in MW per radian (the per-unit
/// susceptance 1/x scaled by the MVA base), so flows come out in MW.
/// An infinite `flow_limit_mw` means the line is unconstrained and carries no
/// chance constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub from_bus: usize,
    pub to_bus: usize,
    pub susceptance: f64,
    pub flow_limit_mw: f64,
    pub epsilon: f64,
}

impl Line {
    /// Whether the line has a finite limit and therefore a chance constraint.
    pub fn is_limited(&self) -> bool {
        self.flow_limit_mw.is_finite()
    }
}

/// A controllable generator with quadratic cost
/// `c_quadratic·p² + c_linear·p + c_constant` ($/h with p in MW).
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub bus: usize,
    pub p_min_mw: f64,
    pub p_max_mw: f64,
    pub cost_quadratic: f64,
    pub cost_linear: f64,
    pub cost_constant: f64,
    pub epsilon: f64,
}

/// A wind farm: output = mean_mw + zero-mean fluctuation with the given
/// standard deviation. Farms are independent of each other.
#[derive(Debug, Clone, PartialEq)]
pub struct WindFarm {
    pub bus: usize,
    pub mean_mw: f64,
    pub std_mw: f64,
}

impl WindFarm {
    pub fn variance(&self) -> f64 {
        self.std_mw * self.std_mw
    }
}

/// Immutable network description. Bus indices held by lines, generators and
/// wind farms are internal (0-based, slack last).
#[derive(Debug, Clone, PartialEq)]
pub struct GridCase {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    pub wind_farms: Vec<WindFarm>,
    /// Always `buses.len() - 1`.
    pub slack_bus: usize,
    pub mva_base: f64,
}

impl GridCase {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Internal index of the bus with the given external id.
    pub fn internal_id(&self, external: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.external_id == external)
    }

    pub fn external_id(&self, internal: usize) -> usize {
        self.buses[internal].external_id
    }

    pub fn total_load(&self) -> f64 {
        self.buses.iter().map(|b| b.load_mw).sum()
    }

    pub fn total_wind_mean(&self) -> f64 {
        self.wind_farms.iter().map(|w| w.mean_mw).sum()
    }

    /// Σσ² over all wind farms.
    pub fn total_wind_variance(&self) -> f64 {
        self.wind_farms.iter().map(|w| w.variance()).sum()
    }

    /// Per-bus net fixed injection μ − d.
    pub fn fixed_injection(&self) -> Vec<f64> {
        let mut inj: Vec<f64> = self.buses.iter().map(|b| -b.load_mw).collect();
        for w in &self.wind_farms {
            inj[w.bus] += w.mean_mw;
        }
        inj
    }

    /// Indices of lines with finite flow limits (the chance-constrained set).
    pub fn limited_lines(&self) -> Vec<usize> {
        (0..self.lines.len())
            .filter(|&l| self.lines[l].is_limited())
            .collect()
    }

    fn validate(&self) -> Result<(), CaseError> {
        let n = self.buses.len();
        if n < 2 {
            return Err(CaseError::BadBus {
                bus: 0,
                msg: "a case needs at least two buses".into(),
            });
        }
        if self.slack_bus != n - 1 {
            return Err(CaseError::BadBus {
                bus: self.slack_bus,
                msg: "slack bus must be the last internal index".into(),
            });
        }
        let mut seen_ext = BTreeMap::new();
        for (i, b) in self.buses.iter().enumerate() {
            if let Some(prev) = seen_ext.insert(b.external_id, i) {
                return Err(CaseError::BadBus {
                    bus: b.external_id,
                    msg: format!("duplicate external id (buses {prev} and {i})"),
                });
            }
            if !b.load_mw.is_finite() || b.load_mw < 0.0 {
                return Err(CaseError::BadBus {
                    bus: b.external_id,
                    msg: format!("load {} must be finite and >= 0", b.load_mw),
                });
            }
        }
        for l in &self.lines {
            if l.from_bus >= n || l.to_bus >= n {
                return Err(CaseError::UnknownBus {
                    bus: l.from_bus.max(l.to_bus),
                    what: "a line".into(),
                });
            }
            if l.from_bus == l.to_bus {
                return Err(CaseError::BadLine {
                    from: self.external_id(l.from_bus),
                    to: self.external_id(l.to_bus),
                    msg: "self-loop".into(),
                });
            }
            if !(l.susceptance.is_finite() && l.susceptance > 0.0) {
                return Err(CaseError::BadLine {
                    from: self.external_id(l.from_bus),
                    to: self.external_id(l.to_bus),
                    msg: format!("susceptance {} must be finite and > 0", l.susceptance),
                });
            }
            // +∞ (unlimited) passes; NaN and nonpositive limits are errors
            if l.flow_limit_mw.is_nan() || l.flow_limit_mw <= 0.0 {
                return Err(CaseError::BadLine {
                    from: self.external_id(l.from_bus),
                    to: self.external_id(l.to_bus),
                    msg: format!("flow limit {} must be > 0", l.flow_limit_mw),
                });
            }
            if l.is_limited() && !(l.epsilon > 0.0 && l.epsilon < 0.5) {
                return Err(CaseError::BadEpsilon { value: l.epsilon });
            }
        }
        for g in &self.generators {
            if g.bus >= n {
                return Err(CaseError::UnknownBus {
                    bus: g.bus,
                    what: "a generator".into(),
                });
            }
            if g.bus == self.slack_bus {
                return Err(CaseError::BadGenerator {
                    bus: self.external_id(g.bus),
                    msg: "generator on the slack bus".into(),
                });
            }
            if !(0.0 <= g.p_min_mw && g.p_min_mw <= g.p_max_mw && g.p_max_mw.is_finite()) {
                return Err(CaseError::BadGenerator {
                    bus: self.external_id(g.bus),
                    msg: format!("need 0 <= p_min ({}) <= p_max ({})", g.p_min_mw, g.p_max_mw),
                });
            }
            if !g.cost_quadratic.is_finite() || g.cost_quadratic < 0.0 {
                return Err(CaseError::BadGenerator {
                    bus: self.external_id(g.bus),
                    msg: format!("quadratic cost {} must be >= 0", g.cost_quadratic),
                });
            }
            if !(g.epsilon > 0.0 && g.epsilon < 0.5) {
                return Err(CaseError::BadEpsilon { value: g.epsilon });
            }
        }
        let gen_buses: Vec<usize> = self.generators.iter().map(|g| g.bus).collect();
        let mut wind_buses = BTreeMap::new();
        for w in &self.wind_farms {
            if w.bus >= n {
                return Err(CaseError::UnknownBus {
                    bus: w.bus,
                    what: "a wind farm".into(),
                });
            }
            if w.bus == self.slack_bus {
                return Err(CaseError::WindOnSlack {
                    bus: self.external_id(w.bus),
                });
            }
            if gen_buses.contains(&w.bus) {
                return Err(CaseError::WindOnGenerator {
                    bus: self.external_id(w.bus),
                });
            }
            if wind_buses.insert(w.bus, ()).is_some() {
                return Err(CaseError::DuplicateWind {
                    bus: self.external_id(w.bus),
                });
            }
            if !(w.mean_mw.is_finite() && w.mean_mw >= 0.0 && w.std_mw.is_finite() && w.std_mw >= 0.0)
            {
                return Err(CaseError::BadWind {
                    bus: self.external_id(w.bus),
                    msg: format!("need mean ({}) >= 0 and std ({}) >= 0", w.mean_mw, w.std_mw),
                });
            }
        }
        self.check_connected()?;
        Ok(())
    }

    fn check_connected(&self) -> Result<(), CaseError> {
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for l in &self.lines {
            adj[l.from_bus].push(l.to_bus);
            adj[l.to_bus].push(l.from_bus);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            None => Ok(()),
            Some(bus) => Err(CaseError::Disconnected {
                bus: self.external_id(bus),
                root: self.external_id(0),
            }),
        }
    }
}

/// Builder used by the parser, the test fixtures and the Python bindings.
/// Buses keep their insertion order; the slack bus (chosen or auto-selected)
/// is moved to the last internal index.
#[derive(Debug, Clone, Default)]
pub struct CaseBuilder {
    buses: Vec<Bus>,
    lines: Vec<(usize, usize, f64, f64, f64)>,
    generators: Vec<(usize, Generator)>,
    wind: Vec<(usize, WindFarm)>,
    slack_external: Option<usize>,
    mva_base: Option<f64>,
    default_epsilon: f64,
}

impl CaseBuilder {
    pub fn new() -> Self {
        CaseBuilder {
            default_epsilon: DEFAULT_EPSILON,
            ..Default::default()
        }
    }

    pub fn mva_base(mut self, base: f64) -> Self {
        self.mva_base = Some(base);
        self
    }

    pub fn default_epsilon(mut self, eps: f64) -> Self {
        self.default_epsilon = eps;
        self
    }

    pub fn bus(mut self, external_id: usize, load_mw: f64) -> Self {
        self.buses.push(Bus {
            external_id,
            load_mw,
        });
        self
    }

    /// Line between two external bus ids with raw susceptance (MW/rad).
    pub fn line(self, from: usize, to: usize, susceptance: f64, flow_limit_mw: f64) -> Self {
        let eps = self.default_epsilon;
        self.line_eps(from, to, susceptance, flow_limit_mw, eps)
    }

    pub fn line_eps(
        mut self,
        from: usize,
        to: usize,
        susceptance: f64,
        flow_limit_mw: f64,
        epsilon: f64,
    ) -> Self {
        self.lines
            .push((from, to, susceptance, flow_limit_mw, epsilon));
        self
    }

    pub fn generator(
        mut self,
        bus: usize,
        p_min_mw: f64,
        p_max_mw: f64,
        cost_quadratic: f64,
        cost_linear: f64,
        cost_constant: f64,
    ) -> Self {
        let eps = self.default_epsilon;
        self.generators.push((
            bus,
            Generator {
                bus: usize::MAX,
                p_min_mw,
                p_max_mw,
                cost_quadratic,
                cost_linear,
                cost_constant,
                epsilon: eps,
            },
        ));
        self
    }

    pub fn wind(mut self, bus: usize, mean_mw: f64, std_mw: f64) -> Self {
        self.wind.push((
            bus,
            WindFarm {
                bus: usize::MAX,
                mean_mw,
                std_mw,
            },
        ));
        self
    }

    /// Pin the slack bus by external id (it must carry no generator or wind).
    pub fn slack(mut self, external_id: usize) -> Self {
        self.slack_external = Some(external_id);
        self
    }

    pub fn build(mut self) -> Result<GridCase, CaseError> {
        let gen_ext: Vec<usize> = self.generators.iter().map(|(b, _)| *b).collect();
        let wind_ext: Vec<usize> = self.wind.iter().map(|(b, _)| *b).collect();

        // Pick the slack: the last-listed bus carrying neither generator nor
        // wind; append a dummy bus when every bus is occupied.
        let slack_ext = match self.slack_external {
            Some(s) => s,
            None => match self
                .buses
                .iter()
                .rev()
                .find(|b| !gen_ext.contains(&b.external_id) && !wind_ext.contains(&b.external_id))
            {
                Some(b) => b.external_id,
                None => {
                    let dummy_id = self
                        .buses
                        .iter()
                        .map(|b| b.external_id)
                        .max()
                        .unwrap_or(0)
                        + 1;
                    let anchor = self
                        .buses
                        .first()
                        .map(|b| b.external_id)
                        .ok_or(CaseError::BadBus {
                            bus: 0,
                            msg: "empty case".into(),
                        })?;
                    self.buses.push(Bus {
                        external_id: dummy_id,
                        load_mw: 0.0,
                    });
                    self.lines
                        .push((anchor, dummy_id, 1.0, f64::INFINITY, self.default_epsilon));
                    dummy_id
                }
            },
        };

        // Renumber: insertion order with the slack moved to the end.
        let mut order: Vec<usize> = (0..self.buses.len())
            .filter(|&i| self.buses[i].external_id != slack_ext)
            .collect();
        let slack_pos = self
            .buses
            .iter()
            .position(|b| b.external_id == slack_ext)
            .ok_or(CaseError::UnknownBus {
                bus: slack_ext,
                what: "the slack designation".into(),
            })?;
        order.push(slack_pos);
        let mut ext_to_int = BTreeMap::new();
        let buses: Vec<Bus> = order
            .iter()
            .enumerate()
            .map(|(internal, &pos)| {
                ext_to_int.insert(self.buses[pos].external_id, internal);
                self.buses[pos].clone()
            })
            .collect();

        let resolve = |ext: usize, what: &str| -> Result<usize, CaseError> {
            ext_to_int
                .get(&ext)
                .copied()
                .ok_or_else(|| CaseError::UnknownBus {
                    bus: ext,
                    what: what.into(),
                })
        };

        let mut lines = Vec::with_capacity(self.lines.len());
        for &(f, t, b, lim, eps) in &self.lines {
            lines.push(Line {
                from_bus: resolve(f, "a line")?,
                to_bus: resolve(t, "a line")?,
                susceptance: b,
                flow_limit_mw: lim,
                epsilon: eps,
            });
        }
        let mut generators = Vec::with_capacity(self.generators.len());
        for (ext, g) in &self.generators {
            let mut g = g.clone();
            g.bus = resolve(*ext, "a generator")?;
            generators.push(g);
        }
        let mut wind_farms = Vec::with_capacity(self.wind.len());
        for (ext, w) in &self.wind {
            let mut w = w.clone();
            w.bus = resolve(*ext, "a wind farm")?;
            wind_farms.push(w);
        }

        let case = GridCase {
            slack_bus: buses.len() - 1,
            buses,
            lines,
            generators,
            wind_farms,
            mva_base: self.mva_base.unwrap_or(DEFAULT_MVA_BASE),
        };
        case.validate()?;
        Ok(case)
    }
}

/// Attach wind farms and chance tolerances from a parsed config, returning a
/// new case; the input is left untouched.
pub fn attach_wind(case: &GridCase, config: &CaseConfig) -> Result<GridCase, CaseError> {
    let check_eps = |value: f64| -> Result<f64, CaseError> {
        if value > 0.0 && value < 0.5 {
            Ok(value)
        } else {
            Err(CaseError::BadEpsilon { value })
        }
    };
    let line_eps = check_eps(config.line_epsilon)?;
    let gen_eps = check_eps(config.gen_epsilon)?;

    let mut out = case.clone();
    out.wind_farms.clear();
    for entry in &config.wind {
        let bus = case
            .internal_id(entry.bus)
            .ok_or(CaseError::UnknownBus {
                bus: entry.bus,
                what: "a wind farm".into(),
            })?;
        out.wind_farms.push(WindFarm {
            bus,
            mean_mw: entry.mean_mw,
            std_mw: entry.std_mw,
        });
    }

    for line in &mut out.lines {
        let from_ext = case.external_id(line.from_bus);
        let to_ext = case.external_id(line.to_bus);
        let key_a = format!("{from_ext}-{to_ext}");
        let key_b = format!("{to_ext}-{from_ext}");
        let over = config
            .overrides
            .line_epsilon
            .get(&key_a)
            .or_else(|| config.overrides.line_epsilon.get(&key_b));
        line.epsilon = check_eps(over.copied().unwrap_or(line_eps))?;
    }
    for key in config.overrides.line_epsilon.keys() {
        let ok = out.lines.iter().any(|l| {
            let a = case.external_id(l.from_bus);
            let b = case.external_id(l.to_bus);
            *key == format!("{a}-{b}") || *key == format!("{b}-{a}")
        });
        if !ok {
            return Err(CaseError::BadConfig(format!(
                "line epsilon override '{key}' matches no line"
            )));
        }
    }
    for gen in &mut out.generators {
        let bus_ext = case.external_id(gen.bus).to_string();
        let over = config.overrides.gen_epsilon.get(&bus_ext);
        gen.epsilon = check_eps(over.copied().unwrap_or(gen_eps))?;
    }
    for key in config.overrides.gen_epsilon.keys() {
        let ok = out
            .generators
            .iter()
            .any(|g| case.external_id(g.bus).to_string() == *key);
        if !ok {
            return Err(CaseError::BadConfig(format!(
                "generator epsilon override '{key}' matches no generator bus"
            )));
        }
    }

    out.validate()?;
    Ok(out)
}

/// Σμ / Σd — the share of demand covered by expected wind output.
pub fn penetration(case: &GridCase) -> Result<f64, CaseError> {
    let demand = case.total_load();
    if demand <= 0.0 {
        return Err(CaseError::ZeroDemand);
    }
    Ok(case.total_wind_mean() / demand)
}

/// Multiply every demand by `factor`, leaving everything else unchanged.
pub fn scale_loads(case: &GridCase, factor: f64) -> Result<GridCase, CaseError> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(CaseError::BadScaleFactor(factor));
    }
    let mut out = case.clone();
    for b in &mut out.buses {
        b.load_mw *= factor;
    }
    Ok(out)
}

/// Multiply every wind farm's mean and standard deviation by `factor`
/// (used by penetration sweeps, which scale output and fluctuation together).
pub fn scale_wind(case: &GridCase, factor: f64) -> Result<GridCase, CaseError> {
    if !(factor >= 0.0 && factor.is_finite()) {
        return Err(CaseError::BadScaleFactor(factor));
    }
    let mut out = case.clone();
    for w in &mut out.wind_farms {
        w.mean_mw *= factor;
        w.std_mw *= factor;
    }
    Ok(out)
}
