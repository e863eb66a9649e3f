//! Wind/chance configuration: a strict JSON document attached to a parsed
//! case. Unknown keys are rejected so typos fail loudly.
//!
//! ```json
//! {
//!   "wind": [{"bus": 5, "mean_mw": 45.0, "std_mw": 13.5}],
//!   "line_epsilon": 0.0227,
//!   "gen_epsilon": 0.01,
//!   "overrides": {
//!     "line_epsilon": {"4-5": 0.01},
//!     "gen_epsilon": {"1": 0.02}
//!   },
//!   "robust": {
//!     "mean":     {"kind": "budget", "gamma": [4.5, 3.4], "Gamma": 1.0},
//!     "variance": {"kind": "ellipsoid", "A": [[1.0, 0.0], [0.0, 1.0]], "b": 2.0}
//!   }
//! }
//! ```
//!
//! `overrides.line_epsilon` keys are `"<from>-<to>"` external bus ids (either
//! orientation); `overrides.gen_epsilon` keys are external bus ids and apply
//! to every generator on that bus. The `robust` section is optional and may
//! either name `mean`/`variance` sets independently or be a single bare set
//! `{"kind": ...}` applied to both.

use std::collections::BTreeMap;

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindEntry {
    /// External bus id.
    pub bus: usize,
    pub mean_mw: f64,
    pub std_mw: f64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    #[serde(default)]
    pub line_epsilon: BTreeMap<String, f64>,
    #[serde(default)]
    pub gen_epsilon: BTreeMap<String, f64>,
}

/// One uncertainty-set description as written in JSON. Validated against the
/// case (dimensions, positive-definiteness) by the robust module.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SetSpec {
    Budget {
        gamma: Vec<f64>,
        #[serde(rename = "Gamma")]
        cap: f64,
    },
    Ellipsoid {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        b: f64,
    },
}

/// Independent sets for the mean-error and fluctuation-variance halves of a
/// robust model; either may be omitted (nominal behaviour for that half).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSets {
    #[serde(default)]
    pub mean: Option<SetSpec>,
    #[serde(default)]
    pub variance: Option<SetSpec>,
}

/// The `robust` section: either one bare set used for both halves, or
/// independent `mean`/`variance` sets.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum RobustSection {
    Single(SetSpec),
    Split(SplitSets),
}

impl RobustSection {
    /// Normalize to (mean set, variance set).
    pub fn split(&self) -> (Option<&SetSpec>, Option<&SetSpec>) {
        match self {
            RobustSection::Single(spec) => (Some(spec), Some(spec)),
            RobustSection::Split(sets) => (sets.mean.as_ref(), sets.variance.as_ref()),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    pub wind: Vec<WindEntry>,
    pub line_epsilon: f64,
    pub gen_epsilon: f64,
    #[serde(default)]
    pub overrides: Overrides,
    #[serde(default)]
    pub robust: Option<RobustSection>,
}

impl CaseConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }
}
