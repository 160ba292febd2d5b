// SPDX-License-Identifier: Apache-2.0

//! Experiment configuration files.

use std::fmt;
use std::str::FromStr;

use aoi_core::{CostFunction, Policy, Source, SystemSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const DEFAULT_HORIZON: u64 = 500;
pub const DEFAULT_SEED: u64 = 1;

/// One policy entry. Source numbers are 1-based in text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PolicySpec {
    Whittle,
    RoundRobin(Option<Vec<usize>>),
    Randomized(Vec<f64>),
    MaxAge,
    Cycle(Vec<usize>),
    Dp,
}

fn args<T: FromStr>(body: &str) -> Result<Vec<T>, String> {
    body.split(',').map(|s| s.trim().parse::<T>().map_err(|_| format!("bad argument {:?}", s.trim()))).collect()
}

fn sources(body: &str) -> Result<Vec<usize>, String> {
    args::<usize>(body)?
        .into_iter()
        .map(|i| i.checked_sub(1).ok_or_else(|| "sources are numbered from 1".to_string()))
        .collect()
}

impl FromStr for PolicySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let (head, body) = match s.split_once('(') {
            Some((h, rest)) => {
                let body = rest.strip_suffix(')').ok_or_else(|| format!("unclosed argument list in {s:?}"))?;
                (h.trim(), Some(body))
            }
            None => (s, None),
        };
        match (head, body) {
            ("whittle", None) => Ok(Self::Whittle),
            ("max_age", None) => Ok(Self::MaxAge),
            ("dp", None) => Ok(Self::Dp),
            ("round_robin", None) => Ok(Self::RoundRobin(None)),
            ("round_robin", Some(b)) => Ok(Self::RoundRobin(Some(sources(b)?))),
            ("randomized", Some(b)) => Ok(Self::Randomized(args(b)?)),
            ("cycle", Some(b)) => Ok(Self::Cycle(sources(b)?)),
            _ => Err(format!(
                "unknown policy {s:?}; expected whittle, round_robin[(order)], randomized(p..), max_age, cycle(i..) or dp"
            )),
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ones = |v: &[usize]| v.iter().map(|i| (i + 1).to_string()).collect::<Vec<_>>().join(",");
        match self {
            Self::Whittle => write!(f, "whittle"),
            Self::RoundRobin(None) => write!(f, "round_robin"),
            Self::RoundRobin(Some(o)) => write!(f, "round_robin({})", ones(o)),
            Self::Randomized(p) => {
                write!(f, "randomized({})", p.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","))
            }
            Self::MaxAge => write!(f, "max_age"),
            Self::Cycle(a) => write!(f, "cycle({})", ones(a)),
            Self::Dp => write!(f, "dp"),
        }
    }
}

impl TryFrom<String> for PolicySpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<PolicySpec> for String {
    fn from(p: PolicySpec) -> String {
        p.to_string()
    }
}

impl PolicySpec {
    /// Builds the policy; `None` for the DP entry, which is solved rather
    /// than simulated.
    pub fn build(&self, spec: &SystemSpec) -> Result<Option<Policy>, aoi_core::PolicyError> {
        Ok(Some(match self {
            Self::Whittle => Policy::whittle(spec)?,
            Self::RoundRobin(o) => Policy::round_robin(spec, o.clone())?,
            Self::Randomized(p) => Policy::randomized(spec, p.clone())?,
            Self::MaxAge => Policy::MaxAge,
            Self::Cycle(a) => Policy::fixed_cycle(spec, a.clone())?,
            Self::Dp => return Ok(None),
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    #[serde(default = "reliable")]
    pub p: f64,
    pub cost: CostFunction,
}

fn reliable() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_max: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_budget: Option<u64>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_horizon")]
    pub horizon: u64,
    /// Defaults to 500 when any channel is unreliable, else 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runs: Option<u64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub policies: Vec<PolicySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp: Option<DpConfig>,
    pub sources: Vec<SourceConfig>,
}

fn default_horizon() -> u64 {
    DEFAULT_HORIZON
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn invalid(path: impl Into<String>, message: impl fmt::Display) -> CliError {
    CliError::Config { path: path.into(), message: message.to_string() }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid("<config>", e.message().trim()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text; parsing it gives back an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config fields are all representable")
    }

    /// Hex SHA-256 of the canonical text of the resolved config.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.resolved().to_toml().as_bytes()))
    }

    /// Defaults filled in.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.runs = Some(self.runs());
        c
    }

    pub fn runs(&self) -> u64 {
        self.runs.unwrap_or(if self.sources.iter().any(|s| s.p < 1.0) { 500 } else { 1 })
    }

    pub fn dp_enabled(&self) -> bool {
        match &self.dp {
            Some(d) => d.enabled,
            None => self.policies.contains(&PolicySpec::Dp),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        if !self.name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')) {
            return Err(invalid("name", "may only contain letters, digits, '_', '-' and '.'"));
        }
        if self.horizon == 0 {
            return Err(invalid("horizon", "must be at least 1"));
        }
        if self.runs == Some(0) {
            return Err(invalid("runs", "must be at least 1"));
        }
        if self.sources.is_empty() {
            return Err(invalid("sources", "at least one source is required"));
        }
        if self.policies.is_empty() {
            return Err(invalid("policies", "at least one policy is required"));
        }
        for (i, s) in self.sources.iter().enumerate() {
            s.cost.validate().map_err(|e| invalid(format!("sources[{i}].cost"), e))?;
            if !(s.p > 0.0 && s.p <= 1.0) {
                return Err(invalid(format!("sources[{i}].p"), format!("{} is outside (0, 1]", s.p)));
            }
        }
        let spec = self.system_unchecked()?;
        // Whittle tables are built at run time; they need the bounded-cost condition.
        for (i, p) in self.policies.iter().enumerate().filter(|(_, p)| **p != PolicySpec::Whittle) {
            p.build(&spec).map_err(|e| invalid(format!("policies[{i}]"), e))?;
        }
        if let Some(DpConfig { a_max: Some(0), .. }) = self.dp {
            return Err(invalid("dp.a_max", "must be at least 1"));
        }
        Ok(())
    }

    fn sources(&self) -> Vec<Source> {
        self.sources.iter().map(|s| Source::new(s.cost.clone(), s.p)).collect()
    }

    /// The system, requiring every unreliable source to have bounded expected cost.
    pub fn system(&self) -> Result<SystemSpec, CliError> {
        SystemSpec::new(self.sources()).map_err(|e| invalid("sources", e))
    }

    pub fn system_unchecked(&self) -> Result<SystemSpec, CliError> {
        SystemSpec::new_unchecked_bounds(self.sources()).map_err(|e| invalid("sources", e))
    }
}

/// Configs for the twelve comparison settings, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("table1_A1", include_str!("../configs/table1_A1.toml")),
    ("table1_A2", include_str!("../configs/table1_A2.toml")),
    ("table1_B1", include_str!("../configs/table1_B1.toml")),
    ("table1_B2", include_str!("../configs/table1_B2.toml")),
    ("table1_C1", include_str!("../configs/table1_C1.toml")),
    ("table1_C2", include_str!("../configs/table1_C2.toml")),
    ("table2_D1", include_str!("../configs/table2_D1.toml")),
    ("table2_D2", include_str!("../configs/table2_D2.toml")),
    ("table2_E1", include_str!("../configs/table2_E1.toml")),
    ("table2_E2", include_str!("../configs/table2_E2.toml")),
    ("table2_F1", include_str!("../configs/table2_F1.toml")),
    ("table2_F2", include_str!("../configs/table2_F2.toml")),
];

pub fn bundled(name: &str) -> Result<ExperimentConfig, CliError> {
    let text = BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| invalid("<bundled>", format!("no bundled config named {name:?}")))?;
    ExperimentConfig::parse(text)
}
