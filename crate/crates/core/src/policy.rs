// SPDX-License-Identifier: Apache-2.0

//! Multi-source scheduling rules.
//!
//! Source indices are 0-based inside the library. Every policy is built
//! against a [`SystemSpec`] and afterwards decides from the age vector and
//! slot number alone.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::cost::{CompensatedSum, CostFunction};
use crate::decoupled::{discounted_tail, whittle_index, DecoupledError, SERIES_TOL};
use crate::dp::TruncatedBox;
use crate::system::{AgeVector, SystemError, SystemSpec};

/// Ages covered by a Whittle table unless a caller asks for more.
pub const DEFAULT_INDEX_AGES: u64 = 1024;
/// The cost ceiling below which index tables are precomputed.
const TABLE_COST_CEILING: f64 = 1e280;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Decoupled(#[from] DecoupledError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("invalid policy: {0}")]
    Invalid(String),
    #[error("state {0} is not covered by the policy table")]
    MissingState(AgeVector),
    #[error("age {age} of source {source_no} is beyond the index table")]
    AgeOutOfRange { source_no: usize, age: u64 },
}

/// `W_i(h)` for `h = 1..=len` per source; larger ages are computed on demand
/// when the table was built from cost functions.
#[derive(Debug, Clone, PartialEq)]
pub struct WhittleTable {
    indices: Vec<Vec<f64>>,
    sources: Option<Vec<(CostFunction, f64)>>,
}

impl WhittleTable {
    pub fn new(spec: &SystemSpec, a_max: u64) -> Result<Self, PolicyError> {
        let indices = spec
            .sources
            .iter()
            .map(|s| {
                let len = match s.cost.age_limit(TABLE_COST_CEILING) {
                    Some(lim) => a_max.min(lim.saturating_sub(2)),
                    None => a_max,
                };
                index_array(&s.cost, s.p, len)
            })
            .collect::<Result<_, _>>()?;
        let sources = Some(spec.sources.iter().map(|s| (s.cost.clone(), s.p)).collect());
        Ok(Self { indices, sources })
    }

    /// An index policy over arbitrary per-source tables (entry `h - 1` is the
    /// index at age `h`). Ages past a table's end are an error.
    pub fn from_indices(indices: Vec<Vec<f64>>) -> Result<Self, PolicyError> {
        if indices.is_empty() || indices.iter().any(|v| v.is_empty()) {
            return Err(PolicyError::Invalid("index tables must be non-empty".into()));
        }
        Ok(Self { indices, sources: None })
    }

    pub fn arrays(&self) -> &[Vec<f64>] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn index(&self, source: usize, age: u64) -> Result<f64, PolicyError> {
        let table = &self.indices[source];
        if age >= 1 && (age as usize) <= table.len() {
            return Ok(table[age as usize - 1]);
        }
        match &self.sources {
            Some(src) => {
                let (f, p) = &src[source];
                Ok(whittle_index(f, *p, age)?)
            }
            None => Err(PolicyError::AgeOutOfRange { source_no: source + 1, age }),
        }
    }

    /// Highest index, ties to the lowest source.
    pub fn argmax(&self, ages: &[u64]) -> Result<usize, PolicyError> {
        let mut best = 0;
        let mut best_w = self.index(0, ages[0])?;
        for (i, &a) in ages.iter().enumerate().skip(1) {
            let w = self.index(i, a)?;
            if w > best_w {
                best = i;
                best_w = w;
            }
        }
        Ok(best)
    }
}

fn index_array(f: &CostFunction, p: f64, len: u64) -> Result<Vec<f64>, PolicyError> {
    let mut out = Vec::with_capacity(len as usize);
    if len == 0 {
        return Ok(out);
    }
    let mut prefix = CompensatedSum::new();
    if p == 1.0 {
        for h in 1..=len {
            prefix.add(f.evaluate(h).map_err(DecoupledError::from)?);
            out.push(h as f64 * f.evaluate(h + 1).map_err(DecoupledError::from)? - prefix.value());
        }
        return Ok(out);
    }
    // T(s) = sum_{k>=0} f(s+k) q^k obeys T(s) = f(s) + q T(s+1).
    let q = 1.0 - p;
    let mut tails = vec![0.0; len as usize + 2];
    tails[len as usize + 1] = discounted_tail(f, len + 1, q, SERIES_TOL)?;
    for s in (2..=len).rev() {
        tails[s as usize] = f.evaluate(s).map_err(DecoupledError::from)? + q * tails[s as usize + 1];
    }
    for h in 1..=len {
        prefix.add(f.evaluate(h).map_err(DecoupledError::from)?);
        out.push(p * p * h as f64 * tails[h as usize + 1] - p * prefix.value());
    }
    Ok(out)
}

/// Per-source Whittle index arrays for ages `1..=a_max`.
pub fn whittle_index_table(spec: &SystemSpec, a_max: u64) -> Result<Vec<Vec<f64>>, PolicyError> {
    spec.sources.iter().map(|s| index_array(&s.cost, s.p, a_max)).collect()
}

/// Dense action table over a truncated age box, as produced by the DP solver.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub bounds: TruncatedBox,
    pub actions: Vec<u8>,
    /// Decision rule outside the box; `None` makes misses an error.
    pub fallback: Option<Arc<WhittleTable>>,
}

impl TabularPolicy {
    pub fn lookup(&self, ages: &[u64]) -> Option<usize> {
        self.bounds.index_of(ages).map(|i| self.actions[i] as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    /// Highest Whittle index.
    Whittle(Arc<WhittleTable>),
    /// `order[t mod N]`.
    RoundRobin(Vec<usize>),
    /// Independent draw each slot with the given probabilities.
    StationaryRandomized(Vec<f64>),
    /// Oldest source, ties to the lowest index.
    MaxAge,
    /// `actions[t mod len]`.
    FixedCycle(Vec<usize>),
    Tabular(Arc<TabularPolicy>),
}

impl Policy {
    pub fn whittle(spec: &SystemSpec) -> Result<Self, PolicyError> {
        Ok(Self::Whittle(Arc::new(WhittleTable::new(spec, DEFAULT_INDEX_AGES)?)))
    }

    pub fn round_robin(spec: &SystemSpec, order: Option<Vec<usize>>) -> Result<Self, PolicyError> {
        let n = spec.len();
        let order = order.unwrap_or_else(|| (0..n).collect());
        let mut seen = vec![false; n];
        if order.len() != n {
            return Err(PolicyError::Invalid(format!("round-robin order must list all {n} sources")));
        }
        for &i in &order {
            if i >= n || seen[i] {
                return Err(PolicyError::Invalid("round-robin order must be a permutation".into()));
            }
            seen[i] = true;
        }
        Ok(Self::RoundRobin(order))
    }

    pub fn randomized(spec: &SystemSpec, probs: Vec<f64>) -> Result<Self, PolicyError> {
        if probs.len() != spec.len() {
            return Err(PolicyError::Invalid(format!("expected {} probabilities, got {}", spec.len(), probs.len())));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(PolicyError::Invalid("probabilities must be non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(PolicyError::Invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self::StationaryRandomized(probs))
    }

    pub fn fixed_cycle(spec: &SystemSpec, actions: Vec<usize>) -> Result<Self, PolicyError> {
        if actions.is_empty() {
            return Err(PolicyError::Invalid("cycle must not be empty".into()));
        }
        if let Some(&bad) = actions.iter().find(|&&a| a >= spec.len()) {
            return Err(PolicyError::Invalid(format!("cycle names source {} of {}", bad + 1, spec.len())));
        }
        Ok(Self::FixedCycle(actions))
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self, Self::StationaryRandomized(_))
    }

    /// Time-dependent policies return their period.
    pub fn period(&self) -> u64 {
        match self {
            Self::RoundRobin(o) => o.len() as u64,
            Self::FixedCycle(a) => a.len() as u64,
            _ => 1,
        }
    }

    /// Source to schedule in slot `t` (0-based) at `ages`.
    pub fn decide<R: Rng + ?Sized>(&self, ages: &[u64], t: u64, rng: &mut R) -> Result<usize, PolicyError> {
        match self {
            Self::Whittle(table) => table.argmax(ages),
            Self::RoundRobin(order) => Ok(order[(t % order.len() as u64) as usize]),
            Self::FixedCycle(actions) => Ok(actions[(t % actions.len() as u64) as usize]),
            Self::MaxAge => {
                let mut best = 0;
                for (i, &a) in ages.iter().enumerate() {
                    if a > ages[best] {
                        best = i;
                    }
                }
                Ok(best)
            }
            Self::StationaryRandomized(probs) => {
                let u: f64 = rng.gen();
                let mut cum = 0.0;
                let mut last = 0;
                for (i, &p) in probs.iter().enumerate() {
                    if p > 0.0 {
                        last = i;
                        cum += p;
                        if u < cum {
                            return Ok(i);
                        }
                    }
                }
                Ok(last)
            }
            Self::Tabular(tab) => match tab.lookup(ages) {
                Some(a) => Ok(a),
                None => match &tab.fallback {
                    Some(w) => w.argmax(ages),
                    None => Err(PolicyError::MissingState(AgeVector(ages.to_vec()))),
                },
            },
        }
    }

    /// Deterministic decision; randomized policies are rejected.
    pub fn decide_deterministic(&self, ages: &[u64], t: u64) -> Result<usize, PolicyError> {
        if !self.is_deterministic() {
            return Err(PolicyError::Invalid("policy is randomized".into()));
        }
        self.decide(ages, t, &mut rand::rngs::mock::StepRng::new(0, 0))
    }

    /// Checks `ages` against the system before deciding.
    pub fn decide_checked<R: Rng + ?Sized>(
        &self,
        spec: &SystemSpec,
        ages: &AgeVector,
        t: u64,
        rng: &mut R,
    ) -> Result<usize, PolicyError> {
        spec.check_ages(ages)?;
        let a = self.decide(ages.as_slice(), t, rng)?;
        debug_assert!(a < spec.len());
        Ok(a)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |v: &[usize]| v.iter().map(|i| (i + 1).to_string()).collect::<Vec<_>>().join(",");
        match self {
            Self::Whittle(_) => write!(f, "whittle"),
            Self::RoundRobin(o) => {
                if o.iter().enumerate().all(|(i, &s)| i == s) {
                    write!(f, "round_robin")
                } else {
                    write!(f, "round_robin({})", list(o))
                }
            }
            Self::StationaryRandomized(p) => {
                let ps: Vec<String> = p.iter().map(|x| x.to_string()).collect();
                write!(f, "randomized({})", ps.join(","))
            }
            Self::MaxAge => write!(f, "max_age"),
            Self::FixedCycle(a) => write!(f, "cycle({})", list(a)),
            Self::Tabular(_) => write!(f, "dp"),
        }
    }
}
