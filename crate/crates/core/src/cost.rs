// SPDX-License-Identifier: Apache-2.0

//! Age-cost functions.
//!
//! A [`CostFunction`] maps a positive integer age to a non-negative,
//! non-decreasing cost. Evaluation is pure; all variants are validated at
//! construction (or after deserialization via [`CostFunction::validate`]).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest cost value any variant may return before evaluation is refused.
pub const COST_CEILING: f64 = 1e300;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("age must be at least 1, got {0}")]
    ZeroAge(u64),
    #[error("invalid cost function parameter: {0}")]
    InvalidParameter(String),
    #[error("probability {0} outside (0, 1]")]
    InvalidProbability(f64),
    #[error("cost at age {age} exceeds {COST_CEILING:e}")]
    Range { age: u64 },
    #[error("cannot parse cost function: {0}")]
    Parse(String),
}

/// A non-decreasing, non-negative cost of age.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostFunction {
    /// `w * x`
    Linear { weight: f64 },
    /// `w * x^e`
    Power {
        #[serde(default = "one")]
        weight: f64,
        exponent: f64,
    },
    /// `w * b^x`
    Exponential {
        base: f64,
        #[serde(default = "one")]
        weight: f64,
    },
    /// `w * log_b(x)`; natural log unless a base is given.
    Logarithmic {
        #[serde(default = "one")]
        weight: f64,
        #[serde(default = "euler")]
        base: f64,
    },
    /// `w * 1{x >= threshold}`
    Indicator {
        threshold: u64,
        #[serde(default = "one")]
        weight: f64,
    },
    /// `values[x - 1]`, extended past the end with the last value.
    Table { values: Vec<f64> },
}

fn one() -> f64 {
    1.0
}

fn euler() -> f64 {
    std::f64::consts::E
}

fn positive(name: &str, v: f64) -> Result<(), CostError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(CostError::InvalidParameter(format!("{name} must be positive and finite, got {v}")))
    }
}

impl CostFunction {
    pub fn linear(weight: f64) -> Result<Self, CostError> {
        let f = Self::Linear { weight };
        f.validate()?;
        Ok(f)
    }

    pub fn power(weight: f64, exponent: f64) -> Result<Self, CostError> {
        let f = Self::Power { weight, exponent };
        f.validate()?;
        Ok(f)
    }

    pub fn exponential(base: f64, weight: f64) -> Result<Self, CostError> {
        let f = Self::Exponential { base, weight };
        f.validate()?;
        Ok(f)
    }

    pub fn logarithmic(weight: f64, base: f64) -> Result<Self, CostError> {
        let f = Self::Logarithmic { weight, base };
        f.validate()?;
        Ok(f)
    }

    pub fn indicator(threshold: u64, weight: f64) -> Result<Self, CostError> {
        let f = Self::Indicator { threshold, weight };
        f.validate()?;
        Ok(f)
    }

    pub fn table(values: Vec<f64>) -> Result<Self, CostError> {
        let f = Self::Table { values };
        f.validate()?;
        Ok(f)
    }

    /// Checks the parameter domain of the variant.
    pub fn validate(&self) -> Result<(), CostError> {
        match *self {
            Self::Linear { weight } => positive("weight", weight),
            Self::Power { weight, exponent } => {
                positive("weight", weight)?;
                positive("exponent", exponent)
            }
            Self::Exponential { base, weight } | Self::Logarithmic { weight, base } => {
                positive("weight", weight)?;
                if base.is_finite() && base > 1.0 {
                    Ok(())
                } else {
                    Err(CostError::InvalidParameter(format!("base must exceed 1, got {base}")))
                }
            }
            Self::Indicator { threshold, weight } => {
                positive("weight", weight)?;
                if threshold == 0 {
                    return Err(CostError::InvalidParameter("indicator threshold must be >= 1".into()));
                }
                Ok(())
            }
            Self::Table { ref values } => {
                if values.is_empty() {
                    return Err(CostError::InvalidParameter("table must not be empty".into()));
                }
                if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(CostError::InvalidParameter(
                        "table values must be finite and non-negative".into(),
                    ));
                }
                if values.windows(2).any(|w| w[1] < w[0]) {
                    return Err(CostError::InvalidParameter("table values must be non-decreasing".into()));
                }
                Ok(())
            }
        }
    }

    /// `f(age)`. Ages start at 1.
    pub fn evaluate(&self, age: u64) -> Result<f64, CostError> {
        if age == 0 {
            return Err(CostError::ZeroAge(age));
        }
        let x = age as f64;
        let v = match *self {
            Self::Linear { weight } => weight * x,
            Self::Power { weight, exponent } => weight * int_pow(x, exponent),
            Self::Exponential { base, weight } => {
                if x * base.ln() + weight.ln() > COST_CEILING.ln() {
                    return Err(CostError::Range { age });
                }
                if age <= i32::MAX as u64 {
                    weight * base.powi(age as i32)
                } else {
                    weight * base.powf(x)
                }
            }
            Self::Logarithmic { weight, base } => weight * x.ln() / base.ln(),
            Self::Indicator { threshold, weight } => {
                if age >= threshold {
                    weight
                } else {
                    0.0
                }
            }
            Self::Table { ref values } => {
                let i = usize::try_from(age - 1).unwrap_or(usize::MAX).min(values.len() - 1);
                values[i]
            }
        };
        if v > COST_CEILING {
            return Err(CostError::Range { age });
        }
        Ok(v)
    }

    /// `sup_x f(x)`, infinite for unbounded variants.
    pub fn supremum(&self) -> f64 {
        match *self {
            Self::Indicator { weight, .. } => weight,
            Self::Table { ref values } => *values.last().expect("validated non-empty"),
            _ => f64::INFINITY,
        }
    }

    pub fn is_bounded(&self) -> bool {
        self.supremum().is_finite()
    }

    /// Smallest age from which `f` is constant, for bounded variants.
    pub fn flat_from(&self) -> Option<u64> {
        match *self {
            Self::Indicator { threshold, .. } => Some(threshold),
            Self::Table { ref values } => Some(values.len() as u64),
            _ => None,
        }
    }

    /// An upper bound on `f(y + 1) / f(y)` valid for every `y >= x`.
    ///
    /// Infinite where `f(x) = 0` (logarithmic at 1) and for bounded variants,
    /// whose tails are handled through [`CostFunction::supremum`] instead.
    pub fn growth_ratio_bound(&self, x: u64) -> f64 {
        let x = x.max(1) as f64;
        match *self {
            Self::Linear { .. } => (x + 1.0) / x,
            Self::Power { exponent, .. } => ((x + 1.0) / x).powf(exponent),
            Self::Exponential { base, .. } => base,
            Self::Logarithmic { .. } => {
                if x < 2.0 {
                    f64::INFINITY
                } else {
                    (x + 1.0).ln() / x.ln()
                }
            }
            Self::Indicator { .. } | Self::Table { .. } => f64::INFINITY,
        }
    }

    /// Largest age whose cost stays at or below `ceiling`, if any age exceeds it.
    pub fn age_limit(&self, ceiling: f64) -> Option<u64> {
        match *self {
            Self::Exponential { base, weight } => {
                let a = ((ceiling / weight).ln() / base.ln()).floor();
                Some(a.max(1.0) as u64)
            }
            Self::Linear { weight } => Some((ceiling / weight).floor().max(1.0) as u64),
            Self::Power { weight, exponent } => {
                Some((ceiling / weight).powf(1.0 / exponent).floor().max(1.0) as u64)
            }
            _ => None,
        }
    }
}

/// `x^e`, exact for small integral exponents.
fn int_pow(x: f64, e: f64) -> f64 {
    if e.fract() == 0.0 && e <= 64.0 {
        x.powi(e as i32)
    } else {
        x.powf(e)
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// `sum_{j=1}^{h} f(j)`.
pub fn prefix_sum(f: &CostFunction, h: u64) -> Result<f64, CostError> {
    if h == 0 {
        return Err(CostError::ZeroAge(0));
    }
    let mut acc = CompensatedSum::new();
    for j in 1..=h {
        acc.add(f.evaluate(j)?);
    }
    Ok(acc.value())
}

/// Outcome of the bounded-cost admissibility test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundedCost {
    pub bounded: bool,
    /// Asymptotic ratio of consecutive series terms `f(h+1)(1-p)^{h+1} / f(h)(1-p)^h`.
    pub ratio: f64,
    pub reason: String,
}

/// Decides whether `sum_h f(h) (1-p)^h` converges.
pub fn is_bounded_cost(f: &CostFunction, p: f64) -> Result<BoundedCost, CostError> {
    if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
        return Err(CostError::InvalidProbability(p));
    }
    if p == 0.0 {
        if f.is_bounded() {
            return Ok(BoundedCost {
                bounded: false,
                ratio: 1.0,
                reason: "p = 0: the source is never delivered, so the series sums a non-vanishing cost".into(),
            });
        }
        return Err(CostError::InvalidProbability(p));
    }
    if p == 1.0 {
        return Ok(BoundedCost {
            bounded: true,
            ratio: 0.0,
            reason: "reliable channel: every attempt succeeds".into(),
        });
    }
    let q = 1.0 - p;
    Ok(match *f {
        CostFunction::Exponential { base, .. } => {
            let r = base * q;
            BoundedCost {
                bounded: r < 1.0,
                ratio: r,
                reason: format!("exponential growth: base * (1 - p) = {r}"),
            }
        }
        _ => BoundedCost {
            bounded: true,
            ratio: q,
            reason: format!("sub-exponential growth against geometric decay {q}"),
        },
    })
}

impl fmt::Display for CostFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Linear { weight } => write!(f, "kind=linear weight={weight}"),
            Self::Power { weight, exponent } => {
                write!(f, "kind=power weight={weight} exponent={exponent}")
            }
            Self::Exponential { base, weight } => {
                write!(f, "kind=exponential base={base} weight={weight}")
            }
            Self::Logarithmic { weight, base } => {
                write!(f, "kind=logarithmic weight={weight} base={base}")
            }
            Self::Indicator { threshold, weight } => {
                write!(f, "kind=indicator threshold={threshold} weight={weight}")
            }
            Self::Table { values } => {
                let vs: Vec<String> = values.iter().map(|v| v.to_string()).collect();
                write!(f, "kind=table values=[{}]", vs.join(","))
            }
        }
    }
}

/// Parses the `key=value` record form, e.g. `kind=exponential base=3`.
impl FromStr for CostFunction {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut kind = None;
        let mut nums: Vec<(String, f64)> = Vec::new();
        let mut values = None;
        for tok in s.split(|c: char| c.is_whitespace() || c == ';').filter(|t| !t.is_empty()) {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| CostError::Parse(format!("expected key=value, got {tok:?}")))?;
            match k {
                "kind" => kind = Some(v.to_string()),
                "values" => {
                    let inner = v
                        .strip_prefix('[')
                        .and_then(|v| v.strip_suffix(']'))
                        .ok_or_else(|| CostError::Parse(format!("values must be [..], got {v:?}")))?;
                    let parsed: Result<Vec<f64>, _> =
                        inner.split(',').filter(|t| !t.trim().is_empty()).map(|t| t.trim().parse::<f64>()).collect();
                    values = Some(parsed.map_err(|e| CostError::Parse(e.to_string()))?);
                }
                _ => {
                    let x = v.parse::<f64>().map_err(|e| CostError::Parse(format!("{k}: {e}")))?;
                    nums.push((k.to_string(), x));
                }
            }
        }
        let get = |name: &str| nums.iter().find(|(k, _)| k == name).map(|(_, v)| *v);
        let known: &[&str] = match kind.as_deref() {
            Some("linear") => &["weight"],
            Some("power") => &["weight", "exponent"],
            Some("exponential") => &["weight", "base"],
            Some("logarithmic") => &["weight", "base"],
            Some("indicator") => &["weight", "threshold"],
            Some("table") => &[],
            Some(other) => return Err(CostError::Parse(format!("unknown kind {other:?}"))),
            None => return Err(CostError::Parse("missing kind".into())),
        };
        if let Some((k, _)) = nums.iter().find(|(k, _)| !known.contains(&k.as_str())) {
            return Err(CostError::Parse(format!("unexpected key {k:?}")));
        }
        let need = |name: &str| get(name).ok_or_else(|| CostError::Parse(format!("missing {name}")));
        match kind.as_deref() {
            Some("linear") => Self::linear(get("weight").unwrap_or(1.0)),
            Some("power") => Self::power(get("weight").unwrap_or(1.0), need("exponent")?),
            Some("exponential") => Self::exponential(need("base")?, get("weight").unwrap_or(1.0)),
            Some("logarithmic") => {
                Self::logarithmic(get("weight").unwrap_or(1.0), get("base").unwrap_or(std::f64::consts::E))
            }
            Some("indicator") => {
                let t = need("threshold")?;
                if t.fract() != 0.0 || t < 1.0 {
                    return Err(CostError::Parse(format!("threshold must be a positive integer, got {t}")));
                }
                Self::indicator(t as u64, get("weight").unwrap_or(1.0))
            }
            _ => Self::table(values.ok_or_else(|| CostError::Parse("missing values".into()))?),
        }
    }
}
