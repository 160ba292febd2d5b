// SPDX-License-Identifier: Apache-2.0

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{is_bounded_cost, CostError, CostFunction};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SystemError {
    #[error("a system needs at least one source")]
    Empty,
    #[error("source {source_no}: {err}")]
    Cost { source_no: usize, err: CostError },
    #[error("source {source_no}: success probability {p} outside (0, 1]")]
    Probability { source_no: usize, p: f64 },
    #[error("source {source_no} is not admissible: {reason}")]
    Unbounded { source_no: usize, reason: String },
    #[error("age vector has {got} entries, expected {expected}")]
    Arity { expected: usize, got: usize },
    #[error("ages must be at least 1")]
    ZeroAge,
}

/// One source: its cost of age and its channel success probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub cost: CostFunction,
    pub p: f64,
}

impl Source {
    pub fn new(cost: CostFunction, p: f64) -> Self {
        Self { cost, p }
    }

    pub fn reliable(cost: CostFunction) -> Self {
        Self { cost, p: 1.0 }
    }
}

/// N sources sharing one transmission per slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub sources: Vec<Source>,
}

impl SystemSpec {
    /// Validates the sources, requiring the bounded-cost condition for
    /// every unreliable one.
    pub fn new(sources: Vec<Source>) -> Result<Self, SystemError> {
        let spec = Self { sources };
        spec.validate(true)?;
        Ok(spec)
    }

    /// Skips the bounded-cost requirement; used to exhibit divergent settings.
    pub fn new_unchecked_bounds(sources: Vec<Source>) -> Result<Self, SystemError> {
        let spec = Self { sources };
        spec.validate(false)?;
        Ok(spec)
    }

    pub fn validate(&self, require_bounded: bool) -> Result<(), SystemError> {
        if self.sources.is_empty() {
            return Err(SystemError::Empty);
        }
        for (i, s) in self.sources.iter().enumerate() {
            let source_no = i + 1;
            s.cost.validate().map_err(|err| SystemError::Cost { source_no, err })?;
            if !(s.p > 0.0 && s.p <= 1.0) {
                return Err(SystemError::Probability { source_no, p: s.p });
            }
            if require_bounded {
                let verdict = is_bounded_cost(&s.cost, s.p).map_err(|err| SystemError::Cost { source_no, err })?;
                if !verdict.bounded {
                    return Err(SystemError::Unbounded { source_no, reason: verdict.reason });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn all_reliable(&self) -> bool {
        self.sources.iter().all(|s| s.p == 1.0)
    }

    pub fn check_ages(&self, ages: &AgeVector) -> Result<(), SystemError> {
        if ages.len() != self.len() {
            return Err(SystemError::Arity { expected: self.len(), got: ages.len() });
        }
        if ages.0.contains(&0) {
            return Err(SystemError::ZeroAge);
        }
        Ok(())
    }

    /// `sum_i f_i(ages_i)`.
    pub fn stage_cost(&self, ages: &AgeVector) -> Result<f64, CostError> {
        let mut total = 0.0;
        for (s, &a) in self.sources.iter().zip(&ages.0) {
            total += s.cost.evaluate(a)?;
        }
        Ok(total)
    }
}

/// Ages of all sources, 1-based (an age of 1 means delivered last slot).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgeVector(pub Vec<u64>);

impl AgeVector {
    pub fn ones(n: usize) -> Self {
        Self(vec![1; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }

    /// Ages after one slot in which `served` (if any) was delivered.
    pub fn advance(&mut self, served: Option<usize>) {
        for (i, a) in self.0.iter_mut().enumerate() {
            if Some(i) == served {
                *a = 1;
            } else {
                *a += 1;
            }
        }
    }
}

impl From<Vec<u64>> for AgeVector {
    fn from(v: Vec<u64>) -> Self {
        Self(v)
    }
}

impl fmt::Display for AgeVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{a}")?;
        }
        write!(f, ")")
    }
}

/// Serde adapters writing 0-based source indices as 1-based numbers.
pub mod one_based {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(i: &usize, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(*i as u64 + 1)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<usize, D::Error> {
        let v = u64::deserialize(d)?;
        v.checked_sub(1).map(|i| i as usize).ok_or_else(|| D::Error::custom("sources are numbered from 1"))
    }

    pub mod vec {
        use serde::{de::Error, ser::SerializeSeq, Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &[usize], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for i in v {
                seq.serialize_element(&(*i as u64 + 1))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<usize>, D::Error> {
            Vec::<u64>::deserialize(d)?
                .into_iter()
                .map(|v| v.checked_sub(1).map(|i| i as usize).ok_or_else(|| D::Error::custom("sources are numbered from 1")))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert_eq!(SystemSpec::new(vec![]), Err(SystemError::Empty));
        let e3 = CostFunction::exponential(3.0, 1.0).unwrap();
        let err = SystemSpec::new(vec![Source::reliable(CostFunction::linear(1.0).unwrap()), Source::new(e3.clone(), 0.5)])
            .unwrap_err();
        assert!(matches!(err, SystemError::Unbounded { source_no: 2, .. }));
        assert!(SystemSpec::new_unchecked_bounds(vec![Source::new(e3.clone(), 0.5)]).is_ok());
        assert!(SystemSpec::new(vec![Source::new(e3, 0.0)]).is_err());
    }

    #[test]
    fn advance_resets_served_source() {
        let mut a = AgeVector::from(vec![3, 1, 7]);
        a.advance(Some(2));
        assert_eq!(a.0, vec![4, 2, 1]);
        a.advance(None);
        assert_eq!(a.0, vec![5, 3, 2]);
        assert_eq!(a.to_string(), "(5,3,2)");
    }
}
