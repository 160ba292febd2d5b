// SPDX-License-Identifier: Apache-2.0

//! Structural checks: strong-switch-type sets, two-source cyclic optima and
//! the certificate that the Whittle policy is optimal for two reliable sources.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostFunction;
use crate::dp::{finite_horizon_dp, DpError, DpOptions, TruncatedBox, DEFAULT_HORIZON};
use crate::policy::{Policy, PolicyError, WhittleTable, DEFAULT_INDEX_AGES};
use crate::sim::{detect_cycle, Cycle, SimError};
use crate::system::{AgeVector, Source, SystemError, SystemSpec};

pub const DEFAULT_K_MAX: u64 = 1000;
/// Cycle costs must agree to this relative tolerance.
pub const CYCLE_TOLERANCE: f64 = 1e-6;
/// The finite-horizon DP cost must agree with the cycle cost to this relative tolerance.
pub const DP_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StructureError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error("state {0} appears twice")]
    DuplicateState(AgeVector),
    #[error("state {state} does not match the set's {expected} sources")]
    Arity { state: AgeVector, expected: usize },
    #[error("best cycle sits at k_max = {k_max}; retry with a larger k_max")]
    Inconclusive { k_max: u64 },
    #[error("certification failed: {reason}")]
    Certification { reason: String, witnesses: Vec<(String, f64)> },
}

/// Distinct states with the action taken in each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<StateAction>", into = "Vec<StateAction>")]
pub struct StateActionSet {
    pairs: Vec<(AgeVector, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateAction {
    pub state: AgeVector,
    #[serde(with = "crate::system::one_based")]
    pub action: usize,
}

impl TryFrom<Vec<StateAction>> for StateActionSet {
    type Error = StructureError;

    fn try_from(v: Vec<StateAction>) -> Result<Self, StructureError> {
        Self::new(v.into_iter().map(|p| (p.state, p.action)).collect())
    }
}

impl From<StateActionSet> for Vec<StateAction> {
    fn from(s: StateActionSet) -> Self {
        s.pairs.into_iter().map(|(state, action)| StateAction { state, action }).collect()
    }
}

impl StateActionSet {
    pub fn new(pairs: Vec<(AgeVector, usize)>) -> Result<Self, StructureError> {
        if let Some((first, _)) = pairs.first() {
            let n = first.len();
            for (s, _) in &pairs {
                if s.len() != n {
                    return Err(StructureError::Arity { state: s.clone(), expected: n });
                }
            }
        }
        let mut sorted: Vec<&AgeVector> = pairs.iter().map(|(s, _)| s).collect();
        sorted.sort();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(StructureError::DuplicateState(w[0].clone()));
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(AgeVector, usize)] {
        &self.pairs
    }
}

impl TryFrom<&Cycle> for StateActionSet {
    type Error = StructureError;

    fn try_from(c: &Cycle) -> Result<Self, StructureError> {
        Self::new(c.states.iter().cloned().zip(c.actions.iter().copied()).collect())
    }
}

/// `state` picks `action`, so `dominated` (at least as old in `action`, no
/// older elsewhere) should pick it too but picks `observed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchViolation {
    pub state: AgeVector,
    #[serde(with = "crate::system::one_based")]
    pub action: usize,
    pub dominated: AgeVector,
    #[serde(with = "crate::system::one_based")]
    pub observed: usize,
}

fn implies(x: &[u64], i: usize, y: &[u64]) -> bool {
    y.iter().zip(x).enumerate().all(|(j, (&yj, &xj))| if j == i { yj >= xj } else { yj <= xj })
}

/// All pairwise violations, at most one per unordered pair of states.
pub fn check_strong_switch(set: &StateActionSet) -> Vec<SwitchViolation> {
    let p = &set.pairs;
    let mut out = Vec::new();
    for a in 0..p.len() {
        for b in a + 1..p.len() {
            let (x, i) = (&p[a].0, p[a].1);
            let (y, j) = (&p[b].0, p[b].1);
            if i != j && implies(&x.0, i, &y.0) {
                out.push(SwitchViolation { state: x.clone(), action: i, dominated: y.clone(), observed: j });
            } else if i != j && implies(&y.0, j, &x.0) {
                out.push(SwitchViolation { state: y.clone(), action: j, dominated: x.clone(), observed: i });
            }
        }
    }
    out
}

/// Average cost of serving the leader (`f1`) `k` times and then the other
/// source once, on reliable channels. Overflow gives `inf`.
pub fn two_source_cycle_cost(f1: &CostFunction, f2: &CostFunction, k: u64) -> f64 {
    let eval = |f: &CostFunction, a: u64| f.evaluate(a).unwrap_or(f64::INFINITY);
    let mut total = 0.0;
    for j in 1..=k + 1 {
        total += eval(f2, j);
    }
    total += k as f64 * eval(f1, 1) + eval(f1, 2);
    total / (k + 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoSourceCycle {
    /// Source scheduled `k` times per cycle.
    #[serde(with = "crate::system::one_based")]
    pub leader: usize,
    pub k: u64,
    pub cost: f64,
}

/// Minimum over both leaders and `k` in `1..=k_max`; ties go to the smaller
/// `k`, then to leader 0.
pub fn best_two_source_cycle(f1: &CostFunction, f2: &CostFunction, k_max: u64) -> Result<TwoSourceCycle, StructureError> {
    let eval = |f: &CostFunction, a: u64| f.evaluate(a).unwrap_or(f64::INFINITY);
    let fs = [f1, f2];
    // Running sums of the other source's costs over ages 1..=k+1.
    let mut sums = [eval(f2, 1), eval(f1, 1)];
    let mut best: Option<TwoSourceCycle> = None;
    for k in 1..=k_max {
        for leader in 0..2 {
            let (lead, other) = (fs[leader], fs[1 - leader]);
            sums[leader] += eval(other, k + 1);
            let cost = (sums[leader] + k as f64 * eval(lead, 1) + eval(lead, 2)) / (k + 1) as f64;
            if best.is_none_or(|b| cost < b.cost) {
                best = Some(TwoSourceCycle { leader, k, cost });
            }
        }
    }
    let best = best.ok_or(StructureError::Inconclusive { k_max })?;
    if best.k >= k_max {
        return Err(StructureError::Inconclusive { k_max });
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Certificate {
    pub whittle_cycle: Cycle,
    /// The Whittle cycle in leader/k form.
    pub whittle: TwoSourceCycle,
    pub best: TwoSourceCycle,
    pub dp_cost: f64,
    pub dp_a_max: u64,
    /// `W_L(1)`, `W_O(k)` and `W_O(k+1)` for leader L and other source O.
    pub leader_index: f64,
    pub other_index_k: f64,
    pub other_index_k1: f64,
}

fn fail(reason: impl Into<String>, witnesses: Vec<(&str, f64)>) -> StructureError {
    StructureError::Certification {
        reason: reason.into(),
        witnesses: witnesses.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    }
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

/// Checks that for two reliable sources the Whittle cycle, the best cycle of
/// the leader/k family and the finite-horizon DP optimum coincide.
pub fn certify_theorem3(f1: &CostFunction, f2: &CostFunction) -> Result<Theorem3Certificate, StructureError> {
    let spec = SystemSpec::new(vec![Source::reliable(f1.clone()), Source::reliable(f2.clone())])?;
    let table = Arc::new(WhittleTable::new(&spec, DEFAULT_INDEX_AGES)?);
    let whittle = Policy::Whittle(table.clone());
    let cycle = detect_cycle(&spec, &whittle, 100_000)?;

    // Leader is the source served at all-ones; the other is served once.
    let leader = table.argmax(&[1, 1])?;
    let other = 1 - leader;
    let served_other = cycle.actions.iter().filter(|&&a| a == other).count();
    let k = (cycle.len() - served_other) as u64;
    if served_other != 1 || k == 0 {
        return Err(fail(
            format!("Whittle cycle serves source {} {served_other} times per period", other + 1),
            vec![("cycle_length", cycle.len() as f64)],
        ));
    }
    let fs = [f1, f2];
    let w_form = TwoSourceCycle { leader, k, cost: two_source_cycle_cost(fs[leader], fs[other], k) };
    if !close(w_form.cost, cycle.average_cost, 1e-12) {
        return Err(fail(
            "Whittle cycle is not of the leader/k form",
            vec![("cycle_cost", cycle.average_cost), ("formula_cost", w_form.cost)],
        ));
    }

    let wl = table.index(leader, 1)?;
    let wk = table.index(other, k)?;
    let wk1 = table.index(other, k + 1)?;
    // Ties go to source 1, so the strict side depends on which source leads.
    let (stays, switches) = if leader == 0 { (wl >= wk, wk1 > wl) } else { (wl > wk, wk1 >= wl) };
    if !(stays && switches) {
        return Err(fail(
            "Whittle index inequalities fail at the realized k",
            vec![("W_leader(1)", wl), ("W_other(k)", wk), ("W_other(k+1)", wk1), ("k", k as f64)],
        ));
    }

    let best = best_two_source_cycle(f1, f2, DEFAULT_K_MAX.max(4 * k))?;
    if !close(best.cost, cycle.average_cost, CYCLE_TOLERANCE) {
        return Err(fail(
            "Whittle cycle is not the best leader/k cycle",
            vec![("whittle_cycle", cycle.average_cost), ("best_cycle", best.cost), ("best_k", best.k as f64)],
        ));
    }

    let base = TruncatedBox::default_for(2)?;
    let a_max = base.a_max.max(2 * (k.max(best.k) + 2));
    let dp = finite_horizon_dp(&spec, DEFAULT_HORIZON, TruncatedBox::new(a_max, 2)?, &AgeVector::ones(2), &DpOptions::default())?;
    if !close(dp.optimal_average_cost, cycle.average_cost, DP_TOLERANCE) {
        return Err(fail(
            "DP cost differs from the Whittle cycle cost",
            vec![("dp", dp.optimal_average_cost), ("whittle_cycle", cycle.average_cost)],
        ));
    }
    Ok(Theorem3Certificate {
        whittle_cycle: cycle,
        whittle: w_form,
        best,
        dp_cost: dp.optimal_average_cost,
        dp_a_max: dp.bounds.a_max,
        leader_index: wl,
        other_index_k: wk,
        other_index_k1: wk1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::detect_cycle;
    use proptest::prelude::*;

    fn av(v: &[u64]) -> AgeVector {
        AgeVector::from(v.to_vec())
    }

    fn lin(w: f64) -> CostFunction {
        CostFunction::linear(w).unwrap()
    }

    #[test]
    fn constructed_witness_is_one_violation() {
        let set = StateActionSet::new(vec![(av(&[1, 4]), 0), (av(&[2, 3]), 1)]).unwrap();
        let v = check_strong_switch(&set);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0], SwitchViolation { state: av(&[1, 4]), action: 0, dominated: av(&[2, 3]), observed: 1 });
        assert!(StateActionSet::new(vec![(av(&[1, 4]), 0), (av(&[1, 4]), 1)]).is_err());
        assert!(StateActionSet::new(vec![(av(&[1, 4]), 0), (av(&[1]), 1)]).is_err());
    }

    #[test]
    fn cycle_cost_examples() {
        assert_eq!(two_source_cycle_cost(&lin(1.0), &lin(1.0), 1), 3.0);
        let sq = CostFunction::power(1.0, 2.0).unwrap();
        assert_eq!(two_source_cycle_cost(&lin(13.0), &sq, 1), 22.0);
        let best = best_two_source_cycle(&lin(1.0), &lin(1.0), 100).unwrap();
        assert_eq!((best.leader, best.k, best.cost), (0, 1, 3.0));
    }

    #[test]
    fn cycle_cost_matches_simulator() {
        let fams = [
            lin(13.0),
            CostFunction::power(1.0, 2.0).unwrap(),
            CostFunction::power(0.5, 3.0).unwrap(),
            CostFunction::logarithmic(10.0, std::f64::consts::E).unwrap(),
            CostFunction::exponential(3.0, 1.0).unwrap(),
        ];
        for f1 in &fams {
            for f2 in &fams {
                let spec = SystemSpec::new(vec![Source::reliable(f1.clone()), Source::reliable(f2.clone())]).unwrap();
                for k in 1..=50u64 {
                    let mut actions = vec![0; k as usize];
                    actions.push(1);
                    let policy = Policy::fixed_cycle(&spec, actions).unwrap();
                    let c = detect_cycle(&spec, &policy, 10_000).unwrap();
                    let formula = two_source_cycle_cost(f1, f2, k);
                    if formula.is_finite() {
                        assert!(close(c.average_cost, formula, 1e-10), "k {k}: {} vs {formula}", c.average_cost);
                    }
                }
            }
        }
    }

    #[test]
    fn boundary_minimizer_is_inconclusive() {
        // A bounded second cost makes longer leader runs ever cheaper.
        let f2 = CostFunction::indicator(3, 1.0).unwrap();
        let err = best_two_source_cycle(&lin(100.0), &f2, 50);
        assert_eq!(err, Err(StructureError::Inconclusive { k_max: 50 }));
    }

    #[test]
    fn certifies_identical_linear_sources() {
        let cert = certify_theorem3(&lin(1.0), &lin(1.0)).unwrap();
        assert_eq!(cert.whittle.k, 1);
        assert_eq!(cert.best.cost, 3.0);
        assert_eq!(cert.whittle_cycle.average_cost, 3.0);
    }

    #[test]
    fn certifies_a1() {
        let cert = certify_theorem3(&lin(13.0), &CostFunction::power(1.0, 2.0).unwrap()).unwrap();
        assert_eq!(cert.whittle_cycle.average_cost, 22.0);
        assert!(check_strong_switch(&StateActionSet::try_from(&cert.whittle_cycle).unwrap()).is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn monotone_index_policies_are_strong_switch(
            increments in prop::collection::vec(prop::collection::vec(0.0f64..3.0, 12), 2..4),
            states in prop::collection::vec(prop::collection::vec(1u64..=12, 3), 2..12),
        ) {
            let tables: Vec<Vec<f64>> = increments
                .iter()
                .map(|inc| inc.iter().scan(0.0, |acc, d| { *acc += d; Some(*acc) }).collect())
                .collect();
            let n = tables.len();
            let table = WhittleTable::from_indices(tables).unwrap();
            let mut pairs: Vec<(AgeVector, usize)> = Vec::new();
            for s in &states {
                let x = AgeVector::from(s[..n].to_vec());
                if pairs.iter().all(|(y, _)| y != &x) {
                    let a = table.argmax(x.as_slice()).unwrap();
                    pairs.push((x, a));
                }
            }
            let set = StateActionSet::new(pairs).unwrap();
            prop_assert!(check_strong_switch(&set).is_empty());
        }
    }
}
