// SPDX-License-Identifier: Apache-2.0

//! Finite-horizon dynamic programming over a truncated age box.
//!
//! States are ages in `[1, a_max]^N`; a source at the cap stays there when
//! it is not served. The stage cost is charged on the pre-action state.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CompensatedSum, CostError};
use crate::policy::{Policy, PolicyError, TabularPolicy, WhittleTable};
use crate::sim::{detect_cycle_from, Cycle, SimError};
use crate::system::{AgeVector, SystemError, SystemSpec};

/// Truncation mass above which a solution is flagged (and re-solved on a
/// doubled box when auto-doubling is on).
pub const TRUNCATION_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_HORIZON: u64 = 500;
pub const DEFAULT_MEMORY_BUDGET: u64 = 2 << 30;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DpError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Domain(String),
    #[error("DP needs about {required} bytes, budget is {budget}")]
    Capacity { required: u64, budget: u64 },
    #[error("cycle extraction requires reliable channels")]
    Unreliable,
}

impl From<PolicyError> for DpError {
    fn from(e: PolicyError) -> Self {
        Self::Domain(e.to_string())
    }
}

/// `[1, a_max]^N`, indexed with source 0 varying fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncatedBox {
    pub a_max: u64,
    pub sources: usize,
}

impl TruncatedBox {
    pub fn new(a_max: u64, sources: usize) -> Result<Self, DpError> {
        if a_max == 0 || sources == 0 {
            return Err(DpError::Domain("box needs a_max >= 1 and at least one source".into()));
        }
        if sources > u8::MAX as usize {
            return Err(DpError::Domain(format!("at most {} sources", u8::MAX)));
        }
        Ok(Self { a_max, sources })
    }

    /// Per-source cap used when the caller does not choose one.
    pub fn default_for(sources: usize) -> Result<Self, DpError> {
        let a_max = match sources {
            0..=2 => 30,
            3 => 20,
            4 => 15,
            _ => 10,
        };
        Self::new(a_max, sources)
    }

    pub fn state_count(&self) -> Option<usize> {
        usize::try_from(self.a_max).ok()?.checked_pow(self.sources as u32)
    }

    pub fn contains(&self, ages: &[u64]) -> bool {
        ages.len() == self.sources && ages.iter().all(|&a| a >= 1 && a <= self.a_max)
    }

    pub fn index_of(&self, ages: &[u64]) -> Option<usize> {
        if !self.contains(ages) {
            return None;
        }
        let mut idx = 0usize;
        for &a in ages.iter().rev() {
            idx = idx * self.a_max as usize + (a - 1) as usize;
        }
        Some(idx)
    }

    pub fn ages_of(&self, mut idx: usize) -> Vec<u64> {
        let m = self.a_max as usize;
        (0..self.sources)
            .map(|_| {
                let a = idx % m;
                idx /= m;
                a as u64 + 1
            })
            .collect()
    }

    fn doubled(&self) -> Self {
        Self { a_max: self.a_max * 2, ..*self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpOptions {
    pub memory_budget: u64,
    /// Keep every stage's action table on the solution.
    pub retain_stage_tables: bool,
    /// Re-solve on a doubled box while the truncation mass is too large.
    pub auto_double: bool,
    pub max_doublings: u32,
}

impl Default for DpOptions {
    fn default() -> Self {
        Self { memory_budget: DEFAULT_MEMORY_BUDGET, retain_stage_tables: false, auto_double: true, max_doublings: 2 }
    }
}

/// Bit-packed actions, one table per stage (stage 1 is the first slot).
#[derive(Debug, Clone, PartialEq)]
pub struct StageTables {
    bits: u32,
    words_per_stage: usize,
    horizon: u64,
    words: Vec<u64>,
}

impl StageTables {
    fn new(sources: usize, states: usize, horizon: u64) -> Self {
        let needed = usize::BITS - (sources - 1).leading_zeros();
        let bits = needed.max(1).next_power_of_two();
        let per = 64 / bits as usize;
        let words_per_stage = states.div_ceil(per);
        Self { bits, words_per_stage, horizon, words: vec![0; words_per_stage * horizon as usize] }
    }

    fn per_word(&self) -> usize {
        64 / self.bits as usize
    }

    /// Tables are stored by remaining stages; stage `t` has `horizon - t + 1` left.
    fn remaining_slice_mut(&mut self, remaining: u64) -> &mut [u64] {
        let start = (remaining - 1) as usize * self.words_per_stage;
        &mut self.words[start..start + self.words_per_stage]
    }

    /// Action in stage `stage` (1-based) at box index `state`.
    pub fn action(&self, stage: u64, state: usize) -> usize {
        let remaining = self.horizon - stage + 1;
        let per = self.per_word();
        let word = self.words[(remaining - 1) as usize * self.words_per_stage + state / per];
        let mask = (1u64 << self.bits) - 1;
        ((word >> ((state % per) as u32 * self.bits)) & mask) as usize
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpSolution {
    pub optimal_average_cost: f64,
    pub horizon: u64,
    pub initial_state: AgeVector,
    pub bounds: TruncatedBox,
    /// First-slot greedy action for every state of the box.
    pub policy_table: Vec<u8>,
    pub stage_tables: Option<StageTables>,
    /// Largest per-slot probability that some age sits at the cap along the
    /// optimal trajectory.
    pub truncation_report: f64,
    pub warnings: Vec<String>,
    /// Expected stage cost in each slot under the optimal policy.
    pub slot_costs: Vec<f64>,
}

impl DpSolution {
    pub fn tabular(&self, fallback: Option<Arc<WhittleTable>>) -> TabularPolicy {
        TabularPolicy { bounds: self.bounds, actions: self.policy_table.clone(), fallback }
    }

    pub fn policy(&self, fallback: Option<Arc<WhittleTable>>) -> Policy {
        Policy::Tabular(Arc::new(self.tabular(fallback)))
    }

    /// Average stage cost over the last `window` slots.
    pub fn tail_average(&self, window: usize) -> f64 {
        let w = window.min(self.slot_costs.len()).max(1);
        self.slot_costs[self.slot_costs.len() - w..].iter().sum::<f64>() / w as f64
    }
}

/// Bytes the solver would allocate for this problem.
pub fn memory_estimate(bounds: &TruncatedBox, horizon: u64) -> Option<u64> {
    let s = bounds.state_count()? as u64;
    let tables = StageTables::new(bounds.sources, 1, 1);
    let per = 64 / tables.bits as u64;
    let tape = s.div_ceil(per).checked_mul(8)?.checked_mul(horizon)?;
    // Value arrays, stage costs, successors, forward masses and the first-stage table.
    let dense = s.checked_mul(8 * 6 + 2)?;
    dense.checked_add(tape)
}

/// Optimal expected average cost over `horizon` slots from `initial`.
pub fn finite_horizon_dp(
    spec: &SystemSpec,
    horizon: u64,
    bounds: TruncatedBox,
    initial: &AgeVector,
    opts: &DpOptions,
) -> Result<DpSolution, DpError> {
    let mut bounds = bounds;
    let mut sol = solve(spec, horizon, bounds, initial, opts)?;
    let mut doublings = 0;
    while sol.truncation_report > TRUNCATION_TOLERANCE && opts.auto_double && doublings < opts.max_doublings {
        let next = bounds.doubled();
        match memory_estimate(&next, horizon) {
            Some(m) if m <= opts.memory_budget => {}
            _ => break,
        }
        bounds = next;
        doublings += 1;
        sol = solve(spec, horizon, bounds, initial, opts)?;
    }
    if sol.truncation_report > TRUNCATION_TOLERANCE {
        sol.warnings.push(format!(
            "truncation mass {:.3e} at a_max = {} exceeds {:e}",
            sol.truncation_report, sol.bounds.a_max, TRUNCATION_TOLERANCE
        ));
    }
    Ok(sol)
}

fn solve(
    spec: &SystemSpec,
    horizon: u64,
    bounds: TruncatedBox,
    initial: &AgeVector,
    opts: &DpOptions,
) -> Result<DpSolution, DpError> {
    spec.validate(false)?;
    spec.check_ages(initial)?;
    if horizon == 0 {
        return Err(DpError::Domain("horizon must be at least 1".into()));
    }
    if bounds.sources != spec.len() {
        return Err(DpError::Domain(format!("box has {} sources, system has {}", bounds.sources, spec.len())));
    }
    let start = bounds
        .index_of(initial.as_slice())
        .ok_or_else(|| DpError::Domain(format!("initial state {initial} is outside the box")))?;
    let required = memory_estimate(&bounds, horizon).unwrap_or(u64::MAX);
    if required > opts.memory_budget {
        return Err(DpError::Capacity { required, budget: opts.memory_budget });
    }
    let s = bounds.state_count().expect("checked by the estimate");
    let n = spec.len();
    let a_max = bounds.a_max;
    let strides: Vec<usize> = (0..n).map(|i| (a_max as usize).pow(i as u32)).collect();
    let probs: Vec<f64> = spec.sources.iter().map(|src| src.p).collect();

    // Per-age costs, then per-state sums.
    let mut age_costs = Vec::with_capacity(n);
    for src in &spec.sources {
        age_costs.push((1..=a_max).map(|a| src.cost.evaluate(a)).collect::<Result<Vec<f64>, _>>()?);
    }
    let stage_cost: Vec<f64> = (0..s)
        .into_par_iter()
        .map(|idx| bounds.ages_of(idx).iter().enumerate().map(|(i, &a)| age_costs[i][a as usize - 1]).sum())
        .collect();

    // `advance[x]` is the successor when nobody is served; serving i
    // subtracts `(advanced age of i - 1) * stride_i` from it.
    let m = a_max as usize;
    let advance: Vec<usize> = (0..s)
        .into_par_iter()
        .map(|idx| bounds.ages_of(idx).iter().zip(&strides).map(|(&a, &st)| ((a + 1).min(a_max) - 1) as usize * st).sum())
        .collect();
    let reset_index = |idx: usize, i: usize| -> (usize, usize) {
        let a = (idx / strides[i]) % m + 1;
        let adv = advance[idx];
        (adv, adv - ((a + 1).min(m) - 1) * strides[i])
    };

    let mut tables = StageTables::new(n, s, horizon);
    let per = tables.per_word();
    let bits = tables.bits;
    let mut v_prev = vec![0.0f64; s];
    let mut v_next = vec![0.0f64; s];
    for remaining in 1..=horizon {
        let words = tables.remaining_slice_mut(remaining);
        let prev = &v_prev;
        v_next
            .par_chunks_mut(per)
            .zip(words.par_iter_mut())
            .enumerate()
            .with_min_len(16)
            .for_each(|(w, (chunk, word))| {
                let mut packed = 0u64;
                for (off, v) in chunk.iter_mut().enumerate() {
                    let idx = w * per + off;
                    let mut best = f64::INFINITY;
                    let mut best_a = 0usize;
                    for (i, &p) in probs.iter().enumerate() {
                        let (adv, rst) = reset_index(idx, i);
                        let q = if p == 1.0 { prev[rst] } else { p * prev[rst] + (1.0 - p) * prev[adv] };
                        if q < best {
                            best = q;
                            best_a = i;
                        }
                    }
                    *v = stage_cost[idx] + best;
                    packed |= (best_a as u64) << (off as u32 * bits);
                }
                *word = packed;
            });
        std::mem::swap(&mut v_prev, &mut v_next);
    }
    let total = v_prev[start];
    drop(v_next);
    drop(v_prev);

    // Forward pass along the optimal policy for slot costs and cap mass.
    let mut mass = vec![0.0f64; s];
    let mut next_mass = vec![0.0f64; s];
    mass[start] = 1.0;
    let mut active = vec![start];
    let mut slot_costs = Vec::with_capacity(horizon as usize);
    let mut truncation: f64 = 0.0;
    for stage in 1..=horizon {
        let mut cost = CompensatedSum::new();
        let mut cap = 0.0;
        let mut next_active = Vec::with_capacity(active.len() * 2);
        for &idx in &active {
            let m = mass[idx];
            mass[idx] = 0.0;
            cost.add(m * stage_cost[idx]);
            if a_max > 1 && bounds.ages_of(idx).contains(&a_max) {
                cap += m;
            }
            let a = tables.action(stage, idx);
            let p = probs[a];
            let (adv, rst) = reset_index(idx, a);
            for (to, w) in [(rst, p), (adv, 1.0 - p)] {
                if w > 0.0 {
                    if next_mass[to] == 0.0 {
                        next_active.push(to);
                    }
                    next_mass[to] += m * w;
                }
            }
        }
        slot_costs.push(cost.value());
        truncation = truncation.max(cap);
        next_active.sort_unstable();
        next_active.dedup();
        std::mem::swap(&mut mass, &mut next_mass);
        active = next_active;
    }

    let first = (0..s).map(|idx| tables.action(1, idx) as u8).collect();
    Ok(DpSolution {
        optimal_average_cost: total / horizon as f64,
        horizon,
        initial_state: initial.clone(),
        bounds,
        policy_table: first,
        stage_tables: opts.retain_stage_tables.then_some(tables),
        truncation_report: truncation,
        warnings: Vec::new(),
        slot_costs,
    })
}

/// Follows the first-slot table from the initial state until a state recurs.
pub fn extract_cycle_policy(sol: &DpSolution, spec: &SystemSpec) -> Result<Cycle, DpError> {
    if !spec.all_reliable() {
        return Err(DpError::Unreliable);
    }
    let policy = sol.policy(None);
    let max_steps = sol.bounds.state_count().unwrap_or(usize::MAX) as u64;
    Ok(detect_cycle_from(spec, &policy, &sol.initial_state, max_steps)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostFunction;
    use crate::sim::simulate;
    use crate::system::Source;

    fn reliable(fs: Vec<CostFunction>) -> SystemSpec {
        SystemSpec::new(fs.into_iter().map(Source::reliable).collect()).unwrap()
    }

    fn solve_default(spec: &SystemSpec, horizon: u64) -> DpSolution {
        let bounds = TruncatedBox::default_for(spec.len()).unwrap();
        finite_horizon_dp(spec, horizon, bounds, &AgeVector::ones(spec.len()), &DpOptions::default()).unwrap()
    }

    #[test]
    fn box_indexing_round_trips() {
        let b = TruncatedBox::new(5, 3).unwrap();
        assert_eq!(b.state_count(), Some(125));
        for idx in 0..125 {
            assert_eq!(b.index_of(&b.ages_of(idx)), Some(idx));
        }
        assert_eq!(b.index_of(&[1, 1, 1]), Some(0));
        assert_eq!(b.index_of(&[2, 1, 1]), Some(1));
        assert_eq!(b.index_of(&[6, 1, 1]), None);
        assert!(TruncatedBox::new(0, 2).is_err());
    }

    #[test]
    fn single_linear_source_costs_one() {
        let spec = reliable(vec![CostFunction::linear(1.0).unwrap()]);
        let sol = solve_default(&spec, 10);
        assert_eq!(sol.optimal_average_cost, 1.0);
        assert_eq!(sol.truncation_report, 0.0);
        assert!(sol.slot_costs.iter().all(|&c| c == 1.0));
    }

    #[test]
    fn two_linear_sources_alternate() {
        let spec = reliable(vec![CostFunction::linear(1.0).unwrap(); 2]);
        let sol = solve_default(&spec, 100);
        // Slot 1 at (1,1) costs 2, every later slot costs 1 + 2.
        assert!((sol.optimal_average_cost - (2.0 + 99.0 * 3.0) / 100.0).abs() < 1e-12);
        let cycle = extract_cycle_policy(&sol, &spec).unwrap();
        assert_eq!(cycle.states.len(), 2);
        assert_eq!(cycle.average_cost, 3.0);
    }

    #[test]
    fn capacity_is_checked_before_allocation() {
        let spec = reliable(vec![CostFunction::linear(1.0).unwrap(); 4]);
        let opts = DpOptions { memory_budget: 1 << 20, ..DpOptions::default() };
        let err = finite_horizon_dp(&spec, 500, TruncatedBox::new(40, 4).unwrap(), &AgeVector::ones(4), &opts);
        assert!(matches!(err, Err(DpError::Capacity { .. })));
    }

    #[test]
    fn stage_tables_agree_with_first_stage() {
        let spec = reliable(vec![CostFunction::linear(13.0).unwrap(), CostFunction::power(1.0, 2.0).unwrap()]);
        let opts = DpOptions { retain_stage_tables: true, ..DpOptions::default() };
        let sol = finite_horizon_dp(&spec, 50, TruncatedBox::new(12, 2).unwrap(), &AgeVector::ones(2), &opts).unwrap();
        let tables = sol.stage_tables.as_ref().unwrap();
        for idx in 0..144 {
            assert_eq!(tables.action(1, idx), sol.policy_table[idx] as usize);
        }
    }

    #[test]
    fn dp_is_no_worse_than_simple_policies() {
        let spec = reliable(vec![
            CostFunction::power(1.0, 2.0).unwrap(),
            CostFunction::exponential(3.0, 1.0).unwrap(),
            CostFunction::linear(5.0).unwrap(),
        ]);
        let sol = solve_default(&spec, 300);
        for policy in [Policy::whittle(&spec).unwrap(), Policy::round_robin(&spec, None).unwrap(), Policy::MaxAge] {
            let r = simulate(&spec, &policy, 300, 1, 1).unwrap();
            assert!(sol.optimal_average_cost <= r.mean_cost + 1e-9, "{policy}: {} > {}", sol.optimal_average_cost, r.mean_cost);
        }
    }

    #[test]
    fn unreliable_dp_is_no_worse_than_monte_carlo() {
        let spec = SystemSpec::new(vec![
            Source::new(CostFunction::power(0.5, 3.0).unwrap(), 0.55),
            Source::new(CostFunction::logarithmic(10.0, std::f64::consts::E).unwrap(), 0.75),
        ])
        .unwrap();
        let sol = solve_default(&spec, 500);
        assert!(sol.truncation_report < TRUNCATION_TOLERANCE);
        for policy in [Policy::whittle(&spec).unwrap(), Policy::round_robin(&spec, None).unwrap(), Policy::MaxAge] {
            let r = simulate(&spec, &policy, 500, 400, 3).unwrap();
            assert!(sol.optimal_average_cost <= r.mean_cost + 3.0 * r.stderr, "{policy}");
        }
    }

    #[test]
    fn truncation_is_inert_and_horizon_stable() {
        let spec = reliable(vec![CostFunction::linear(13.0).unwrap(), CostFunction::power(1.0, 2.0).unwrap()]);
        let a = solve_default(&spec, 500);
        let b = finite_horizon_dp(&spec, 500, TruncatedBox::new(60, 2).unwrap(), &AgeVector::ones(2), &DpOptions::default())
            .unwrap();
        assert!((a.optimal_average_cost - b.optimal_average_cost).abs() <= 1e-4 * a.optimal_average_cost);
        assert!((a.tail_average(100) - a.optimal_average_cost).abs() < 0.01 * a.optimal_average_cost);
    }

    #[test]
    fn tight_box_reports_truncation() {
        let spec = reliable(vec![CostFunction::linear(1.0).unwrap(); 3]);
        let opts = DpOptions { auto_double: false, ..DpOptions::default() };
        let sol = finite_horizon_dp(&spec, 20, TruncatedBox::new(2, 3).unwrap(), &AgeVector::ones(3), &opts).unwrap();
        assert!(sol.truncation_report > TRUNCATION_TOLERANCE);
        assert_eq!(sol.warnings.len(), 1);
        let sol = finite_horizon_dp(&spec, 20, TruncatedBox::new(2, 3).unwrap(), &AgeVector::ones(3), &DpOptions::default())
            .unwrap();
        assert_eq!(sol.bounds.a_max, 4);
        assert_eq!(sol.truncation_report, 0.0);
    }
}
