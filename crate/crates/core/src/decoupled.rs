// SPDX-License-Identifier: Apache-2.0

//! Single-arm decoupled problem.
//!
//! One source in isolation pays `f(age)` every slot plus a charge `C` for
//! every activation. Activation resets the age to 1 with probability `p`;
//! otherwise (and when resting) the age grows by one. This module computes
//! the Whittle index `W(h)` of the arm, inverts it into the optimal
//! activation threshold for a given charge, and solves the same problem
//! numerically with relative value iteration as an independent check.
//!
//! Indices use the form `W(h) = h f(h+1) - sum_{j<=h} f(j)` (reliable) and
//! `W(h) = p^2 h sum_{k>=1} f(k+h)(1-p)^{k-1} - p sum_{j<=h} f(j)`
//! (unreliable) everywhere; with that form the optimal threshold for a
//! charge `C` is the smallest `h` with `W(h) > C`.

use serde::Serialize;
use thiserror::Error;

use crate::cost::{is_bounded_cost, prefix_sum, CompensatedSum, CostError, CostFunction};

/// Default absolute/relative tolerance for index series.
pub const SERIES_TOL: f64 = 1e-13;
/// Default span tolerance for value iteration.
pub const VI_TOL: f64 = 1e-9;
pub const VI_MAX_ITERS: usize = 1_000_000;
/// Smallest truncation used by value iteration.
pub const MIN_TRUNCATION: u64 = 256;
/// Value iteration never truncates past the age where `f` exceeds this.
const TRUNCATION_COST_CEILING: f64 = 1e250;
const MAX_TRUNCATION: u64 = 1 << 20;
const MAX_SERIES_TERMS: usize = 50_000_000;
/// Aperiodicity weight for relative value iteration.
const APERIODICITY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecoupledError {
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("cost function is not admissible at p = {p}: {reason}")]
    Inadmissible { p: f64, reason: String },
    #[error("value iteration did not converge after {iterations} iterations (span {span:e})")]
    Convergence { iterations: usize, span: f64 },
    #[error("series did not converge within {0} terms")]
    Series(usize),
    #[error("truncation at {a_max} cannot be enlarged far enough")]
    Truncation { a_max: u64 },
    #[error("internal consistency check failed: {0}")]
    Consistency(String),
}

/// Activate iff the age is at least the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    At(u64),
    /// Never activate. Orders above every finite threshold.
    Never,
}

impl ThresholdPolicy {
    pub fn activates(&self, age: u64) -> bool {
        match *self {
            Self::At(h) => age >= h,
            Self::Never => false,
        }
    }

    pub fn threshold(&self) -> Option<u64> {
        match *self {
            Self::At(h) => Some(h),
            Self::Never => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledProblem {
    pub cost: CostFunction,
    pub p: f64,
    pub charge: f64,
}

impl DecoupledProblem {
    pub fn new(cost: CostFunction, p: f64, charge: f64) -> Result<Self, DecoupledError> {
        let prob = Self { cost, p, charge };
        prob.validate()?;
        Ok(prob)
    }

    pub fn validate(&self) -> Result<(), DecoupledError> {
        self.cost.validate()?;
        if !(self.charge.is_finite() && self.charge >= 0.0) {
            return Err(DecoupledError::Domain(format!("charge must be >= 0, got {}", self.charge)));
        }
        admissible(&self.cost, self.p)
    }
}

fn admissible(f: &CostFunction, p: f64) -> Result<(), DecoupledError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(DecoupledError::Domain(format!("p must lie in (0, 1], got {p}")));
    }
    let verdict = is_bounded_cost(f, p)?;
    if !verdict.bounded {
        return Err(DecoupledError::Inadmissible { p, reason: verdict.reason });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecoupledSolution {
    pub policy: ThresholdPolicy,
    /// Optimal long-run average cost per slot, activation charges included.
    pub average_cost: f64,
    /// Differential cost-to-go `S(h)` for `h = 1..=a_max`, normalized to `S(1) = 0`.
    pub differential_costs: Vec<f64>,
    pub a_max: u64,
    pub iterations: usize,
    pub span: f64,
}

/// Reliable-channel index `h f(h+1) - sum_{j<=h} f(j)`.
pub fn whittle_reliable(f: &CostFunction, h: u64) -> Result<f64, DecoupledError> {
    if h == 0 {
        return Err(CostError::ZeroAge(0).into());
    }
    Ok(h as f64 * f.evaluate(h + 1)? - prefix_sum(f, h)?)
}

/// `sum_{k>=0} f(start + k) q^k`, summed until a certified tail bound drops
/// below `tol * max(1, partial sum)`.
pub fn discounted_tail(f: &CostFunction, start: u64, q: f64, tol: f64) -> Result<f64, DecoupledError> {
    if start == 0 {
        return Err(CostError::ZeroAge(0).into());
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(DecoupledError::Domain(format!("tolerance must be positive, got {tol}")));
    }
    if !(0.0..1.0).contains(&q) {
        return Err(DecoupledError::Domain(format!("discount must lie in [0, 1), got {q}")));
    }
    if q == 0.0 {
        return Ok(f.evaluate(start)?);
    }
    let mut acc = CompensatedSum::new();
    match *f {
        CostFunction::Exponential { base, .. } => {
            // Terms form an exact geometric sequence.
            let r = base * q;
            if r >= 1.0 {
                return Err(DecoupledError::Inadmissible {
                    p: 1.0 - q,
                    reason: format!("term ratio {r} >= 1"),
                });
            }
            let mut term = f.evaluate(start)?;
            for _ in 0..MAX_SERIES_TERMS {
                acc.add(term);
                if term * r / (1.0 - r) <= tol * acc.value().abs().max(1.0) {
                    return Ok(acc.value());
                }
                term *= r;
            }
        }
        _ if f.is_bounded() => {
            let sup = f.supremum();
            let mut qk = 1.0;
            for k in 0..MAX_SERIES_TERMS as u64 {
                acc.add(f.evaluate(start + k)? * qk);
                qk *= q;
                if sup * qk / (1.0 - q) <= tol * acc.value().abs().max(1.0) {
                    return Ok(acc.value());
                }
            }
        }
        _ => {
            let mut qk = 1.0;
            for k in 0..MAX_SERIES_TERMS as u64 {
                let term = f.evaluate(start + k)? * qk;
                acc.add(term);
                let r = q * f.growth_ratio_bound(start + k);
                if r < 1.0 && term * r / (1.0 - r) <= tol * acc.value().abs().max(1.0) {
                    return Ok(acc.value());
                }
                qk *= q;
            }
        }
    }
    Err(DecoupledError::Series(MAX_SERIES_TERMS))
}

/// Unreliable-channel index
/// `p^2 h sum_{k>=1} f(k+h)(1-p)^{k-1} - p sum_{j<=h} f(j)`.
///
/// At `p = 1` this is exactly [`whittle_reliable`].
pub fn whittle_unreliable(f: &CostFunction, p: f64, h: u64, tol: f64) -> Result<f64, DecoupledError> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(DecoupledError::Domain(format!("tolerance must be positive, got {tol}")));
    }
    admissible(f, p)?;
    if h == 0 {
        return Err(CostError::ZeroAge(0).into());
    }
    if p == 1.0 {
        return whittle_reliable(f, h);
    }
    let tail = discounted_tail(f, h + 1, 1.0 - p, tol)?;
    Ok(p * p * h as f64 * tail - p * prefix_sum(f, h)?)
}

/// Index at age `h` for success probability `p`, with the default series tolerance.
pub fn whittle_index(f: &CostFunction, p: f64, h: u64) -> Result<f64, DecoupledError> {
    whittle_unreliable(f, p, h, SERIES_TOL)
}

/// Long-run average cost of the threshold-`h` policy, charges included.
///
/// Reliable: `(sum_{j<=h} f(j) + C) / h`. Unreliable:
/// `(p (sum_{j<=h} f(j) + sum_{k>=1} f(k+h)(1-p)^k) + C) / (1 + p(h-1))`.
pub fn threshold_average_cost(
    f: &CostFunction,
    p: f64,
    charge: f64,
    threshold: ThresholdPolicy,
) -> Result<f64, DecoupledError> {
    admissible(f, p)?;
    let h = match threshold {
        ThresholdPolicy::At(h) => h,
        ThresholdPolicy::Never => {
            let sup = f.supremum();
            return Ok(sup);
        }
    };
    let head = prefix_sum(f, h)?;
    if p == 1.0 {
        return Ok((head + charge) / h as f64);
    }
    let q = 1.0 - p;
    let tail = q * discounted_tail(f, h + 1, q, SERIES_TOL)?;
    Ok((p * (head + tail) + charge) / (1.0 + p * (h as f64 - 1.0)))
}

fn close_le(a: f64, b: f64, slack: f64) -> bool {
    a <= b + slack * a.abs().max(b.abs()).max(1.0)
}

/// Two-sided optimality condition for threshold `h`.
///
/// Reliable: `f(h) <= (sum_{j<=h} f(j) + C)/h <= f(h+1)`. Unreliable:
/// `p^2 (h-1) T(h) - p P(h-1) <= C <= p^2 h T(h+1) - p P(h)` with
/// `T(s) = sum_{k>=0} f(s+k)(1-p)^k` and `P` the prefix sum.
pub fn threshold_condition_holds(prob: &DecoupledProblem, h: u64, slack: f64) -> Result<bool, DecoupledError> {
    let f = &prob.cost;
    if h == 0 {
        return Err(CostError::ZeroAge(0).into());
    }
    let c = prob.charge;
    if prob.p == 1.0 {
        let avg = (prefix_sum(f, h)? + c) / h as f64;
        return Ok(close_le(f.evaluate(h)?, avg, slack) && close_le(avg, f.evaluate(h + 1)?, slack));
    }
    let p = prob.p;
    let q = 1.0 - p;
    let before = if h == 1 { 0.0 } else { prefix_sum(f, h - 1)? };
    let lower = p * p * (h - 1) as f64 * discounted_tail(f, h, q, SERIES_TOL)? - p * before;
    let upper = p * p * h as f64 * discounted_tail(f, h + 1, q, SERIES_TOL)? - p * prefix_sum(f, h)?;
    Ok(close_le(lower, c, slack) && close_le(c, upper, slack))
}

/// Slack used by the internal sandwich check of [`optimal_threshold`].
pub fn condition_slack(p: f64) -> f64 {
    if p == 1.0 {
        1e-12
    } else {
        1e-10
    }
}

/// Optimal threshold for the decoupled problem: the smallest `h` with
/// `W(h) > C`, or [`ThresholdPolicy::Never`] when the index stays at or
/// below `C`.
pub fn optimal_threshold(prob: &DecoupledProblem) -> Result<ThresholdPolicy, DecoupledError> {
    prob.validate()?;
    if prob.charge == 0.0 {
        return Ok(ThresholdPolicy::At(1));
    }
    let f = &prob.cost;
    let c = prob.charge;
    let w = |h: u64| whittle_index(f, prob.p, h);

    let found = if let Some(flat) = f.flat_from() {
        // The index is constant from `flat` on.
        let mut hit = None;
        for h in 1..=flat {
            if w(h)? > c {
                hit = Some(h);
                break;
            }
        }
        hit
    } else {
        let mut hi = 1u64;
        while w(hi)? <= c {
            if hi >= MAX_TRUNCATION << 20 {
                return Err(DecoupledError::Consistency(format!("index never exceeds charge {c}")));
            }
            hi *= 2;
        }
        // w(hi) > c and, when hi > 1, w(hi / 2) <= c.
        let mut lo = hi / 2;
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if w(mid)? > c {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(hi)
    };

    match found {
        None => Ok(ThresholdPolicy::Never),
        Some(h) => {
            if !threshold_condition_holds(prob, h, condition_slack(prob.p))? {
                return Err(DecoupledError::Consistency(format!(
                    "threshold {h} violates the optimality sandwich at charge {c}"
                )));
            }
            Ok(ThresholdPolicy::At(h))
        }
    }
}

/// Thresholds for an increasing sequence of charges.
pub fn indexability_sweep(f: &CostFunction, p: f64, charges: &[f64]) -> Result<Vec<ThresholdPolicy>, DecoupledError> {
    if charges.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(DecoupledError::Domain("charges must be finite and non-negative".into()));
    }
    if charges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DecoupledError::Domain("charges must be strictly increasing".into()));
    }
    charges
        .iter()
        .map(|&charge| optimal_threshold(&DecoupledProblem::new(f.clone(), p, charge)?))
        .collect()
}

/// Truncation for value iteration: 64 times the index-inversion threshold,
/// at least [`MIN_TRUNCATION`], and never past the age where `f` becomes
/// numerically unmanageable.
pub fn default_truncation(prob: &DecoupledProblem) -> Result<u64, DecoupledError> {
    let estimate = optimal_threshold(prob)?.threshold().unwrap_or(1);
    let mut a_max = estimate.saturating_mul(64).max(MIN_TRUNCATION);
    if let Some(cap) = prob.cost.age_limit(TRUNCATION_COST_CEILING) {
        a_max = a_max.min(cap.max(estimate + 2));
    }
    Ok(a_max.min(MAX_TRUNCATION))
}

/// Relative value iteration on the chain truncated at `a_max` (age `a_max`
/// stays at `a_max` unless reset).
///
/// The truncation is enlarged by doubling while the greedy threshold sits
/// within 10% of it, or while an unbounded cost is never activated.
pub fn decoupled_value_iteration(
    prob: &DecoupledProblem,
    a_max: u64,
    tol: f64,
    max_iters: usize,
) -> Result<DecoupledSolution, DecoupledError> {
    prob.validate()?;
    if a_max < 2 {
        return Err(DecoupledError::Domain(format!("a_max must be at least 2, got {a_max}")));
    }
    if tol.is_nan() || tol <= 0.0 || max_iters == 0 {
        return Err(DecoupledError::Domain("tol and max_iters must be positive".into()));
    }
    let cap = prob
        .cost
        .age_limit(TRUNCATION_COST_CEILING)
        .unwrap_or(MAX_TRUNCATION)
        .min(MAX_TRUNCATION)
        .max(a_max);
    let mut a_max = a_max;
    loop {
        let sol = relative_value_iteration(prob, a_max, tol, max_iters)?;
        let near_cap = match sol.policy {
            ThresholdPolicy::At(h) => h * 10 >= a_max * 9,
            ThresholdPolicy::Never => !prob.cost.is_bounded(),
        };
        if !near_cap {
            return Ok(sol);
        }
        if a_max >= cap {
            return Err(DecoupledError::Truncation { a_max });
        }
        a_max = (a_max * 2).min(cap);
    }
}

fn relative_value_iteration(
    prob: &DecoupledProblem,
    a_max: u64,
    tol: f64,
    max_iters: usize,
) -> Result<DecoupledSolution, DecoupledError> {
    let n = a_max as usize;
    let costs: Vec<f64> = (1..=a_max).map(|h| prob.cost.evaluate(h)).collect::<Result<_, _>>()?;
    let (p, q, c) = (prob.p, 1.0 - prob.p, prob.charge);
    let tau = APERIODICITY;

    let mut v = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut span = f64::INFINITY;
    for iter in 1..=max_iters {
        let v1 = v[0];
        for h in 0..n {
            let succ = (h + 1).min(n - 1);
            let rest = v[succ];
            let act = c + p * v1 + q * v[succ];
            next[h] = (1.0 - tau) * v[h] + tau * (costs[h] + act.min(rest));
        }
        let gain = next[0];
        let d0 = next[0] - v[0];
        span = 0.0f64;
        for h in 0..n {
            let dev = ((next[h] - v[h]) - d0).abs() / next[h].abs().max(1.0);
            span = span.max(dev);
        }
        for h in 0..n {
            v[h] = next[h] - gain;
        }
        if span <= tol {
            let policy = greedy_threshold(&v, p, q, c)?;
            return Ok(DecoupledSolution {
                policy,
                average_cost: gain / tau,
                differential_costs: v,
                a_max,
                iterations: iter,
                span,
            });
        }
    }
    Err(DecoupledError::Convergence { iterations: max_iters, span })
}

fn greedy_threshold(v: &[f64], p: f64, q: f64, c: f64) -> Result<ThresholdPolicy, DecoupledError> {
    let n = v.len();
    let activate = |h: usize| {
        let succ = (h + 1).min(n - 1);
        c + p * v[0] + q * v[succ] < v[succ]
    };
    let first = (0..n).find(|&h| activate(h));
    match first {
        None => Ok(ThresholdPolicy::Never),
        Some(h) => {
            if let Some(bad) = (h..n).find(|&k| !activate(k)) {
                return Err(DecoupledError::Consistency(format!(
                    "greedy policy activates at age {} but rests at age {}",
                    h + 1,
                    bad + 1
                )));
            }
            Ok(ThresholdPolicy::At(h as u64 + 1))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lin(w: f64) -> CostFunction {
        CostFunction::linear(w).unwrap()
    }

    fn sq() -> CostFunction {
        CostFunction::power(1.0, 2.0).unwrap()
    }

    fn vi(prob: &DecoupledProblem) -> DecoupledSolution {
        let a_max = default_truncation(prob).unwrap();
        decoupled_value_iteration(prob, a_max, VI_TOL, VI_MAX_ITERS).unwrap()
    }

    #[test]
    fn reliable_index_examples() {
        assert_eq!(whittle_reliable(&lin(1.0), 3).unwrap(), 6.0);
        let flat = CostFunction::table(vec![4.0]).unwrap();
        for h in 1..20 {
            assert_eq!(whittle_reliable(&flat, h).unwrap(), 0.0);
        }
        assert_eq!(whittle_reliable(&sq(), 2).unwrap(), 13.0);
    }

    #[test]
    fn reliable_index_matches_indifference_oracle() {
        // W(2) = 13 for x^2: just below the charge the arm activates at age 2,
        // just above it waits until age 3.
        let below = DecoupledProblem::new(sq(), 1.0, 13.0 - 1e-3).unwrap();
        let above = DecoupledProblem::new(sq(), 1.0, 13.0 + 1e-3).unwrap();
        assert_eq!(vi(&below).policy, ThresholdPolicy::At(2));
        assert_eq!(vi(&above).policy, ThresholdPolicy::At(3));
    }

    #[test]
    fn unreliable_index_examples() {
        let w = whittle_unreliable(&lin(1.0), 0.5, 2, 1e-14).unwrap();
        assert!((w - 2.5).abs() < 1e-12, "{w}");
        for h in [1, 2, 7, 40] {
            for f in [lin(3.0), sq(), CostFunction::exponential(2.0, 1.0).unwrap()] {
                assert_eq!(whittle_unreliable(&f, 1.0, h, 1e-9).unwrap(), whittle_reliable(&f, h).unwrap());
            }
        }
    }

    #[test]
    fn unreliable_index_matches_direct_series() {
        // sum_{k=1}^{K} f(k+3) 0.2^{k-1}; the tail past K = 60 is far below 1e-14.
        let mut series = 0.0;
        for k in (1..=60).rev() {
            series += ((k + 3) * (k + 3)) as f64 * 0.2f64.powi(k - 1);
        }
        let oracle = 0.64 * 3.0 * series - 0.8 * (1.0 + 4.0 + 9.0);
        let w = whittle_unreliable(&sq(), 0.8, 3, 1e-15).unwrap();
        assert!((w - oracle).abs() <= 1e-10 * oracle.abs(), "{w} vs {oracle}");
    }

    #[test]
    fn unreliable_index_errors() {
        let e3 = CostFunction::exponential(3.0, 1.0).unwrap();
        assert!(matches!(whittle_unreliable(&e3, 0.5, 2, 1e-9), Err(DecoupledError::Inadmissible { .. })));
        assert!(matches!(whittle_unreliable(&lin(1.0), 0.5, 2, 0.0), Err(DecoupledError::Domain(_))));
        assert!(matches!(whittle_unreliable(&lin(1.0), 0.0, 2, 1e-9), Err(DecoupledError::Domain(_))));
    }

    #[test]
    fn threshold_examples() {
        let p = DecoupledProblem::new(lin(1.0), 1.0, 5.0).unwrap();
        assert_eq!(optimal_threshold(&p).unwrap(), ThresholdPolicy::At(3));
        // f(3)=3 <= 11/3 <= f(4)=4
        assert!(threshold_condition_holds(&p, 3, 0.0).unwrap());
        assert!(!threshold_condition_holds(&p, 2, 0.0).unwrap());

        for (f, prob) in [(sq(), 0.4), (lin(2.0), 1.0), (CostFunction::table(vec![1.0, 3.0]).unwrap(), 0.5)] {
            let zero = DecoupledProblem::new(f, prob, 0.0).unwrap();
            assert_eq!(optimal_threshold(&zero).unwrap(), ThresholdPolicy::At(1));
        }

        let flat = DecoupledProblem::new(CostFunction::table(vec![1.0]).unwrap(), 1.0, 1.0).unwrap();
        assert_eq!(optimal_threshold(&flat).unwrap(), ThresholdPolicy::Never);
    }

    #[test]
    fn threshold_ties_pick_the_index_interval() {
        // C = W(h) exactly: the half-open interval puts the threshold at h + 1.
        for h in 1..30 {
            let c = whittle_reliable(&lin(1.0), h).unwrap();
            let prob = DecoupledProblem::new(lin(1.0), 1.0, c).unwrap();
            assert_eq!(optimal_threshold(&prob).unwrap(), ThresholdPolicy::At(h + 1));
        }
    }

    #[test]
    fn bounded_costs_reach_never() {
        let ind = CostFunction::indicator(4, 2.0).unwrap();
        // W is constant = (4 - 1) * 2 = 6 from h = 3 on.
        assert_eq!(whittle_reliable(&ind, 3).unwrap(), 6.0);
        assert_eq!(whittle_reliable(&ind, 50).unwrap(), 6.0);
        let below = DecoupledProblem::new(ind.clone(), 1.0, 5.9).unwrap();
        let above = DecoupledProblem::new(ind.clone(), 1.0, 6.0).unwrap();
        assert_eq!(optimal_threshold(&below).unwrap(), ThresholdPolicy::At(3));
        assert_eq!(optimal_threshold(&above).unwrap(), ThresholdPolicy::Never);
        assert_eq!(vi(&above).policy, ThresholdPolicy::Never);
        let unrel = DecoupledProblem::new(ind, 0.5, 10.0).unwrap();
        assert_eq!(optimal_threshold(&unrel).unwrap(), ThresholdPolicy::Never);
    }

    #[test]
    fn value_iteration_reliable_linear() {
        let prob = DecoupledProblem::new(lin(1.0), 1.0, 5.0).unwrap();
        let sol = decoupled_value_iteration(&prob, 100, VI_TOL, VI_MAX_ITERS).unwrap();
        assert_eq!(sol.policy, ThresholdPolicy::At(3));
        assert!((sol.average_cost - 11.0 / 3.0).abs() < 1e-7, "{}", sol.average_cost);
        assert_eq!(sol.differential_costs[0], 0.0);
        assert!(sol.differential_costs.windows(2).all(|w| w[1] >= w[0] - 1e-9));

        let free = DecoupledProblem::new(lin(1.0), 1.0, 0.0).unwrap();
        let sol = decoupled_value_iteration(&free, 100, VI_TOL, VI_MAX_ITERS).unwrap();
        assert_eq!(sol.policy, ThresholdPolicy::At(1));
        assert!((sol.average_cost - 1.0).abs() < 1e-8);
    }

    #[test]
    fn value_iteration_matches_renewal_cost_unreliable() {
        let prob = DecoupledProblem::new(lin(1.0), 0.5, 2.0).unwrap();
        let sol = decoupled_value_iteration(&prob, 200, VI_TOL, VI_MAX_ITERS).unwrap();
        let closed = threshold_average_cost(&prob.cost, 0.5, 2.0, sol.policy).unwrap();
        // Renewal-reward oracle: idle h-1 slots, then geometric attempts.
        let h = sol.policy.threshold().unwrap();
        let mut attempts = 0.0;
        for k in 0..400u64 {
            attempts += 0.5f64.powi(k as i32) * ((h + k) as f64 + 2.0);
        }
        let renewal = ((1..h).map(|j| j as f64).sum::<f64>() + attempts) / ((h - 1) as f64 + 2.0);
        assert!((sol.average_cost - closed).abs() < 1e-6, "{} vs {closed}", sol.average_cost);
        assert!((closed - renewal).abs() < 1e-9, "{closed} vs {renewal}");
        assert_eq!(sol.policy, optimal_threshold(&prob).unwrap());
    }

    #[test]
    fn value_iteration_rejects_bad_inputs() {
        let prob = DecoupledProblem::new(lin(1.0), 0.5, 2.0).unwrap();
        assert!(decoupled_value_iteration(&prob, 1, VI_TOL, 10).is_err());
        assert!(matches!(
            decoupled_value_iteration(&prob, 64, 1e-12, 3),
            Err(DecoupledError::Convergence { iterations: 3, .. })
        ));
        assert!(DecoupledProblem::new(lin(1.0), 0.5, -1.0).is_err());
        let e3 = CostFunction::exponential(3.0, 1.0).unwrap();
        assert!(matches!(DecoupledProblem::new(e3, 0.5, 1.0), Err(DecoupledError::Inadmissible { .. })));
    }

    #[test]
    fn value_iteration_grows_truncation() {
        // Threshold 3 for C = 5; starting at a_max = 3 forces doubling.
        let prob = DecoupledProblem::new(lin(1.0), 1.0, 5.0).unwrap();
        let sol = decoupled_value_iteration(&prob, 3, VI_TOL, VI_MAX_ITERS).unwrap();
        assert_eq!(sol.policy, ThresholdPolicy::At(3));
        assert!(sol.a_max >= 4);
    }

    #[test]
    fn sweep_examples() {
        let t = indexability_sweep(&lin(1.0), 1.0, &[0.0, 1.0, 5.0, 20.0]).unwrap();
        assert_eq!(t[0], ThresholdPolicy::At(1));
        assert!(t.windows(2).all(|w| w[0] <= w[1]));

        let flat = CostFunction::table(vec![2.0]).unwrap();
        let t = indexability_sweep(&flat, 1.0, &[0.5, 1.0, 2.0]).unwrap();
        assert_eq!(t, vec![ThresholdPolicy::Never; 3]);

        assert!(indexability_sweep(&flat, 1.0, &[1.0, 1.0]).is_err());
        assert!(indexability_sweep(&flat, 1.0, &[-1.0]).is_err());
    }

    #[test]
    fn sweep_log_spaced_power_cost() {
        let charges: Vec<f64> = (0..50).map(|i| 10f64.powf(-2.0 + 6.0 * i as f64 / 49.0)).collect();
        let t = indexability_sweep(&sq(), 0.7, &charges).unwrap();
        assert!(t.windows(2).all(|w| w[0] <= w[1]));
        for i in [3usize, 11, 24, 37, 49] {
            let prob = DecoupledProblem::new(sq(), 0.7, charges[i]).unwrap();
            assert_eq!(vi(&prob).policy, t[i], "charge {}", charges[i]);
        }
    }

    #[test]
    fn never_orders_above_finite_thresholds() {
        assert!(ThresholdPolicy::At(u64::MAX) < ThresholdPolicy::Never);
        assert!(ThresholdPolicy::At(3).activates(3));
        assert!(!ThresholdPolicy::At(3).activates(2));
        assert!(!ThresholdPolicy::Never.activates(1_000));
    }
}
