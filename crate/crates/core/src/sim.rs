// SPDX-License-Identifier: Apache-2.0

//! Slotted simulation, exact cycle detection and the randomized-policy
//! divergence probe.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CompensatedSum, CostError};
use crate::policy::{Policy, PolicyError};
use crate::system::{AgeVector, SystemError, SystemSpec};

/// Ages past this stop a run.
pub const AGE_GUARD: u64 = 1_000_000;
pub const DEFAULT_RUNS: u64 = 500;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("slot {slot}, source {source_no}: {err}")]
    Range { slot: u64, source_no: usize, err: CostError },
    #[error("slot {slot}: age of source {source_no} passed {AGE_GUARD}")]
    AgeGuard { slot: u64, source_no: usize },
    #[error("no recurring state within {steps} steps")]
    NonCyclic { steps: u64 },
    #[error("{0}")]
    Domain(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub mean_cost: f64,
    /// Standard error of the per-run average over runs.
    pub stderr: f64,
    pub runs: u64,
    pub horizon: u64,
    pub seed: u64,
    pub per_source_costs: Vec<f64>,
}

/// A recurring segment of a deterministic trajectory: `actions[k]` is taken
/// in `states[k]` and leads to `states[k + 1]` (cyclically).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cycle {
    pub states: Vec<AgeVector>,
    #[serde(with = "crate::system::one_based::vec")]
    pub actions: Vec<usize>,
    pub average_cost: f64,
    /// Slots before the cycle is entered.
    pub transient: u64,
}

impl Cycle {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Per-run stream: the master seed picks the key, the run index the stream.
pub fn run_rng(seed: u64, run: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run);
    rng
}

struct Trajectory<'a> {
    spec: &'a SystemSpec,
    policy: &'a Policy,
    ages: Vec<u64>,
}

impl<'a> Trajectory<'a> {
    fn new(spec: &'a SystemSpec, policy: &'a Policy) -> Self {
        Self { spec, policy, ages: vec![1; spec.len()] }
    }

    /// Adds the stage cost of slot `t` to `acc`, then applies one decision.
    fn step<R: Rng>(&mut self, t: u64, rng: &mut R, acc: &mut [f64]) -> Result<(), SimError> {
        for (i, (src, &a)) in self.spec.sources.iter().zip(&self.ages).enumerate() {
            acc[i] += src.cost.evaluate(a).map_err(|err| SimError::Range { slot: t + 1, source_no: i + 1, err })?;
        }
        let s = self.policy.decide(&self.ages, t, rng)?;
        let p = self.spec.sources[s].p;
        let delivered = p == 1.0 || rng.gen::<f64>() < p;
        for (i, a) in self.ages.iter_mut().enumerate() {
            if delivered && i == s {
                *a = 1;
            } else {
                *a += 1;
                if *a > AGE_GUARD {
                    return Err(SimError::AgeGuard { slot: t + 1, source_no: i + 1 });
                }
            }
        }
        Ok(())
    }
}

fn one_run(spec: &SystemSpec, policy: &Policy, horizon: u64, seed: u64, run: u64) -> Result<Vec<f64>, SimError> {
    let mut rng = run_rng(seed, run);
    let mut traj = Trajectory::new(spec, policy);
    let mut acc = vec![0.0; spec.len()];
    for t in 0..horizon {
        traj.step(t, &mut rng, &mut acc)?;
    }
    Ok(acc.into_iter().map(|c| c / horizon as f64).collect())
}

/// Average cost over `horizon` slots from all-ones, over `runs` seeded runs.
pub fn simulate(spec: &SystemSpec, policy: &Policy, horizon: u64, runs: u64, seed: u64) -> Result<SimulationResult, SimError> {
    if horizon == 0 || runs == 0 {
        return Err(SimError::Domain("horizon and runs must be at least 1".into()));
    }
    let n = spec.len();
    // Every run of a deterministic policy on reliable channels is identical.
    let distinct = if spec.all_reliable() && policy.is_deterministic() { 1 } else { runs };
    let per_run: Vec<Vec<f64>> =
        (0..distinct).into_par_iter().map(|r| one_run(spec, policy, horizon, seed, r)).collect::<Result<_, _>>()?;

    let per_source_costs: Vec<f64> = (0..n)
        .map(|i| {
            let mut s = CompensatedSum::new();
            per_run.iter().for_each(|r| s.add(r[i]));
            s.value() / distinct as f64
        })
        .collect();
    let mean_cost: f64 = per_source_costs.iter().sum();
    let stderr = if distinct < 2 {
        0.0
    } else {
        let totals: Vec<f64> = per_run.iter().map(|r| r.iter().sum()).collect();
        let mut dev = CompensatedSum::new();
        totals.iter().for_each(|x| dev.add((x - mean_cost).powi(2)));
        (dev.value() / (distinct - 1) as f64).sqrt() / (distinct as f64).sqrt()
    };
    Ok(SimulationResult { mean_cost, stderr, runs, horizon, seed, per_source_costs })
}

/// Iterates from all-ones until a (state, phase) pair recurs.
pub fn detect_cycle(spec: &SystemSpec, policy: &Policy, max_steps: u64) -> Result<Cycle, SimError> {
    detect_cycle_from(spec, policy, &AgeVector::ones(spec.len()), max_steps)
}

pub fn detect_cycle_from(spec: &SystemSpec, policy: &Policy, start: &AgeVector, max_steps: u64) -> Result<Cycle, SimError> {
    if !spec.all_reliable() {
        return Err(SimError::Domain("cycle detection requires reliable channels".into()));
    }
    if !policy.is_deterministic() {
        return Err(SimError::Domain("cycle detection requires a deterministic policy".into()));
    }
    spec.check_ages(start)?;
    let period = policy.period();
    let mut seen: HashMap<(Vec<u64>, u64), u64> = HashMap::new();
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut ages = start.0.clone();
    for t in 0..=max_steps {
        let key = (ages.clone(), t % period);
        if let Some(&first) = seen.get(&key) {
            let states: Vec<AgeVector> = states.drain(first as usize..).collect();
            let actions: Vec<usize> = actions.drain(first as usize..).collect();
            let mut total = CompensatedSum::new();
            for s in &states {
                total.add(spec.stage_cost(s).map_err(|err| SimError::Range { slot: t, source_no: 0, err })?);
            }
            let average_cost = total.value() / states.len() as f64;
            return Ok(Cycle { states, actions, average_cost, transient: first });
        }
        seen.insert(key, t);
        let a = policy.decide_deterministic(&ages, t)?;
        states.push(AgeVector(ages.clone()));
        actions.push(a);
        for (i, x) in ages.iter_mut().enumerate() {
            *x = if i == a { 1 } else { *x + 1 };
        }
    }
    Err(SimError::NonCyclic { steps: max_steps })
}

/// Running averages of a stationary randomized policy at several horizons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub horizons: Vec<u64>,
    /// Exact expected running average; `inf` once a cost overflows.
    pub expected: Vec<f64>,
    /// Median over runs of the realized running average.
    pub median: Vec<f64>,
    pub runs: u64,
    pub seed: u64,
}

/// Expected average cost over the first `horizon` slots from all-ones under
/// independent draws: with `r = prob * p`, the age in slot `t` is `a < t`
/// with probability `r (1 - r)^(a-1)` and `t` with probability `(1 - r)^(t-1)`.
pub fn randomized_expected_average(spec: &SystemSpec, probs: &[f64], horizon: u64) -> f64 {
    let mut total = 0.0;
    for (src, &prob) in spec.sources.iter().zip(probs) {
        let r = prob * src.p;
        // E f(A(t)) = sum_{a<t} f(a) r (1-r)^(a-1) + f(t) (1-r)^(t-1).
        let mut partial = 0.0;
        for t in 1..=horizon {
            let head = (1.0 - r).powi((t - 1) as i32);
            let ft = src.cost.evaluate(t).unwrap_or(f64::INFINITY);
            total += partial + ft * head;
            partial += ft * r * head;
        }
    }
    total / horizon as f64
}

pub fn divergence_probe(
    spec: &SystemSpec,
    policy: &Policy,
    horizons: &[u64],
    runs: u64,
    seed: u64,
) -> Result<DivergenceReport, SimError> {
    let Policy::StationaryRandomized(probs) = policy else {
        return Err(SimError::Domain("the divergence probe takes a stationary randomized policy".into()));
    };
    if horizons.is_empty() || horizons.windows(2).any(|w| w[0] >= w[1]) || horizons[0] == 0 || runs == 0 {
        return Err(SimError::Domain("horizons must be positive and increasing; runs at least 1".into()));
    }
    let expected = horizons.iter().map(|&h| randomized_expected_average(spec, probs, h)).collect();
    let last = *horizons.last().unwrap();
    let paths: Vec<Vec<f64>> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = run_rng(seed, r);
            let mut traj = Trajectory::new(spec, policy);
            let mut acc = vec![0.0; spec.len()];
            let mut out = Vec::with_capacity(horizons.len());
            let mut next = 0;
            let mut overflowed = false;
            for t in 0..last {
                if !overflowed && traj.step(t, &mut rng, &mut acc).is_err() {
                    overflowed = true;
                }
                if t + 1 == horizons[next] {
                    out.push(if overflowed { f64::INFINITY } else { acc.iter().sum::<f64>() / (t + 1) as f64 });
                    next += 1;
                }
            }
            out
        })
        .collect();
    let median = (0..horizons.len())
        .map(|k| {
            let mut v: Vec<f64> = paths.iter().map(|p| p[k]).collect();
            v.sort_by(f64::total_cmp);
            let m = v.len();
            if m % 2 == 1 {
                v[m / 2]
            } else {
                (v[m / 2 - 1] + v[m / 2]) / 2.0
            }
        })
        .collect();
    Ok(DivergenceReport { horizons: horizons.to_vec(), expected, median, runs, seed })
}

/// Stage cost of each slot along one trajectory (seed 0, run 0).
pub fn slot_costs(spec: &SystemSpec, policy: &Policy, horizon: u64) -> Result<Vec<f64>, SimError> {
    let mut rng = run_rng(0, 0);
    let mut traj = Trajectory::new(spec, policy);
    let mut out = Vec::with_capacity(horizon as usize);
    let mut acc = vec![0.0; spec.len()];
    for t in 0..horizon {
        acc.iter_mut().for_each(|a| *a = 0.0);
        traj.step(t, &mut rng, &mut acc)?;
        out.push(acc.iter().sum());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostFunction;
    use crate::system::Source;

    fn two(f: CostFunction) -> SystemSpec {
        SystemSpec::new(vec![Source::reliable(f.clone()), Source::reliable(f)]).unwrap()
    }

    fn c2() -> SystemSpec {
        SystemSpec::new(vec![
            Source::new(CostFunction::power(0.5, 3.0).unwrap(), 0.55),
            Source::new(CostFunction::logarithmic(10.0, std::f64::consts::E).unwrap(), 0.75),
        ])
        .unwrap()
    }

    #[test]
    fn round_robin_on_exponential_sources() {
        let spec = two(CostFunction::exponential(3.0, 1.0).unwrap());
        let rr = Policy::round_robin(&spec, None).unwrap();
        let r = simulate(&spec, &rr, 500, 1, 1).unwrap();
        // Slot 1 at (1,1) costs 6; every later slot costs 3 + 9.
        assert_eq!(r.mean_cost, (6.0 + 499.0 * 12.0) / 500.0);
        let cycle = detect_cycle(&spec, &rr, 100).unwrap();
        assert_eq!(cycle.average_cost, 12.0);
        let slots = slot_costs(&spec, &rr, 10).unwrap();
        assert_eq!(slots[0], 6.0);
        assert!(slots[1..].iter().all(|&c| c == 12.0));
    }

    #[test]
    fn reproducible_and_seed_sensitive() {
        let spec = c2();
        let w = Policy::whittle(&spec).unwrap();
        let a = simulate(&spec, &w, 200, 64, 9).unwrap();
        let b = simulate(&spec, &w, 200, 64, 9).unwrap();
        assert_eq!(a, b);
        let c = simulate(&spec, &w, 200, 64, 10).unwrap();
        assert_ne!(a.mean_cost, c.mean_cost);
        assert_eq!(a.mean_cost, a.per_source_costs.iter().sum::<f64>());
        assert!(a.stderr > 0.0);
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let d = single.install(|| simulate(&spec, &w, 200, 64, 9).unwrap());
        assert_eq!(a, d);
    }

    #[test]
    fn reliable_deterministic_runs_have_zero_stderr() {
        let spec = two(CostFunction::linear(2.0).unwrap());
        let r = simulate(&spec, &Policy::whittle(&spec).unwrap(), 100, 50, 3).unwrap();
        assert_eq!(r.stderr, 0.0);
        assert_eq!(r.runs, 50);
    }

    #[test]
    fn quadrupling_runs_halves_stderr() {
        let spec = c2();
        let w = Policy::whittle(&spec).unwrap();
        let mut ratios = Vec::new();
        for rep in 0..10 {
            let a = simulate(&spec, &w, 500, 100, 1000 + rep).unwrap();
            let b = simulate(&spec, &w, 500, 400, 2000 + rep).unwrap();
            ratios.push(a.stderr / b.stderr);
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((mean - 2.0).abs() <= 0.4, "{ratios:?}");
    }

    #[test]
    fn cycle_matches_long_horizon_average() {
        let spec = SystemSpec::new(vec![
            Source::reliable(CostFunction::power(1.0, 2.0).unwrap()),
            Source::reliable(CostFunction::exponential(3.0, 1.0).unwrap()),
            Source::reliable(CostFunction::linear(4.0).unwrap()),
        ])
        .unwrap();
        for policy in [Policy::whittle(&spec).unwrap(), Policy::MaxAge, Policy::round_robin(&spec, None).unwrap()] {
            let cycle = detect_cycle(&spec, &policy, 10_000).unwrap();
            let r = simulate(&spec, &policy, 500, 1, 0).unwrap();
            assert!((r.mean_cost - cycle.average_cost).abs() < 0.01 * cycle.average_cost, "{policy}");
            for (k, (s, &a)) in cycle.states.iter().zip(&cycle.actions).enumerate() {
                let mut next = s.clone();
                next.advance(Some(a));
                let want = &cycle.states[(k + 1) % cycle.len()];
                if policy.period() == 1 {
                    assert_eq!(&next, want);
                }
            }
        }
    }

    #[test]
    fn identical_linear_sources_alternate() {
        let spec = two(CostFunction::linear(1.0).unwrap());
        let cycle = detect_cycle(&spec, &Policy::whittle(&spec).unwrap(), 100).unwrap();
        assert_eq!(cycle.states, vec![AgeVector::from(vec![1, 2]), AgeVector::from(vec![2, 1])]);
        assert_eq!(cycle.actions, vec![1, 0]);
        assert_eq!(cycle.average_cost, 3.0);
        assert_eq!(cycle.transient, 1);
    }

    #[test]
    fn cycle_detection_preconditions() {
        let spec = two(CostFunction::linear(1.0).unwrap());
        let rnd = Policy::randomized(&spec, vec![0.5, 0.5]).unwrap();
        assert!(detect_cycle(&spec, &rnd, 10).is_err());
        assert!(detect_cycle(&c2(), &Policy::MaxAge, 10).is_err());
        let starve = Policy::fixed_cycle(&spec, vec![0]).unwrap();
        assert_eq!(detect_cycle(&spec, &starve, 50), Err(SimError::NonCyclic { steps: 50 }));
    }

    #[test]
    fn overflow_names_slot_and_source() {
        let spec = SystemSpec::new_unchecked_bounds(vec![
            Source::reliable(CostFunction::linear(1.0).unwrap()),
            Source::reliable(CostFunction::exponential(10.0, 1.0).unwrap()),
        ])
        .unwrap();
        let starve = Policy::fixed_cycle(&spec, vec![0]).unwrap();
        match simulate(&spec, &starve, 1000, 1, 0) {
            Err(SimError::Range { slot, source_no: 2, .. }) => assert!(slot > 250 && slot < 320, "{slot}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn expected_average_matches_monte_carlo() {
        let spec = two(CostFunction::power(1.0, 2.0).unwrap());
        let probs = vec![0.3, 0.7];
        let exact = randomized_expected_average(&spec, &probs, 40);
        let rnd = Policy::randomized(&spec, probs).unwrap();
        let r = simulate(&spec, &rnd, 40, 20_000, 5).unwrap();
        assert!((r.mean_cost - exact).abs() < 4.0 * r.stderr, "{} vs {exact} ({})", r.mean_cost, r.stderr);
    }

    #[test]
    fn divergence_probe_shapes() {
        let e = two(CostFunction::exponential(3.0, 1.0).unwrap());
        let rnd = Policy::randomized(&e, vec![0.5, 0.5]).unwrap();
        let rep = divergence_probe(&e, &rnd, &[10, 20, 40], 100, 1).unwrap();
        assert!(rep.expected.windows(2).all(|w| w[1] > w[0]), "{:?}", rep.expected);
        assert!(rep.median.windows(2).all(|w| w[1] > w[0]), "{:?}", rep.median);

        let l = two(CostFunction::linear(1.0).unwrap());
        let rnd = Policy::randomized(&l, vec![0.5, 0.5]).unwrap();
        let rep = divergence_probe(&l, &rnd, &[100, 1000, 4000], 50, 1).unwrap();
        // Geometric ages with mean 2 per source: the limit is 4.
        assert!(rep.expected.iter().all(|&x| x < 4.0), "{:?}", rep.expected);
        assert!((rep.expected[2] - 4.0).abs() < 1e-2);
        assert!(divergence_probe(&l, &Policy::MaxAge, &[10], 1, 1).is_err());
        assert!(divergence_probe(&l, &rnd, &[10, 10], 1, 1).is_err());
    }
}
