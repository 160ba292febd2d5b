// SPDX-License-Identifier: Apache-2.0

//! Scheduling N sources over one shared slot to minimize the time-average of
//! non-decreasing cost functions of age of information.
//!
//! - [`cost`]: age-cost functions and the bounded-cost admissibility test.
//! - [`decoupled`]: the single-arm problem, Whittle indices and thresholds.
//! - [`policy`]: multi-source scheduling rules (Whittle, baselines, tables).
//! - [`dp`]: exact finite-horizon optimum over a truncated age box.
//! - [`sim`]: slotted simulation, Monte Carlo estimates and cycle detection.
//! - [`structure`]: strong-switch checks and two-source cycle optimization.

pub mod cost;
pub mod decoupled;
pub mod dp;
pub mod policy;
pub mod sim;
pub mod structure;
pub mod system;

pub use cost::{CostError, CostFunction};
pub use decoupled::{DecoupledProblem, DecoupledSolution, ThresholdPolicy};
pub use dp::{DpOptions, DpSolution, TruncatedBox};
pub use policy::{Policy, PolicyError, WhittleTable};
pub use sim::{Cycle, SimulationResult};
pub use system::{AgeVector, Source, SystemSpec};
