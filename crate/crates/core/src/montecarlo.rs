//! Closed-loop realizations around a plan and chance-constraint audits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::QuantileSchedule;
use crate::contraction::{energy, Metric, TrackingPolicy};
use crate::error::{Error, Result};
use crate::models::{Model, StateVec};
use crate::noise::NoiseDistribution;
use crate::rng::{self, Domain};
use crate::tightening::ConstraintSpec;

/// One closed-loop realization. After divergence the trajectory is truncated.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub states: Vec<StateVec>,
    /// `V_0..V_N` when a metric was supplied.
    pub energies: Vec<f64>,
    pub diverged_at: Option<usize>,
}

/// Run `index` of a batch keyed by `seed`: `x_{k+1} = f(x_k, π(x_k)) + D(x_k) w_k`.
pub fn rollout(
    model: &dyn Model,
    policy: &TrackingPolicy,
    dist: &NoiseDistribution,
    metric: Option<&Metric>,
    seed: u64,
    index: u64,
) -> Rollout {
    let target = policy.target();
    let n = policy.horizon();
    let mut rng = rng::stream(seed, Domain::ClosedLoop, index);
    let mut x = target.states[0].clone();
    let mut states = Vec::with_capacity(n + 1);
    let mut energies = Vec::with_capacity(n + 1);
    let mut diverged_at = None;
    states.push(x.clone());
    if let Some(m) = metric {
        energies.push(energy(m, &x, &target.states[0]));
    }
    for k in 0..n {
        let w = dist.sample(&mut rng);
        x = model.f(&x, &policy.control(k, &x)) + model.noise_matrix(&x) * w;
        if !x.iter().all(|v| v.is_finite()) {
            diverged_at = Some(k + 1);
            break;
        }
        if let Some(m) = metric {
            energies.push(energy(m, &x, &target.states[k + 1]));
        }
        states.push(x.clone());
    }
    Rollout {
        states,
        energies,
        diverged_at,
    }
}

/// Aggregate audit of `M` realizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub method: String,
    pub runs: usize,
    pub horizon: usize,
    pub seed: u64,
    /// `state_violations[k]` counts runs with `x_k ∉ 𝒳`, audited for `k = 1..N-1`.
    pub state_violations: Vec<usize>,
    pub terminal_violations: usize,
    /// `coverage_hits[k-1]` counts runs with `V_k ≤ C_k`; empty without a schedule.
    pub coverage_hits: Vec<usize>,
    pub diverged: usize,
    pub max_failure: f64,
    pub worst_step: usize,
    pub terminal_failure: f64,
    pub min_coverage: Option<f64>,
    #[serde(skip)]
    pub rollouts: Vec<Rollout>,
}

impl McReport {
    pub fn failure_at(&self, k: usize) -> f64 {
        self.state_violations[k] as f64 / self.runs as f64
    }

    pub fn coverage_at(&self, k: usize) -> f64 {
        self.coverage_hits[k - 1] as f64 / self.runs as f64
    }
}

#[derive(Clone)]
pub struct Evaluation<'a> {
    pub model: &'a dyn Model,
    pub policy: &'a TrackingPolicy,
    pub dist: &'a NoiseDistribution,
    pub constraints: &'a ConstraintSpec,
    pub metric: Option<&'a Metric>,
    pub schedule: Option<&'a QuantileSchedule>,
    pub runs: usize,
    pub seed: u64,
    pub method: &'a str,
    pub keep_rollouts: bool,
}

/// Runs `M` rollouts in parallel (seeded by run index) and counts violations.
/// A diverged run counts as violating every remaining step.
pub fn evaluate(ev: &Evaluation<'_>) -> Result<McReport> {
    if ev.runs == 0 {
        return Err(Error::Config("need at least one Monte Carlo run".into()));
    }
    let n = ev.policy.horizon();
    if let Some(s) = ev.schedule {
        if s.c.len() != n {
            return Err(Error::Dimension {
                what: "quantile schedule",
                expected: n,
                got: s.c.len(),
            });
        }
        if ev.metric.is_none() {
            return Err(Error::Config("coverage audit needs the metric".into()));
        }
    }
    let rollouts: Vec<Rollout> = (0..ev.runs as u64)
        .into_par_iter()
        .map(|i| rollout(ev.model, ev.policy, ev.dist, ev.metric, ev.seed, i))
        .collect();

    let mut state_violations = vec![0usize; n + 1];
    let mut terminal_violations = 0;
    let mut coverage_hits = vec![0usize; if ev.schedule.is_some() { n } else { 0 }];
    let mut diverged = 0;
    for r in &rollouts {
        let alive = r.diverged_at.unwrap_or(n + 1);
        if r.diverged_at.is_some() {
            diverged += 1;
        }
        for k in 1..n {
            if k >= alive || !ev.constraints.state_ok(&r.states[k]) {
                state_violations[k] += 1;
            }
        }
        if n >= alive || !ev.constraints.goal_ok(&r.states[n]) {
            terminal_violations += 1;
        }
        if let Some(s) = ev.schedule {
            for k in 1..=n {
                if k < alive && r.energies[k] <= s.at(k) {
                    coverage_hits[k - 1] += 1;
                }
            }
        }
    }
    let m = ev.runs as f64;
    let (worst_step, worst) = state_violations
        .iter()
        .enumerate()
        .fold((0, 0), |acc, (k, &c)| if c > acc.1 { (k, c) } else { acc });
    let min_coverage = (!coverage_hits.is_empty())
        .then(|| coverage_hits.iter().copied().min().unwrap_or(0) as f64 / m);
    Ok(McReport {
        method: ev.method.to_string(),
        runs: ev.runs,
        horizon: n,
        seed: ev.seed,
        state_violations,
        terminal_violations,
        coverage_hits,
        diverged,
        max_failure: worst as f64 / m,
        worst_step,
        terminal_failure: terminal_violations as f64 / m,
        min_coverage,
        rollouts: if ev.keep_rollouts { rollouts } else { Vec::new() },
    })
}
