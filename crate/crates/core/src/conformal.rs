//! Calibration rollouts, nonconformity scores and conformal quantiles.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contraction::{delta_v, energy, Metric, PolicyDesigner};
use crate::error::{check_dim, Error, Result};
use crate::models::{Model, NoiseVec, StateVec, Trajectory};
use crate::noise::DisturbanceDataset;
use crate::rng::{self, Domain, RandomStream};

/// Sinusoidal target-control sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSamplerConfig {
    /// Basis frequencies in rad/s.
    pub frequencies: Vec<f64>,
    /// Standard deviation of the basis weights, one entry per control channel.
    pub weight_std: Vec<f64>,
    pub horizon: usize,
    pub x0: Vec<f64>,
}

impl TargetSamplerConfig {
    pub fn validate(&self, model: &dyn Model) -> Result<()> {
        if self.frequencies.is_empty() {
            return Err(Error::Config("sampler needs at least one frequency".into()));
        }
        if self.weight_std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("sampler weight_std must be nonnegative".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("sampler horizon must be positive".into()));
        }
        check_dim("sampler weight_std", model.n_u(), self.weight_std.len())?;
        check_dim("sampler x0", model.n_x(), self.x0.len())
    }
}

/// Draws one target: `ū_k = Σ_m a_m sin(ω_m k·dt) + b_m cos(ω_m k·dt)` per
/// channel, states by nominal propagation from `x0`.
pub fn sample_target(
    cfg: &TargetSamplerConfig,
    model: &dyn Model,
    rng: &mut RandomStream,
) -> Result<Trajectory> {
    cfg.validate(model)?;
    let n_u = model.n_u();
    // weights[channel][freq] = (a, b)
    let weights: Vec<Vec<(f64, f64)>> = (0..n_u)
        .map(|c| {
            cfg.frequencies
                .iter()
                .map(|_| {
                    let a: f64 = rng.sample(StandardNormal);
                    let b: f64 = rng.sample(StandardNormal);
                    (a * cfg.weight_std[c], b * cfg.weight_std[c])
                })
                .collect()
        })
        .collect();
    let dt = model.dt();
    let controls = (0..cfg.horizon)
        .map(|k| {
            let t = k as f64 * dt;
            DVector::from_fn(n_u, |c, _| {
                cfg.frequencies
                    .iter()
                    .zip(&weights[c])
                    .map(|(w, (a, b))| a * (w * t).sin() + b * (w * t).cos())
                    .sum()
            })
        })
        .collect();
    Trajectory::rollout(model, DVector::from_column_slice(&cfg.x0), controls)
}

/// Discounting of the per-step score terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `S_k = Σ_i λ^{k−1−i} e_i`, the unrolled one-step energy bound (`S_k ≥ V_k`).
    #[default]
    Recursive,
    /// `S_k = Σ_i λ^i e_i`.
    Forward,
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Weighting::Recursive => "recursive",
            Weighting::Forward => "forward",
        })
    }
}

impl FromStr for Weighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recursive" => Ok(Weighting::Recursive),
            "forward" => Ok(Weighting::Forward),
            other => Err(Error::Config(format!("unknown weighting {other:?}"))),
        }
    }
}

/// Accumulates per-step terms `e_i` into scores `S_1..S_N`.
pub fn accumulate_scores(terms: &[f64], lambda: f64, weighting: Weighting) -> Vec<f64> {
    let mut scores = Vec::with_capacity(terms.len());
    let mut s = 0.0;
    let mut discount = 1.0;
    for e in terms {
        match weighting {
            Weighting::Recursive => s = lambda * s + e,
            Weighting::Forward => {
                s += discount * e;
                discount *= lambda;
            }
        }
        scores.push(s);
    }
    scores
}

/// Scores and tracking energies of one calibration rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutScores {
    /// `S_1..S_N`.
    pub scores: Vec<f64>,
    /// `V_1..V_N`.
    pub energies: Vec<f64>,
    /// First step whose state was non-finite; scores from there on are `+inf`.
    pub diverged_at: Option<usize>,
}

/// Closed-loop rollout against `target` under `noise`, scoring each step with
/// `e_i = Δ_V(x_i) + ‖Θ D(x_i) w_i‖`.
pub fn score_rollout(
    model: &dyn Model,
    metric: &Metric,
    designer: &PolicyDesigner,
    target: &Trajectory,
    noise: &[NoiseVec],
    weighting: Weighting,
) -> Result<RolloutScores> {
    let n = target.horizon();
    if noise.len() < n {
        return Err(Error::Dimension {
            what: "noise sequence",
            expected: n,
            got: noise.len(),
        });
    }
    let policy = designer.design(model, target)?;
    let mut x: StateVec = target.states[0].clone();
    let mut terms = Vec::with_capacity(n);
    let mut energies = Vec::with_capacity(n);
    let mut diverged_at = None;
    for k in 0..n {
        let dv = delta_v(metric, model, &policy, k, &x);
        let push = model.noise_matrix(&x) * &noise[k];
        terms.push(dv + metric.norm(&push));
        x = model.f(&x, &policy.control(k, &x)) + push;
        if !x.iter().all(|v| v.is_finite()) {
            diverged_at = Some(k + 1);
            break;
        }
        energies.push(energy(metric, &x, &target.states[k + 1]));
    }
    let mut scores = accumulate_scores(&terms, metric.lambda(), weighting);
    if let Some(step) = diverged_at {
        scores.truncate(step - 1);
        scores.resize(n, f64::INFINITY);
        energies.resize(n, f64::INFINITY);
    }
    Ok(RolloutScores {
        scores,
        energies,
        diverged_at,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_seed: u64,
    pub target_seed: u64,
    pub sampler_hash: String,
    pub metric_hash: String,
}

/// `K × N` nonconformity scores with the matching tracking energies.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    /// `scores[j][k-1] = S_k^{(j)}`.
    pub scores: Vec<Vec<f64>>,
    pub energies: Vec<Vec<f64>>,
    pub weighting: Weighting,
    pub provenance: Provenance,
}

impl ScoreTable {
    pub fn k(&self) -> usize {
        self.scores.len()
    }

    pub fn horizon(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    /// Scores `𝒮_k` at step `k ∈ [1, N]`.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.scores.iter().map(|row| row[k - 1]).collect()
    }

    pub fn diverged_rollouts(&self) -> usize {
        self.scores.iter().filter(|r| r.iter().any(|s| s.is_infinite())).count()
    }
}

/// Rollout `j` pairs target `j` (drawn from its own stream) with noise sequence `j`.
/// Rollouts run in parallel; the table is assembled by index.
pub fn calibrate(
    model: &dyn Model,
    metric: &Metric,
    designer: &PolicyDesigner,
    dataset: &DisturbanceDataset,
    sampler: &TargetSamplerConfig,
    weighting: Weighting,
    target_seed: u64,
) -> Result<ScoreTable> {
    sampler.validate(model)?;
    if dataset.horizon < sampler.horizon {
        return Err(Error::Config(format!(
            "dataset horizon {} shorter than sampler horizon {}",
            dataset.horizon, sampler.horizon
        )));
    }
    let rows = dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(j, noise)| {
            let mut rng = rng::stream(target_seed, Domain::Target, j as u64);
            let target = sample_target(sampler, model, &mut rng)?;
            score_rollout(model, metric, designer, &target, noise, weighting)
        })
        .collect::<Result<Vec<_>>>()?;
    let (scores, energies) = rows.into_iter().map(|r| (r.scores, r.energies)).unzip();
    Ok(ScoreTable {
        scores,
        energies,
        weighting,
        provenance: Provenance {
            dataset_seed: dataset.seed,
            target_seed,
            sampler_hash: crate::io::hash_json(sampler),
            metric_hash: crate::io::hash_json(&metric.record()),
        },
    })
}

const MASS_TOL: f64 = 1e-12;

/// `(1−α)`-quantile of `Σ_i w̄_i δ_{S_i} + w̄_∞ δ_∞`, with
/// `w̄_i = w̃_i / (Σ w̃ + 1)` and `w̄_∞ = 1 / (Σ w̃ + 1)`.
///
/// Returns `+inf` when only the atom at infinity reaches mass `1 − α`.
pub fn weighted_quantile(scores: &[f64], weights: &[f64], alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Config("weighted quantile of an empty score set".into()));
    }
    check_dim("quantile weights", scores.len(), weights.len())?;
    if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(Error::Config("quantile weights must lie in [0, 1]".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("miscoverage {alpha} outside (0, 1)")));
    }
    let total: f64 = weights.iter().sum::<f64>() + 1.0;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let level = 1.0 - alpha;
    let mut mass = 0.0;
    for i in order {
        mass += weights[i] / total;
        if mass >= level - MASS_TOL {
            return Ok(scores[i]);
        }
    }
    Ok(f64::INFINITY)
}

/// Smallest `K` with `K ≥ ⌈(1−α)(K+1)⌉` (uniform weights).
pub fn min_calibration_size(alpha: f64) -> usize {
    let mut k = 1usize;
    while (k as f64) < ((1.0 - alpha) * (k as f64 + 1.0) - 1e-9).ceil() {
        k += 1;
    }
    k
}

/// Per-step conformal quantiles `C_k = q_{1−δ+δ̄}(𝒮_k)`, `k = 1..N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSchedule {
    /// `c[k-1] = C_k`.
    pub c: Vec<f64>,
    pub delta: f64,
    pub delta_bar: f64,
    pub alpha: f64,
    pub weights: Vec<f64>,
    /// All entries replaced by `C_N`.
    pub collapsed: bool,
    /// Set when `C_N < max_k C_k`, i.e. the constant collapse is not conservative.
    pub collapse_not_conservative: bool,
}

impl QuantileSchedule {
    pub fn terminal(&self) -> f64 {
        *self.c.last().expect("non-empty schedule")
    }

    pub fn at(&self, k: usize) -> f64 {
        self.c[k - 1]
    }
}

pub fn quantile_schedule(
    table: &ScoreTable,
    delta: f64,
    delta_bar: f64,
    weights: Option<&[f64]>,
    collapse: bool,
) -> Result<QuantileSchedule> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("delta {delta} outside (0, 1)")));
    }
    if !(delta_bar >= 0.0 && delta_bar < delta) {
        return Err(Error::Config(format!("need 0 <= delta_bar < delta, got {delta_bar}")));
    }
    let kk = table.k();
    let weights: Vec<f64> = weights.map_or_else(|| vec![1.0; kk], <[f64]>::to_vec);
    let alpha = delta - delta_bar;
    let mut c = Vec::with_capacity(table.horizon());
    for k in 1..=table.horizon() {
        let q = weighted_quantile(&table.column(k), &weights, alpha)?;
        if q.is_infinite() {
            return Err(Error::InsufficientCalibration {
                step: k,
                samples: kk,
                alpha,
                required: min_calibration_size(alpha),
            });
        }
        c.push(q);
    }
    let terminal = *c.last().ok_or_else(|| Error::Config("empty score table".into()))?;
    let max = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let collapse_not_conservative = terminal < max;
    if collapse {
        c.iter_mut().for_each(|v| *v = terminal);
    }
    Ok(QuantileSchedule {
        c,
        delta,
        delta_bar,
        alpha,
        weights,
        collapsed: collapse,
        collapse_not_conservative,
    })
}
