//! Constant contraction metric, tracking policy and the decay residual.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::models::{ControlVec, Model, StateVec, Trajectory};

/// Discrete rate from a continuous one: `λ = sqrt((1 − 2γ·dt)·m_lo/m_hi)`.
pub fn discrete_rate(gamma: f64, dt: f64, m_lo: f64, m_hi: f64) -> Result<f64> {
    if !(gamma >= 0.0 && dt > 0.0) {
        return Err(Error::Config(format!("need gamma >= 0 and dt > 0, got gamma={gamma}, dt={dt}")));
    }
    if !(m_lo > 0.0 && m_lo <= m_hi) {
        return Err(Error::Config(format!("need 0 < m_lo <= m_hi, got {m_lo}, {m_hi}")));
    }
    let shrink = 1.0 - 2.0 * gamma * dt;
    if shrink <= 0.0 {
        return Err(Error::Config(format!("1 - 2*gamma*dt = {shrink} must be positive")));
    }
    let lambda = (shrink * m_lo / m_hi).sqrt();
    if lambda >= 1.0 {
        return Err(Error::Config(format!("contraction rate {lambda} must be below 1")));
    }
    Ok(lambda)
}

/// Constant metric `M = ΘᵀΘ` with spectrum bounds and discrete rate `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    theta: DMatrix<f64>,
    m: DMatrix<f64>,
    m_inv: DMatrix<f64>,
    m_lo: f64,
    m_hi: f64,
    lambda: f64,
}

impl Metric {
    pub fn new(theta: DMatrix<f64>, m_lo: f64, m_hi: f64, lambda: f64) -> Result<Self> {
        check_dim("metric factor", theta.nrows(), theta.ncols())?;
        if !(0.0..1.0).contains(&lambda) {
            return Err(Error::Config(format!("rate {lambda} outside [0, 1)")));
        }
        if !(m_lo > 0.0 && m_lo <= m_hi) {
            return Err(Error::Config(format!("need 0 < m_lo <= m_hi, got {m_lo}, {m_hi}")));
        }
        let m = theta.transpose() * &theta;
        let m = (&m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(m.clone()).eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        if lo < m_lo - 1e-9 || hi > m_hi + 1e-9 {
            return Err(Error::Config(format!(
                "metric spectrum [{lo}, {hi}] outside bounds [{m_lo}, {m_hi}]"
            )));
        }
        let m_inv = Cholesky::<f64, Dyn>::new(m.clone())
            .ok_or_else(|| Error::Config("metric is not positive definite".into()))?
            .inverse();
        Ok(Self {
            theta,
            m,
            m_inv: (&m_inv + m_inv.transpose()) * 0.5,
            m_lo,
            m_hi,
            lambda,
        })
    }

    /// `M = c·I`.
    pub fn scaled_identity(n: usize, c: f64, m_lo: f64, m_hi: f64, lambda: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::Config(format!("metric scale must be positive, got {c}")));
        }
        Self::new(DMatrix::identity(n, n) * c.sqrt(), m_lo, m_hi, lambda)
    }

    /// Factor an SPD matrix as `ΘᵀΘ` with `Θ` upper triangular.
    pub fn from_spd(m: DMatrix<f64>, m_lo: f64, m_hi: f64, lambda: f64) -> Result<Self> {
        let chol = Cholesky::<f64, Dyn>::new((&m + m.transpose()) * 0.5)
            .ok_or_else(|| Error::Config("metric is not positive definite".into()))?;
        Self::new(chol.l().transpose(), m_lo, m_hi, lambda)
    }

    /// Rescales `p` so its top eigenvalue is `m_hi`, then lifts eigenvalues
    /// below `m_lo` up to `m_lo`.
    pub fn normalized_from(p: &DMatrix<f64>, m_lo: f64, m_hi: f64, lambda: f64) -> Result<Self> {
        let sym = (p + p.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let top = eig.eigenvalues.max();
        if !(top > 0.0 && top.is_finite()) {
            return Err(Error::Config("cannot normalize a matrix without positive spectrum".into()));
        }
        let vals = eig.eigenvalues.map(|e| (e * m_hi / top).clamp(m_lo, m_hi));
        let m = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
        Self::from_spd(m, m_lo, m_hi, lambda)
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }
    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }
    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }
    pub fn m_inv(&self) -> &DMatrix<f64> {
        &self.m_inv
    }
    pub fn m_lo(&self) -> f64 {
        self.m_lo
    }
    pub fn m_hi(&self) -> f64 {
        self.m_hi
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Weighted norm `‖Θ v‖`.
    pub fn norm(&self, v: &StateVec) -> f64 {
        (&self.theta * v).norm()
    }

    pub fn record(&self) -> MetricRecord {
        MetricRecord {
            n: self.dim(),
            theta: self.theta.transpose().iter().copied().collect(),
            m_lo: self.m_lo,
            m_hi: self.m_hi,
            lambda: self.lambda,
        }
    }
}

/// Persisted form of a [`Metric`] (`Θ` row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub n: usize,
    pub theta: Vec<f64>,
    pub m_lo: f64,
    pub m_hi: f64,
    pub lambda: f64,
}

impl MetricRecord {
    pub fn to_metric(&self) -> Result<Metric> {
        check_dim("metric factor", self.n * self.n, self.theta.len())?;
        Metric::new(
            DMatrix::from_row_slice(self.n, self.n, &self.theta),
            self.m_lo,
            self.m_hi,
            self.lambda,
        )
    }
}

/// Riemann energy under a constant metric: the straight-line weighted norm `‖Θ(a − b)‖`.
pub fn energy(metric: &Metric, a: &StateVec, b: &StateVec) -> f64 {
    metric.norm(&(a - b))
}

/// Target-tracking feedback `u = ū_k + K_k (x − x̄_k)`.
#[derive(Debug, Clone)]
pub struct TrackingPolicy {
    target: Trajectory,
    gains: Vec<DMatrix<f64>>,
    /// Cost-to-go matrix at the start of the horizon.
    cost_to_go: DMatrix<f64>,
}

impl TrackingPolicy {
    pub fn new(target: Trajectory, gains: Vec<DMatrix<f64>>) -> Result<Self> {
        check_dim("gain schedule", target.horizon(), gains.len())?;
        let n = target.states[0].len();
        Ok(Self {
            target,
            gains,
            cost_to_go: DMatrix::identity(n, n),
        })
    }

    pub fn target(&self) -> &Trajectory {
        &self.target
    }
    pub fn gains(&self) -> &[DMatrix<f64>] {
        &self.gains
    }
    pub fn cost_to_go(&self) -> &DMatrix<f64> {
        &self.cost_to_go
    }
    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    pub fn control(&self, k: usize, x: &StateVec) -> ControlVec {
        &self.target.controls[k] + &self.gains[k] * (x - &self.target.states[k])
    }

    /// Lipschitz constant of the error feedback: `max_k ‖K_k‖₂`.
    pub fn lipschitz(&self) -> f64 {
        self.gains
            .iter()
            .map(|k| k.clone().svd(false, false).singular_values.max())
            .fold(0.0, f64::max)
    }
}

/// Finite-horizon time-varying LQR along a target trajectory.
#[derive(Debug, Clone)]
pub struct PolicyDesigner {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl PolicyDesigner {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        for (name, m) in [("Q", &q), ("R", &r)] {
            if m.nrows() != m.ncols() || Cholesky::<f64, Dyn>::new(m.clone()).is_none() {
                return Err(Error::Config(format!("{name} must be symmetric positive definite")));
            }
        }
        Ok(Self { q, r })
    }

    pub fn identity(n_x: usize, n_u: usize) -> Self {
        Self {
            q: DMatrix::identity(n_x, n_x),
            r: DMatrix::identity(n_u, n_u),
        }
    }

    pub fn design(&self, model: &dyn Model, target: &Trajectory) -> Result<TrackingPolicy> {
        design_tvlqr(model, target, &self.q, &self.r)
    }
}

/// Backward Riccati pass along the linearization `(A_k, B_k)` of the target.
/// Terminal cost-to-go is `Q`.
pub fn design_tvlqr(
    model: &dyn Model,
    target: &Trajectory,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<TrackingPolicy> {
    check_dim("Q", model.n_x(), q.nrows())?;
    check_dim("R", model.n_u(), r.nrows())?;
    let n = target.horizon();
    let mut p = q.clone();
    let mut gains = vec![DMatrix::zeros(model.n_u(), model.n_x()); n];
    for k in (0..n).rev() {
        let (x, u) = (&target.states[k], &target.controls[k]);
        let a = model.jac_x(x, u);
        let b = model.jac_u(x, u);
        let bt_p = b.transpose() * &p;
        let s = r + &bt_p * &b;
        let s_chol = Cholesky::<f64, Dyn>::new((&s + s.transpose()) * 0.5)
            .ok_or_else(|| Error::Design(format!("R + BᵀPB not positive definite at step {k}")))?;
        let gain = -s_chol.solve(&(&bt_p * &a));
        let a_cl = &a + &b * &gain;
        let next = q + a.transpose() * &p * &a_cl;
        p = (&next + next.transpose()) * 0.5;
        if !p.iter().all(|v| v.is_finite()) || !gain.iter().all(|v| v.is_finite()) {
            return Err(Error::Design(format!("Riccati recursion diverged at step {k}")));
        }
        gains[k] = gain;
    }
    let mut policy = TrackingPolicy::new(target.clone(), gains)?;
    policy.cost_to_go = p;
    Ok(policy)
}

/// Decay residual at step `k`:
/// `max{0, ‖Θ(φ(x) − φ(x̄_k))‖ − λ‖Θ(x − x̄_k)‖}` with `φ(z) = f(z, π(z))`.
pub fn delta_v(
    metric: &Metric,
    model: &dyn Model,
    policy: &TrackingPolicy,
    k: usize,
    x: &StateVec,
) -> f64 {
    let xbar = &policy.target.states[k];
    let ubar = &policy.target.controls[k];
    let flow_x = model.f(x, &policy.control(k, x));
    let flow_bar = model.f(xbar, ubar);
    (metric.norm(&(flow_x - flow_bar)) - metric.lambda * metric.norm(&(x - xbar))).max(0.0)
}
