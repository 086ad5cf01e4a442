//! Nominal trajectory optimization under tightened constraints.
//!
//! Full transcription over `x_1..x_N, u_0..u_{N-1}`, solved by an
//! augmented-Lagrangian outer loop around L-BFGS. Obstacle constraints are
//! linearized about the current iterate and re-linearized every outer pass.

pub mod banded;
pub mod lbfgs;
pub mod warm;

use std::fmt;
use std::ops::{AddAssign, SubAssign};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::contraction::PolicyDesigner;
use crate::error::{check_dim, Error, Result};
use crate::models::{Model, StateVec, Trajectory};
use crate::tightening::{support, BallObstacle, ConstraintSpec};

use banded::Banded;
use lbfgs::{minimize_preconditioned, LbfgsOptions};

/// Confidence-set shapes used for tightening: `shapes[k-1] = W_k`, `k = 1..N`,
/// with `W_N` the terminal set.
#[derive(Debug, Clone, PartialEq)]
pub struct Tightening {
    pub shapes: Vec<DMatrix<f64>>,
    /// Worst-case extent of any `W_k` along a unit direction, used for seeding.
    pub clearance: f64,
}

impl Tightening {
    /// `W_k = η̄_k²·M⁻¹` for `k < N` and `W_N = η²·M⁻¹`.
    pub fn from_metric(m_inv: &DMatrix<f64>, m_lo: f64, eta_steps: &[f64], eta_terminal: f64) -> Self {
        let mut shapes: Vec<DMatrix<f64>> = eta_steps.iter().map(|e| m_inv * (e * e)).collect();
        shapes.push(m_inv * (eta_terminal * eta_terminal));
        let top = eta_steps.iter().copied().fold(0.0, f64::max);
        Self {
            shapes,
            clearance: top / m_lo.sqrt(),
        }
    }

    pub fn from_shapes(shapes: Vec<DMatrix<f64>>) -> Self {
        let steps = &shapes[..shapes.len().saturating_sub(1)];
        let top = steps
            .iter()
            .map(|w| SymmetricEigen::new((w + w.transpose()) * 0.5).eigenvalues.max())
            .fold(0.0, f64::max);
        Self {
            clearance: top.max(0.0).sqrt(),
            shapes,
        }
    }

    pub fn none(n_x: usize, horizon: usize) -> Self {
        Self {
            shapes: vec![DMatrix::zeros(n_x, n_x); horizon],
            clearance: 0.0,
        }
    }

    pub fn horizon(&self) -> usize {
        self.shapes.len()
    }

    pub fn shape(&self, k: usize) -> &DMatrix<f64> {
        &self.shapes[k - 1]
    }

    /// Every shape multiplied by `s²` (margins scale by `s`).
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            shapes: self.shapes.iter().map(|w| w * (s * s)).collect(),
            clearance: self.clearance * s,
        }
    }
}

/// Nominal planning problem with deterministic tightening.
#[derive(Clone)]
pub struct PlannerProblem {
    pub model: Arc<dyn Model>,
    pub constraints: ConstraintSpec,
    pub tightening: Tightening,
    /// Step cost `uᵀ R u`.
    pub cost: DMatrix<f64>,
    pub x0: StateVec,
    pub horizon: usize,
    pub delta: f64,
    /// Feedback Lipschitz constant for control-bound tightening.
    pub control_lipschitz: f64,
}

impl fmt::Debug for PlannerProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlannerProblem")
            .field("model", &self.model.id())
            .field("horizon", &self.horizon)
            .field("delta", &self.delta)
            .finish_non_exhaustive()
    }
}

impl PlannerProblem {
    pub fn validate(&self) -> Result<()> {
        let (n_x, n_u) = (self.model.n_x(), self.model.n_u());
        self.constraints.validate(n_x, n_u)?;
        check_dim("x0", n_x, self.x0.len())?;
        check_dim("cost weight", n_u, self.cost.nrows())?;
        check_dim("cost weight", n_u, self.cost.ncols())?;
        check_dim("tightening schedule", self.horizon, self.tightening.horizon())?;
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        for w in &self.tightening.shapes {
            check_dim("tightening shape", n_x, w.nrows())?;
            if !w.iter().all(|v| v.is_finite()) {
                return Err(Error::Config("tightening shapes must be finite".into()));
            }
        }
        Ok(())
    }

    /// Control-box margin at step `k`: `L·sqrt(λ_max(W_k))`, zero at `k = 0`.
    fn control_margin(&self, k: usize) -> f64 {
        if k == 0 || self.control_lipschitz == 0.0 {
            return 0.0;
        }
        let w = self.tightening.shape(k);
        let top = SymmetricEigen::new((w + w.transpose()) * 0.5).eigenvalues.max();
        self.control_lipschitz * top.max(0.0).sqrt()
    }

    /// Largest violation of the exact tightened inequalities (0 when satisfied).
    pub fn max_violation(&self, traj: &Trajectory) -> f64 {
        let mut worst: f64 = 0.0;
        let n = self.horizon;
        for k in 1..n {
            let (x, w) = (&traj.states[k], self.tightening.shape(k));
            for h in &self.constraints.halfspaces {
                worst = worst.max(h.value(x) + support(&h.row(), w));
            }
            for obs in &self.constraints.obstacles {
                let r = obs.residual(x, w).unwrap_or(-obs.radius);
                worst = worst.max(-r);
            }
        }
        let w_n = self.tightening.shape(n);
        for h in &self.constraints.goal {
            worst = worst.max(h.value(&traj.states[n]) + support(&h.row(), w_n));
        }
        if let Some(cb) = &self.constraints.control_bounds {
            for (k, u) in traj.controls.iter().enumerate() {
                let m = self.control_margin(k);
                for i in 0..u.len() {
                    worst = worst.max(u[i] + m - cb.hi[i]).max(cb.lo[i] + m - u[i]);
                }
            }
        }
        worst
    }

    pub fn objective(&self, traj: &Trajectory) -> f64 {
        traj.controls.iter().map(|u| u.dot(&(&self.cost * u))).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    OptimalLocal,
    Feasible,
    Infeasible,
    MaxIter,
}

impl SolveStatus {
    pub fn is_usable(self) -> bool {
        matches!(self, SolveStatus::OptimalLocal | SolveStatus::Feasible)
    }
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolveStatus::OptimalLocal => "optimal-local",
            SolveStatus::Feasible => "feasible",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::MaxIter => "max-iter",
        })
    }
}

#[derive(Debug, Clone)]
pub struct PlanResult {
    pub trajectory: Trajectory,
    pub objective: f64,
    pub max_defect: f64,
    pub max_violation: f64,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub wall_time: f64,
    pub status: SolveStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_outer: usize,
    pub max_inner: usize,
    pub memory: usize,
    pub rho_init: f64,
    pub rho_growth: f64,
    pub rho_max: f64,
    pub tol_start: f64,
    pub tol_final: f64,
    /// Acceptance threshold for defects and violations.
    pub feas_tol: f64,
    /// Extra slack on every inequality inside the solver.
    pub buffer: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_outer: 40,
            max_inner: 4000,
            memory: 12,
            rho_init: 10.0,
            rho_growth: 10.0,
            rho_max: 1e8,
            tol_start: 1e-3,
            tol_final: 1e-8,
            feas_tol: 1e-6,
            buffer: 1e-6,
        }
    }
}

/// Which block of the decision vector a linear inequality acts on.
#[derive(Debug, Clone, Copy)]
enum Block {
    State(usize),
    Control(usize),
}

/// `aᵀ z_block ≤ b`.
#[derive(Debug, Clone)]
struct Row {
    block: Block,
    a: DVector<f64>,
    b: f64,
}

struct Layout {
    n_x: usize,
    n_u: usize,
    n: usize,
}

/// Time-ordered `[u_0, x_1, u_1, x_2, …, u_{N-1}, x_N]` so that the
/// Gauss-Newton matrix is banded.
impl Layout {
    fn len(&self) -> usize {
        self.n * (self.n_x + self.n_u)
    }
    /// Offset of `x_k`, `k ≥ 1`.
    fn x(&self, k: usize) -> usize {
        (k - 1) * (self.n_x + self.n_u) + self.n_u
    }
    fn u(&self, k: usize) -> usize {
        k * (self.n_x + self.n_u)
    }
    fn half_bandwidth(&self) -> usize {
        2 * self.n_x + self.n_u - 1
    }
    fn block(&self, b: Block) -> (usize, usize) {
        match b {
            Block::State(k) => (self.x(k), self.n_x),
            Block::Control(k) => (self.u(k), self.n_u),
        }
    }
    fn pack(&self, t: &Trajectory) -> DVector<f64> {
        let mut z = DVector::zeros(self.len());
        for k in 1..=self.n {
            z.rows_mut(self.x(k), self.n_x).copy_from(&t.states[k]);
        }
        for k in 0..self.n {
            z.rows_mut(self.u(k), self.n_u).copy_from(&t.controls[k]);
        }
        z
    }
    fn unpack(&self, z: &DVector<f64>, x0: &StateVec) -> Trajectory {
        let mut states = Vec::with_capacity(self.n + 1);
        states.push(x0.clone());
        states.extend((1..=self.n).map(|k| z.rows(self.x(k), self.n_x).into_owned()));
        let controls = (0..self.n).map(|k| z.rows(self.u(k), self.n_u).into_owned()).collect();
        Trajectory { states, controls }
    }
}

/// Linear rows for the current outer pass. Obstacles are linearized about `traj`.
/// First-order model of `g(x) = ‖Px − c‖ − r − sqrt(n(x)ᵀ W n(x))` at `x`,
/// written as `a x ≤ b`. The margin term moves with the normal unless `W` is
/// isotropic on the obstacle plane.
fn obstacle_row(obs: &BallObstacle, x: &StateVec, w: &DMatrix<f64>, k: usize, buffer: f64) -> Row {
    let n_x = x.len();
    let m = obs.indices.len();
    let diff = DVector::from_iterator(m, obs.indices.iter().zip(&obs.center).map(|(&i, c)| x[i] - c));
    let dist = diff.norm();
    let w_pp = DMatrix::from_fn(m, m, |i, j| w[(obs.indices[i], obs.indices[j])]);
    let (n_hat, dist) = if dist > 0.0 {
        (diff / dist, dist)
    } else {
        // Any fixed direction will do when the iterate sits on the center.
        let mut e = DVector::zeros(m);
        e[0] = 1.0;
        (e, 0.0)
    };
    let wn = &w_pp * &n_hat;
    let margin = n_hat.dot(&wn).max(0.0).sqrt();
    let mut grad_p = n_hat.clone();
    if dist > 0.0 && margin > 0.0 {
        let tangential = &wn - &n_hat * n_hat.dot(&wn);
        grad_p -= tangential / (dist * margin);
    }
    let g = dist - obs.radius - margin;
    let mut grad = DVector::zeros(n_x);
    for (j, &i) in obs.indices.iter().enumerate() {
        grad[i] = grad_p[j];
    }
    // g(x̂) + ∇gᵀ(x − x̂) ≥ buffer
    Row {
        block: Block::State(k),
        b: g - grad.dot(x) - buffer,
        a: -grad,
    }
}

fn build_rows(problem: &PlannerProblem, traj: &Trajectory, buffer: f64) -> Vec<Row> {
    let n = problem.horizon;
    let mut rows = Vec::new();
    for k in 1..n {
        let w = problem.tightening.shape(k);
        for h in &problem.constraints.halfspaces {
            let a = h.row();
            rows.push(Row {
                block: Block::State(k),
                b: h.b - support(&a, w) - buffer,
                a,
            });
        }
        for obs in &problem.constraints.obstacles {
            rows.push(obstacle_row(obs, &traj.states[k], w, k, buffer));
        }
    }
    let w_n = problem.tightening.shape(n);
    for h in &problem.constraints.goal {
        let a = h.row();
        rows.push(Row {
            block: Block::State(n),
            b: h.b - support(&a, w_n) - buffer,
            a,
        });
    }
    if let Some(cb) = &problem.constraints.control_bounds {
        let n_u = problem.model.n_u();
        for k in 0..n {
            let m = problem.control_margin(k);
            for i in 0..n_u {
                let mut e = DVector::zeros(n_u);
                e[i] = 1.0;
                rows.push(Row {
                    block: Block::Control(k),
                    a: e.clone(),
                    b: cb.hi[i] - m - buffer,
                });
                rows.push(Row {
                    block: Block::Control(k),
                    a: -e,
                    b: -cb.lo[i] - m - buffer,
                });
            }
        }
    }
    rows
}

struct Lagrangian<'a> {
    problem: &'a PlannerProblem,
    layout: &'a Layout,
    rows: &'a [Row],
    nu: &'a [DVector<f64>],
    mu: &'a [f64],
    rho: f64,
}

impl Lagrangian<'_> {
    fn defects(&self, z: &DVector<f64>) -> Vec<DVector<f64>> {
        let l = self.layout;
        let model = &*self.problem.model;
        (0..l.n)
            .map(|k| {
                let xk = if k == 0 {
                    self.problem.x0.clone()
                } else {
                    z.rows(l.x(k), l.n_x).into_owned()
                };
                let uk = z.rows(l.u(k), l.n_u).into_owned();
                z.rows(l.x(k + 1), l.n_x) - model.f(&xk, &uk)
            })
            .collect()
    }

    fn row_value(&self, row: &Row, z: &DVector<f64>) -> f64 {
        let (off, len) = self.layout.block(row.block);
        row.a.dot(&z.rows(off, len)) - row.b
    }

    fn eval(&self, z: &DVector<f64>, g: &mut DVector<f64>) -> f64 {
        let l = self.layout;
        let model = &*self.problem.model;
        let r = &self.problem.cost;
        g.fill(0.0);
        let mut f = 0.0;
        for k in 0..l.n {
            let uk = z.rows(l.u(k), l.n_u).into_owned();
            let ru = r * &uk;
            f += uk.dot(&ru);
            let sym = (r + r.transpose()) * &uk;
            g.rows_mut(l.u(k), l.n_u).add_assign(&sym);
        }
        for k in 0..l.n {
            let xk = if k == 0 {
                self.problem.x0.clone()
            } else {
                z.rows(l.x(k), l.n_x).into_owned()
            };
            let uk = z.rows(l.u(k), l.n_u).into_owned();
            let h = z.rows(l.x(k + 1), l.n_x) - model.f(&xk, &uk);
            f += self.nu[k].dot(&h) + 0.5 * self.rho * h.norm_squared();
            let gh = &self.nu[k] + &h * self.rho;
            g.rows_mut(l.x(k + 1), l.n_x).add_assign(&gh);
            if k > 0 {
                let a = model.jac_x(&xk, &uk);
                g.rows_mut(l.x(k), l.n_x).sub_assign(&(a.transpose() * &gh));
            }
            let b = model.jac_u(&xk, &uk);
            g.rows_mut(l.u(k), l.n_u).sub_assign(&(b.transpose() * &gh));
        }
        for (row, &mu) in self.rows.iter().zip(self.mu) {
            let c = self.row_value(row, z);
            let active = (mu + self.rho * c).max(0.0);
            f += (active * active - mu * mu) / (2.0 * self.rho);
            if active > 0.0 {
                let (off, len) = l.block(row.block);
                g.rows_mut(off, len).axpy(active, &row.a, 1.0);
            }
        }
        f
    }

    /// Gauss-Newton model of the Hessian: `2R` on controls, `ρ JᵀJ` from the
    /// dynamics residuals and `ρ aaᵀ` from active inequalities. Solves `H d = v`.
    fn gauss_newton_solve(&self, z: &DVector<f64>, v: &DVector<f64>) -> Option<DVector<f64>> {
        let l = self.layout;
        let model = &*self.problem.model;
        let (n_x, n_u) = (l.n_x, l.n_u);
        let mut h = Banded::zeros(l.len(), l.half_bandwidth());
        let r2 = &self.problem.cost + self.problem.cost.transpose();
        for k in 0..l.n {
            let xk = if k == 0 {
                self.problem.x0.clone()
            } else {
                z.rows(l.x(k), n_x).into_owned()
            };
            let uk = z.rows(l.u(k), n_u).into_owned();
            // Residual Jacobian blocks: x_{k+1} ↦ I, x_k ↦ −A, u_k ↦ −B.
            let a = model.jac_x(&xk, &uk);
            let b = model.jac_u(&xk, &uk);
            let (ou, ox1) = (l.u(k), l.x(k + 1));
            let btb = b.transpose() * &b;
            for i in 0..n_u {
                for j in 0..=i {
                    h.add(ou + i, ou + j, r2[(i, j)] + self.rho * btb[(i, j)]);
                }
                for j in 0..n_x {
                    h.add(ox1 + j, ou + i, -self.rho * b[(j, i)]);
                }
            }
            for i in 0..n_x {
                h.add(ox1 + i, ox1 + i, self.rho + 1e-10);
            }
            if k > 0 {
                let ox = l.x(k);
                let ata = a.transpose() * &a;
                let atb = a.transpose() * &b;
                for i in 0..n_x {
                    for j in 0..=i {
                        h.add(ox + i, ox + j, self.rho * ata[(i, j)]);
                    }
                    for j in 0..n_u {
                        h.add(ou + j, ox + i, self.rho * atb[(i, j)]);
                    }
                    for j in 0..n_x {
                        h.add(ox1 + j, ox + i, -self.rho * a[(j, i)]);
                    }
                }
            }
        }
        for (row, &mu) in self.rows.iter().zip(self.mu) {
            if mu + self.rho * self.row_value(row, z) > 0.0 {
                let (off, len) = l.block(row.block);
                for i in 0..len {
                    for j in 0..=i {
                        h.add(off + i, off + j, self.rho * row.a[i] * row.a[j]);
                    }
                }
            }
        }
        Some(h.cholesky()?.solve(v))
    }
}

/// Closed-loop re-simulation of an approximately feasible iterate so that the
/// returned plan satisfies the dynamics to rounding error.
fn polish(problem: &PlannerProblem, iterate: &Trajectory) -> Result<Trajectory> {
    let model = &*problem.model;
    let policy = PolicyDesigner::identity(model.n_x(), model.n_u()).design(model, iterate)?;
    let mut states = vec![problem.x0.clone()];
    let mut controls = Vec::with_capacity(problem.horizon);
    for k in 0..problem.horizon {
        let u = policy.control(k, &states[k]);
        states.push(model.f(&states[k], &u));
        controls.push(u);
    }
    Ok(Trajectory { states, controls })
}

/// Geometric seed: straight line to the goal-set center, bent around obstacles.
pub fn warm_start(problem: &PlannerProblem) -> Trajectory {
    let goal = warm::chebyshev_center(&problem.constraints.goal, &problem.x0);
    warm::seed_path(
        &problem.x0,
        &goal,
        &problem.constraints.obstacles,
        problem.tightening.clearance,
        problem.horizon,
        problem.model.n_u(),
    )
}

pub fn solve(problem: &PlannerProblem, seed: &Trajectory, opts: &SolverOptions) -> Result<PlanResult> {
    let start = Instant::now();
    problem.validate()?;
    check_dim("seed horizon", problem.horizon, seed.horizon())?;
    let layout = Layout {
        n_x: problem.model.n_x(),
        n_u: problem.model.n_u(),
        n: problem.horizon,
    };
    let mut z = layout.pack(seed);
    let mut traj = layout.unpack(&z, &problem.x0);
    let mut rows = build_rows(problem, &traj, opts.buffer);
    let mut mu = vec![0.0; rows.len()];
    let mut nu = vec![DVector::zeros(layout.n_x); layout.n];
    let mut rho = opts.rho_init;
    let mut tol = opts.tol_start;
    let mut prev_viol = f64::INFINITY;
    let mut stalled = 0;
    let mut iterations = 0;
    let mut outer = 0;
    let mut converged = false;
    let mut infeasible = false;

    while outer < opts.max_outer {
        outer += 1;
        let (out, defects, row_vals) = {
            let lag = Lagrangian {
                problem,
                layout: &layout,
                rows: &rows,
                nu: &nu,
                mu: &mu,
                rho,
            };
            let out = minimize_preconditioned(
                |zz, gg| lag.eval(zz, gg),
                |zz, v| lag.gauss_newton_solve(zz, v),
                z.clone(),
                &LbfgsOptions {
                    memory: opts.memory,
                    max_iter: opts.max_inner,
                    tol,
                },
            );
            let defects = lag.defects(&out.x);
            let row_vals: Vec<f64> = rows.iter().map(|r| lag.row_value(r, &out.x)).collect();
            (out, defects, row_vals)
        };
        iterations += out.iterations;
        if !out.value.is_finite() {
            return Err(Error::Numerical("non-finite augmented Lagrangian".into()));
        }
        z = out.x;

        let eq_viol = defects.iter().map(|d| d.amax()).fold(0.0, f64::max);
        let ineq_viol = row_vals
            .iter()
            .zip(&mu)
            .map(|(c, m)| c.max(-m / rho))
            .fold(0.0, f64::max);
        let viol = eq_viol.max(ineq_viol);

        for (n_k, d) in nu.iter_mut().zip(&defects) {
            n_k.axpy(rho, d, 1.0);
        }
        for (m, c) in mu.iter_mut().zip(&row_vals) {
            *m = (*m + rho * c).max(0.0);
        }

        traj = layout.unpack(&z, &problem.x0);
        let exact = eq_viol.max(problem.max_violation(&traj));
        let target = opts.feas_tol * 0.1;
        if exact <= target && out.converged && tol <= opts.tol_final * 1.0001 {
            converged = true;
            break;
        }
        if viol > 0.25 * prev_viol && viol > target {
            if rho >= opts.rho_max {
                stalled += 1;
                if stalled >= 3 && viol > opts.feas_tol {
                    infeasible = true;
                    break;
                }
            }
            rho = (rho * opts.rho_growth).min(opts.rho_max);
        } else {
            stalled = 0;
        }
        prev_viol = viol;
        tol = (tol * 0.1).max(opts.tol_final);
        rows = build_rows(problem, &traj, opts.buffer);
    }

    let candidate = polish(problem, &traj).unwrap_or_else(|_| traj.clone());
    // Keep the polished plan only when it is at least as good as the raw iterate.
    let raw_score = traj.max_defect(&*problem.model).max(problem.max_violation(&traj));
    let pol_score = candidate.max_defect(&*problem.model).max(problem.max_violation(&candidate));
    let plan = if pol_score <= raw_score.max(opts.feas_tol) { candidate } else { traj };

    let max_defect = plan.max_defect(&*problem.model);
    let max_violation = problem.max_violation(&plan);
    let objective = problem.objective(&plan);
    if !objective.is_finite() {
        return Err(Error::Numerical("non-finite objective".into()));
    }
    let ok = max_defect <= opts.feas_tol && max_violation <= opts.feas_tol;
    let status = match (ok, converged, infeasible) {
        (true, true, _) => SolveStatus::OptimalLocal,
        (true, false, _) => SolveStatus::Feasible,
        (false, _, true) => SolveStatus::Infeasible,
        (false, _, false) => SolveStatus::MaxIter,
    };
    Ok(PlanResult {
        trajectory: plan,
        objective,
        max_defect,
        max_violation,
        iterations,
        outer_iterations: outer,
        wall_time: start.elapsed().as_secs_f64(),
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DubinsCar, LinearModel};
    use crate::tightening::{BallObstacle, Halfspace};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn dubins_problem(eta: f64, horizon: usize) -> PlannerProblem {
        let model: Arc<dyn Model> = Arc::new(DubinsCar::new(0.05, DMatrix::identity(4, 4)).unwrap());
        let m_inv = DMatrix::identity(4, 4) * 2.0;
        let goal = vec![
            Halfspace { a: vec![1.0, 0.0, 0.0, 0.0], b: 11.5 },
            Halfspace { a: vec![-1.0, 0.0, 0.0, 0.0], b: -8.5 },
            Halfspace { a: vec![0.0, 1.0, 0.0, 0.0], b: 1.9 },
            Halfspace { a: vec![0.0, -1.0, 0.0, 0.0], b: 1.1 },
        ];
        PlannerProblem {
            model,
            constraints: ConstraintSpec {
                halfspaces: vec![Halfspace { a: vec![0.0, 1.0, 0.0, 0.0], b: 2.0 }],
                obstacles: vec![BallObstacle { center: vec![5.0, 0.0], radius: 1.2, indices: vec![0, 1] }],
                goal,
                risk: 0.1,
                control_bounds: None,
            },
            tightening: Tightening::from_metric(&m_inv, 0.5, &vec![eta; horizon - 1], eta),
            cost: DMatrix::identity(2, 2) * 0.1,
            x0: v(&[0.0, 0.4, 0.0, 0.0]),
            horizon,
            delta: 0.1,
            control_lipschitz: 0.0,
        }
    }

    #[test]
    fn obstacle_row_is_the_tangent_of_the_tightened_residual() {
        let obs = BallObstacle { center: vec![5.0, 0.0], radius: 1.2, indices: vec![0, 1] };
        let w = DMatrix::from_row_slice(4, 4, &[
            0.09, 0.02, 0.0, 0.01,
            0.02, 0.04, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
            0.01, 0.0, 0.0, 1.0,
        ]);
        let x = v(&[3.1, 1.4, 0.3, 0.8]);
        let row = obstacle_row(&obs, &x, &w, 1, 0.0);
        let g = |y: &DVector<f64>| obs.residual(y, &w).unwrap();
        // Value: −aᵀx̂ + b = g(x̂).
        assert!((row.b - row.a.dot(&x) - g(&x)).abs() < 1e-12);
        for i in 0..4 {
            let mut e = DVector::zeros(4);
            e[i] = 1e-6;
            let fd = (g(&(&x + &e)) - g(&(&x - &e))) / 2e-6;
            assert!((fd + row.a[i]).abs() < 1e-7, "{i}: {fd} vs {}", -row.a[i]);
        }
        // Isotropic shapes give the fixed-normal halfspace.
        let iso = DMatrix::identity(4, 4) * 0.09;
        let row = obstacle_row(&obs, &x, &iso, 1, 0.0);
        let n = obs.normal(&x).unwrap();
        assert!((&row.a + &n).amax() < 1e-15);
        let c = v(&[5.0, 0.0, 0.0, 0.0]);
        assert!((row.b + 1.2 + 0.3 + n.dot(&c)).abs() < 1e-12);
    }

    #[test]
    fn tightening_from_metric_matches_support() {
        let t = Tightening::from_metric(&DMatrix::identity(2, 2), 1.0, &[0.3, 0.3], 0.5);
        assert_eq!(t.horizon(), 3);
        assert!((support(&v(&[0.0, 1.0]), t.shape(1)) - 0.3).abs() < 1e-15);
        assert!((support(&v(&[0.0, 1.0]), t.shape(3)) - 0.5).abs() < 1e-15);
        assert!((t.clearance - 0.3).abs() < 1e-15);
    }

    #[test]
    fn zero_control_is_optimal_when_the_goal_holds_the_drift() {
        let model: Arc<dyn Model> = Arc::new(
            LinearModel::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2), DMatrix::identity(2, 2), 0.1).unwrap(),
        );
        let problem = PlannerProblem {
            model,
            constraints: ConstraintSpec {
                halfspaces: vec![],
                obstacles: vec![],
                goal: vec![
                    Halfspace { a: vec![1.0, 0.0], b: 2.0 },
                    Halfspace { a: vec![-1.0, 0.0], b: 0.0 },
                ],
                risk: 0.1,
                control_bounds: None,
            },
            tightening: Tightening::none(2, 10),
            cost: DMatrix::identity(2, 2),
            x0: v(&[0.5, 0.0]),
            horizon: 10,
            delta: 0.1,
            control_lipschitz: 0.0,
        };
        let res = solve(&problem, &warm_start(&problem), &SolverOptions::default()).unwrap();
        assert!(res.status.is_usable(), "{:?}", res.status);
        assert!(res.objective < 1e-8, "{}", res.objective);
    }

    #[test]
    fn dubins_short_horizon_solves() {
        let problem = dubins_problem(0.3, 200);
        let seed = warm_start(&problem);
        assert_eq!(seed.states[0], problem.x0);
        let res = solve(&problem, &seed, &SolverOptions::default()).unwrap();
        assert!(res.status.is_usable(), "{:?} {} {}", res.status, res.max_defect, res.max_violation);
        assert!(res.max_defect <= 1e-6 && res.max_violation <= 1e-6);
    }
}
