//! Discrete-time systems `x' = f(x, u) + D(x) w`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub type StateVec = DVector<f64>;
pub type ControlVec = DVector<f64>;
pub type NoiseVec = DVector<f64>;

/// A discrete-time nonlinear system with additive, state-dependent noise.
///
/// Implementors provide the unchecked maps; the provided `step_*` methods
/// validate dimensions. Jacobians default to central finite differences.
pub trait Model: Send + Sync {
    fn id(&self) -> &str;
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    fn n_w(&self) -> usize;
    /// Sampling interval in seconds.
    fn dt(&self) -> f64;

    /// Nominal map `f(x, u)`.
    fn f(&self, x: &StateVec, u: &ControlVec) -> StateVec;

    /// Noise input matrix `D(x)`, `n_x × n_w`.
    fn noise_matrix(&self, x: &StateVec) -> DMatrix<f64>;

    fn jac_x(&self, x: &StateVec, u: &ControlVec) -> DMatrix<f64> {
        fd_jacobian(x, |xp| self.f(xp, u))
    }

    fn jac_u(&self, x: &StateVec, u: &ControlVec) -> DMatrix<f64> {
        fd_jacobian(u, |up| self.f(x, up))
    }

    fn step_nominal(&self, x: &StateVec, u: &ControlVec) -> Result<StateVec> {
        check_dim("state", self.n_x(), x.len())?;
        check_dim("control", self.n_u(), u.len())?;
        Ok(self.f(x, u))
    }

    fn step_noisy(&self, x: &StateVec, u: &ControlVec, w: &NoiseVec) -> Result<StateVec> {
        check_dim("noise", self.n_w(), w.len())?;
        let mut next = self.step_nominal(x, u)?;
        next += self.noise_matrix(x) * w;
        Ok(next)
    }
}

/// Central-difference Jacobian with step `1e-6 · max(1, |z_i|)`.
pub fn fd_jacobian<F>(z: &DVector<f64>, mut map: F) -> DMatrix<f64>
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    let base = map(z);
    let mut jac = DMatrix::zeros(base.len(), z.len());
    let mut probe = z.clone();
    for i in 0..z.len() {
        let h = 1e-6 * z[i].abs().max(1.0);
        probe[i] = z[i] + h;
        let plus = map(&probe);
        probe[i] = z[i] - h;
        let minus = map(&probe);
        probe[i] = z[i];
        jac.set_column(i, &((plus - minus) / (2.0 * h)));
    }
    jac
}

/// State and control sequences over a horizon `N`: `N + 1` states, `N` controls.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<StateVec>,
    pub controls: Vec<ControlVec>,
}

impl Trajectory {
    pub fn new(states: Vec<StateVec>, controls: Vec<ControlVec>) -> Result<Self> {
        if controls.is_empty() {
            return Err(Error::Config("trajectory horizon must be at least 1".into()));
        }
        check_dim("trajectory states", controls.len() + 1, states.len())?;
        Ok(Self { states, controls })
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    /// Largest `‖x_{k+1} − f(x_k, u_k)‖_∞` along the trajectory.
    pub fn max_defect(&self, model: &dyn Model) -> f64 {
        self.controls
            .iter()
            .enumerate()
            .map(|(k, u)| (&self.states[k + 1] - model.f(&self.states[k], u)).amax())
            .fold(0.0, f64::max)
    }

    /// Propagates `x0` through the nominal dynamics under `controls`.
    pub fn rollout(model: &dyn Model, x0: StateVec, controls: Vec<ControlVec>) -> Result<Self> {
        check_dim("initial state", model.n_x(), x0.len())?;
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(x0);
        for u in &controls {
            let next = model.step_nominal(states.last().unwrap(), u)?;
            states.push(next);
        }
        Self::new(states, controls)
    }
}

/// Dubins car `[p_x, p_y, θ, v]` with controls `[ω, a]`, explicit Euler.
///
/// The heading is not wrapped.
#[derive(Debug, Clone)]
pub struct DubinsCar {
    dt: f64,
    noise: DMatrix<f64>,
}

impl DubinsCar {
    pub const N_X: usize = 4;
    pub const N_U: usize = 2;

    pub fn new(dt: f64, noise: DMatrix<f64>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("sampling interval must be positive, got {dt}")));
        }
        check_dim("noise matrix rows", Self::N_X, noise.nrows())?;
        if noise.ncols() == 0 {
            return Err(Error::Config("noise matrix needs at least one column".into()));
        }
        Ok(Self { dt, noise })
    }
}

impl Model for DubinsCar {
    fn id(&self) -> &str {
        "dubins"
    }
    fn n_x(&self) -> usize {
        Self::N_X
    }
    fn n_u(&self) -> usize {
        Self::N_U
    }
    fn n_w(&self) -> usize {
        self.noise.ncols()
    }
    fn dt(&self) -> f64 {
        self.dt
    }

    fn f(&self, x: &StateVec, u: &ControlVec) -> StateVec {
        let (theta, v) = (x[2], x[3]);
        DVector::from_column_slice(&[
            x[0] + self.dt * v * theta.cos(),
            x[1] + self.dt * v * theta.sin(),
            x[2] + self.dt * u[0],
            x[3] + self.dt * u[1],
        ])
    }

    fn noise_matrix(&self, _x: &StateVec) -> DMatrix<f64> {
        self.noise.clone()
    }

    fn jac_x(&self, x: &StateVec, _u: &ControlVec) -> DMatrix<f64> {
        let (theta, v) = (x[2], x[3]);
        let (s, c) = theta.sin_cos();
        let mut a = DMatrix::identity(4, 4);
        a[(0, 2)] = -self.dt * v * s;
        a[(0, 3)] = self.dt * c;
        a[(1, 2)] = self.dt * v * c;
        a[(1, 3)] = self.dt * s;
        a
    }

    fn jac_u(&self, _x: &StateVec, _u: &ControlVec) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(4, 2);
        b[(2, 0)] = self.dt;
        b[(3, 1)] = self.dt;
        b
    }
}

/// Linear time-invariant system `x' = A x + B u + D w`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    d: DMatrix<f64>,
    dt: f64,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, d: DMatrix<f64>, dt: f64) -> Result<Self> {
        let n = a.nrows();
        check_dim("A columns", n, a.ncols())?;
        check_dim("B rows", n, b.nrows())?;
        check_dim("D rows", n, d.nrows())?;
        if !(dt > 0.0) {
            return Err(Error::Config(format!("sampling interval must be positive, got {dt}")));
        }
        Ok(Self { a, b, d, dt })
    }
}

impl Model for LinearModel {
    fn id(&self) -> &str {
        "linear"
    }
    fn n_x(&self) -> usize {
        self.a.nrows()
    }
    fn n_u(&self) -> usize {
        self.b.ncols()
    }
    fn n_w(&self) -> usize {
        self.d.ncols()
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn f(&self, x: &StateVec, u: &ControlVec) -> StateVec {
        &self.a * x + &self.b * u
    }
    fn noise_matrix(&self, _x: &StateVec) -> DMatrix<f64> {
        self.d.clone()
    }
    fn jac_x(&self, _x: &StateVec, _u: &ControlVec) -> DMatrix<f64> {
        self.a.clone()
    }
    fn jac_u(&self, _x: &StateVec, _u: &ControlVec) -> DMatrix<f64> {
        self.b.clone()
    }
}

/// Model selection as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case")]
pub enum ModelSpec {
    Dubins {
        dt: f64,
        /// Row-major `4 × n_w`.
        noise_matrix: Vec<f64>,
    },
    Linear {
        dt: f64,
        n_x: usize,
        n_u: usize,
        a: Vec<f64>,
        b: Vec<f64>,
        d: Vec<f64>,
    },
}

impl ModelSpec {
    pub fn build(&self) -> Result<Arc<dyn Model>> {
        match self {
            ModelSpec::Dubins { dt, noise_matrix } => {
                let d = row_major(noise_matrix, DubinsCar::N_X, "noise_matrix")?;
                Ok(Arc::new(DubinsCar::new(*dt, d)?))
            }
            ModelSpec::Linear {
                dt,
                n_x,
                n_u,
                a,
                b,
                d,
            } => {
                let a = row_major(a, *n_x, "a")?;
                let b = row_major(b, *n_x, "b")?;
                let d = row_major(d, *n_x, "d")?;
                check_dim("A columns", *n_x, a.ncols())?;
                check_dim("B columns", *n_u, b.ncols())?;
                Ok(Arc::new(LinearModel::new(a, b, d, *dt)?))
            }
        }
    }
}

/// Interprets `values` as a row-major matrix with `rows` rows.
pub fn row_major(values: &[f64], rows: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows == 0 || values.is_empty() || values.len() % rows != 0 {
        return Err(Error::Config(format!(
            "{name}: {} entries do not form a matrix with {rows} rows",
            values.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, values.len() / rows, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::FRAC_PI_2;

    fn dubins() -> DubinsCar {
        DubinsCar::new(0.05, DMatrix::identity(4, 4)).unwrap()
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn zero_velocity_is_a_fixed_point() {
        let m = dubins();
        let x = m.step_nominal(&v(&[0.0; 4]), &v(&[0.0, 0.0])).unwrap();
        assert_eq!(x, v(&[0.0; 4]));
    }

    #[test]
    fn euler_steps_by_hand() {
        let m = dubins();
        let x = m.step_nominal(&v(&[0.0, 0.0, 0.0, 1.0]), &v(&[0.0, 0.0])).unwrap();
        assert_eq!(x, v(&[0.05, 0.0, 0.0, 1.0]));
        let x = m
            .step_nominal(&v(&[0.0, 0.0, FRAC_PI_2, 1.0]), &v(&[0.0, 0.0]))
            .unwrap();
        assert!((x[0]).abs() < 1e-15);
        assert!((x[1] - 0.05).abs() < 1e-15);
        assert_eq!(x[2], FRAC_PI_2);
        assert_eq!(x[3], 1.0);
    }

    #[test]
    fn noisy_step_is_additive() {
        let m = dubins();
        let x = v(&[1.0, -2.0, 0.3, 0.7]);
        let u = v(&[0.1, -0.2]);
        let nominal = m.step_nominal(&x, &u).unwrap();
        assert_eq!(m.step_noisy(&x, &u, &v(&[0.0; 4])).unwrap(), nominal);
        let bumped = m.step_noisy(&x, &u, &v(&[0.1, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(bumped, &nominal + v(&[0.1, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn heading_and_speed_noise_only() {
        let d = DMatrix::from_diagonal(&v(&[0.0, 0.0, 1.0, 1.0]));
        let m = DubinsCar::new(0.05, d).unwrap();
        let x = v(&[1.0, 2.0, 0.1, 0.5]);
        let u = v(&[0.0, 0.0]);
        let nominal = m.step_nominal(&x, &u).unwrap();
        let noisy = m.step_noisy(&x, &u, &v(&[0.5; 4])).unwrap();
        let diff = noisy - nominal;
        assert_eq!(diff, v(&[0.0, 0.0, 0.5, 0.5]));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = dubins();
        assert!(matches!(
            m.step_nominal(&v(&[0.0; 3]), &v(&[0.0, 0.0])),
            Err(Error::Dimension { .. })
        ));
        assert!(m.step_noisy(&v(&[0.0; 4]), &v(&[0.0, 0.0]), &v(&[0.0; 2])).is_err());
        assert!(DubinsCar::new(0.0, DMatrix::identity(4, 4)).is_err());
        assert!(DubinsCar::new(-0.1, DMatrix::identity(4, 4)).is_err());
    }

    #[test]
    fn dubins_dimensions_and_hand_jacobians() {
        let m = dubins();
        assert_eq!((m.n_x(), m.n_u(), m.n_w()), (4, 2, 4));
        let a = m.jac_x(&v(&[0.0, 0.0, 0.0, 1.0]), &v(&[0.0, 0.0]));
        assert_eq!(a[(0, 3)], 0.05);
        let b = m.jac_u(&v(&[0.0; 4]), &v(&[0.0, 0.0]));
        assert_eq!(b[(2, 0)], 0.05);
        assert_eq!(b[(3, 1)], 0.05);
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let m = dubins();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let x = DVector::from_fn(4, |_, _| rng.random_range(-5.0..5.0));
            let u = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let (ax, bx) = (m.jac_x(&x, &u), m.jac_u(&x, &u));
            let (fx, fu) = (
                fd_jacobian(&x, |p| m.f(p, &u)),
                fd_jacobian(&u, |p| m.f(&x, p)),
            );
            for (an, fd) in [(ax, fx), (bx, fu)] {
                let rel = (&an - &fd).norm() / an.norm().max(1e-12);
                assert!(rel <= 1e-5, "relative Jacobian error {rel}");
            }
        }
    }

    #[test]
    fn euler_map_is_bit_deterministic() {
        let m = dubins();
        let x = v(&[0.3, 0.1, 2.0, -0.4]);
        let u = v(&[0.7, 0.2]);
        let a = m.step_nominal(&x, &u).unwrap();
        let b = m.step_nominal(&x, &u).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn spec_builds_models() {
        let spec = ModelSpec::Dubins {
            dt: 0.05,
            noise_matrix: vec![
                0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
            ],
        };
        let m = spec.build().unwrap();
        assert_eq!(m.noise_matrix(&v(&[0.0; 4]))[(2, 2)], 1.0);
        let bad = ModelSpec::Dubins {
            dt: 0.05,
            noise_matrix: vec![1.0; 6],
        };
        assert!(bad.build().is_err());
    }

    #[test]
    fn rollout_has_zero_defect() {
        let m = dubins();
        let controls = (0..20).map(|k| v(&[0.1 * k as f64, 0.5])).collect();
        let traj = Trajectory::rollout(&m, v(&[0.0, 0.4, 0.0, 0.0]), controls).unwrap();
        assert_eq!(traj.horizon(), 20);
        assert_eq!(traj.max_defect(&m), 0.0);
    }
}
