//! Ellipsoidal confidence sets and deterministic constraint tightening.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::models::{ControlVec, StateVec};

/// `{x : (x − c)ᵀ W⁻¹ (x − c) ≤ 1}` at a stated probability level.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    pub center: DVector<f64>,
    pub shape: DMatrix<f64>,
    pub level: f64,
}

impl Ellipsoid {
    pub fn new(center: DVector<f64>, shape: DMatrix<f64>, level: f64) -> Result<Self> {
        check_dim("ellipsoid shape", center.len(), shape.nrows())?;
        check_dim("ellipsoid shape", center.len(), shape.ncols())?;
        Ok(Self {
            center,
            shape,
            level,
        })
    }

    /// Confidence set `W = C²·M⁻¹` around `center`.
    pub fn from_metric(center: StateVec, quantile: f64, m_inv: &DMatrix<f64>, level: f64) -> Result<Self> {
        Self::new(center, m_inv * (quantile * quantile), level)
    }

    /// Semi-axis lengths and directions (columns), largest first.
    pub fn axes(&self) -> (DVector<f64>, DMatrix<f64>) {
        let eig = SymmetricEigen::new((&self.shape + self.shape.transpose()) * 0.5);
        let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let lengths = DVector::from_iterator(idx.len(), idx.iter().map(|&i| eig.eigenvalues[i].max(0.0).sqrt()));
        let dirs = DMatrix::from_columns(&idx.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>());
        (lengths, dirs)
    }
}

/// Membership with `1e-12` slack on the quadratic form.
pub fn member(e: &Ellipsoid, x: &DVector<f64>) -> Result<bool> {
    check_dim("point", e.center.len(), x.len())?;
    let d = x - &e.center;
    if d.iter().all(|v| *v == 0.0) {
        return Ok(true);
    }
    let chol = Cholesky::<f64, Dyn>::new(e.shape.clone())
        .ok_or_else(|| Error::Numerical("ellipsoid shape is not positive definite".into()))?;
    Ok(d.dot(&chol.solve(&d)) <= 1.0 + 1e-12)
}

/// Support function of `{W^{1/2} z : ‖z‖ ≤ 1}` in direction `a`: `sqrt(a W aᵀ)`.
pub fn support(a: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    a.dot(&(w * a)).max(0.0).sqrt()
}

/// Halfspace margin `η·‖a‖_{M⁻¹}`, computed as the support of `W = η²M⁻¹`.
pub fn halfspace_margin(a: &DVector<f64>, m_inv: &DMatrix<f64>, eta: f64) -> f64 {
    support(a, &(m_inv * (eta * eta)))
}

/// Equal Bonferroni split of the joint state-constraint risk.
pub fn split_risk(p: f64) -> f64 {
    p / 2.0
}

/// Ball obstacle in the subspace of the state picked out by `indices`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallObstacle {
    pub center: Vec<f64>,
    pub radius: f64,
    pub indices: Vec<usize>,
}

impl BallObstacle {
    pub fn validate(&self, n_x: usize) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::Config("obstacle radius must be positive".into()));
        }
        check_dim("obstacle center", self.indices.len(), self.center.len())?;
        let mut seen = vec![false; n_x];
        for &i in &self.indices {
            if i >= n_x || seen[i] {
                return Err(Error::Config(format!("bad obstacle state index {i}")));
            }
            seen[i] = true;
        }
        Ok(())
    }

    fn offset(&self, x: &StateVec) -> DVector<f64> {
        DVector::from_iterator(
            self.indices.len(),
            self.indices.iter().zip(&self.center).map(|(&i, c)| x[i] - c),
        )
    }

    /// Signed distance to the ball boundary in the selected subspace.
    pub fn signed_distance(&self, x: &StateVec) -> f64 {
        self.offset(x).norm() - self.radius
    }

    /// Outward unit normal lifted to the full state (`Pᵀ n_pos`).
    pub fn normal(&self, x: &StateVec) -> Result<StateVec> {
        let off = self.offset(x);
        let dist = off.norm();
        if dist == 0.0 {
            return Err(Error::DegenerateNormal);
        }
        let mut n = DVector::zeros(x.len());
        for (&i, o) in self.indices.iter().zip(off.iter()) {
            n[i] = o / dist;
        }
        Ok(n)
    }

    /// Tightened residual `d(x) − sqrt(nᵀ W n)`; satisfied iff `≥ 0`.
    pub fn residual(&self, x: &StateVec, w: &DMatrix<f64>) -> Result<f64> {
        Ok(self.signed_distance(x) - support(&self.normal(x)?, w))
    }

    pub fn contains(&self, x: &StateVec) -> bool {
        self.signed_distance(x) < 0.0
    }
}

/// Obstacle residual `d(x̄) − η‖n‖_{M⁻¹}`.
pub fn obstacle_margin(obs: &BallObstacle, xbar: &StateVec, m_inv: &DMatrix<f64>, eta: f64) -> Result<f64> {
    obs.residual(xbar, &(m_inv * (eta * eta)))
}

/// Control confidence set from a state set `W` and feedback Lipschitz constant `L`:
/// `Z = (L² / λ_min(W⁻¹))·I` around `ū`.
pub fn control_confidence(lipschitz: f64, w: &DMatrix<f64>, ubar: ControlVec, level: f64) -> Result<Ellipsoid> {
    // λ_min(W⁻¹) = 1 / λ_max(W).
    let w_max = SymmetricEigen::new((w + w.transpose()) * 0.5).eigenvalues.max();
    if !(w_max > 0.0) {
        return Err(Error::Numerical("state confidence shape is not positive definite".into()));
    }
    let n = ubar.len();
    Ellipsoid::new(ubar, DMatrix::identity(n, n) * (lipschitz * lipschitz * w_max), level)
}

/// Halfspace rows `a_i x ≤ b_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Halfspace {
    pub a: Vec<f64>,
    pub b: f64,
}

impl Halfspace {
    pub fn row(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.a)
    }
    pub fn value(&self, x: &StateVec) -> f64 {
        self.a.iter().zip(x.iter()).map(|(a, v)| a * v).sum::<f64>() - self.b
    }
}

/// State constraints `𝒳 = {A x ≤ b} \ ∪ obstacles`, goal `𝒳_N = {H x ≤ h}`, risk `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    #[serde(default)]
    pub halfspaces: Vec<Halfspace>,
    #[serde(default)]
    pub obstacles: Vec<BallObstacle>,
    #[serde(default)]
    pub goal: Vec<Halfspace>,
    pub risk: f64,
    /// Optional control box `lo ≤ u ≤ hi`, tightened through the feedback Lipschitz constant.
    #[serde(default)]
    pub control_bounds: Option<ControlBounds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ConstraintSpec {
    pub fn validate(&self, n_x: usize, n_u: usize) -> Result<()> {
        if !(self.risk > 0.0 && self.risk < 1.0) {
            return Err(Error::Config(format!("risk {} outside (0, 1)", self.risk)));
        }
        for h in self.halfspaces.iter().chain(&self.goal) {
            check_dim("constraint row", n_x, h.a.len())?;
        }
        for o in &self.obstacles {
            o.validate(n_x)?;
        }
        if let Some(cb) = &self.control_bounds {
            check_dim("control lower bound", n_u, cb.lo.len())?;
            check_dim("control upper bound", n_u, cb.hi.len())?;
            if cb.lo.iter().zip(&cb.hi).any(|(l, h)| l > h) {
                return Err(Error::Config("control bounds need lo <= hi".into()));
            }
        }
        Ok(())
    }

    /// Untightened membership in `𝒳`.
    pub fn state_ok(&self, x: &StateVec) -> bool {
        self.halfspaces.iter().all(|h| h.value(x) <= 0.0) && self.obstacles.iter().all(|o| !o.contains(x))
    }

    pub fn goal_ok(&self, x: &StateVec) -> bool {
        self.goal.iter().all(|h| h.value(x) <= 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn diag(xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&v(xs))
    }

    /// Uniform sample from the ellipsoid `{c + L z : ‖z‖ ≤ 1}`, `W = L Lᵀ`.
    fn sample_ellipsoid(rng: &mut ChaCha8Rng, c: &DVector<f64>, w: &DMatrix<f64>, boundary: bool) -> DVector<f64> {
        let l = Cholesky::<f64, Dyn>::new(w.clone()).unwrap().l();
        let n = c.len();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let r: f64 = if boundary { 1.0 } else { rng.random::<f64>().powf(1.0 / n as f64) };
        c + l * (z.normalize() * r)
    }

    #[test]
    fn risk_split() {
        assert_eq!(split_risk(0.1), 0.05);
        assert_eq!(split_risk(0.5), 0.25);
        assert_eq!(split_risk(0.0), 0.0);
    }

    #[test]
    fn membership_by_hand() {
        let e = Ellipsoid::new(v(&[1.0, 1.0]), diag(&[4.0, 1.0]), 0.9).unwrap();
        assert!(member(&e, &v(&[1.0, 1.0])).unwrap());
        assert!(member(&e, &v(&[3.0, 1.0])).unwrap());
        assert!(!member(&e, &v(&[3.01, 1.0])).unwrap());
        let unit = Ellipsoid::new(v(&[0.0, 0.0]), DMatrix::identity(2, 2), 0.9).unwrap();
        assert!(member(&unit, &v(&[0.6, 0.8])).unwrap());
    }

    #[test]
    fn membership_is_invariant_under_congruence() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let t = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)) + DMatrix::identity(3, 3) * 2.0;
            let g = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let w = &g * g.transpose() + DMatrix::identity(3, 3) * 0.1;
            let c = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let before = member(&Ellipsoid::new(c.clone(), w.clone(), 0.9).unwrap(), &x).unwrap();
            let after = member(
                &Ellipsoid::new(&t * c, &t * &w * t.transpose(), 0.9).unwrap(),
                &(&t * x),
            )
            .unwrap();
            assert_eq!(before, after);
        }
    }

    #[test]
    fn halfspace_margin_by_hand() {
        let id = DMatrix::identity(4, 4);
        assert_eq!(halfspace_margin(&v(&[0.0, 1.0, 0.0, 0.0]), &id, 0.0), 0.0);
        assert!((halfspace_margin(&v(&[0.0, 1.0, 0.0, 0.0]), &id, 0.3) - 0.3).abs() < 1e-15);
        let m_inv = diag(&[0.25, 1.0, 1.0, 1.0]);
        assert_eq!(halfspace_margin(&v(&[1.0, 0.0, 0.0, 0.0]), &m_inv, 1.0), 0.5);
    }

    fn unit_obstacle() -> BallObstacle {
        BallObstacle {
            center: vec![0.0, 0.0],
            radius: 1.2,
            indices: vec![0, 1],
        }
    }

    #[test]
    fn obstacle_margin_by_hand() {
        let o = unit_obstacle();
        let x = v(&[2.0, 0.0, 0.3, 1.0]);
        let id = DMatrix::identity(4, 4);
        assert!((obstacle_margin(&o, &x, &id, 0.0).unwrap() - 0.8).abs() < 1e-15);
        assert!((obstacle_margin(&o, &x, &id, 0.3).unwrap() - 0.5).abs() < 1e-15);
        let on_boundary = v(&[0.0, 1.2, 0.0, 0.0]);
        assert!(obstacle_margin(&o, &on_boundary, &id, 0.1).unwrap() < 0.0);
        assert!(matches!(
            obstacle_margin(&o, &v(&[0.0, 0.0, 5.0, 1.0]), &id, 0.1),
            Err(Error::DegenerateNormal)
        ));
        assert!(o.normal(&x).unwrap()[2] == 0.0);
    }

    #[test]
    fn control_confidence_by_hand() {
        let z = control_confidence(2.0, &DMatrix::identity(2, 2), v(&[0.0, 0.0]), 0.9).unwrap();
        assert_eq!(z.shape, DMatrix::identity(2, 2) * 4.0);
        let z = control_confidence(0.0, &DMatrix::identity(2, 2), v(&[1.0, 2.0]), 0.9).unwrap();
        assert_eq!(z.shape, DMatrix::zeros(2, 2));
        let z = control_confidence(1.0, &(DMatrix::identity(2, 2) * 0.25), v(&[0.0, 0.0]), 0.9).unwrap();
        assert!((z.axes().0[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn minkowski_containment_halfspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = DMatrix::from_row_slice(4, 4, &[
            3.0, 0.5, 0.0, 0.2, 0.5, 2.0, 0.1, 0.0, 0.0, 0.1, 1.0, 0.0, 0.2, 0.0, 0.0, 0.8,
        ]);
        let m_inv = m.clone().try_inverse().unwrap();
        let eta = 0.7;
        let a = v(&[0.3, 1.0, -0.2, 0.0]);
        let b = 2.0;
        let margin = halfspace_margin(&a, &m_inv, eta);
        // Place the center exactly on the tightened boundary.
        let xbar = &a * ((b - margin) / a.norm_squared());
        let w = &m_inv * (eta * eta);
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..10_000 {
            let y = sample_ellipsoid(&mut rng, &xbar, &w, false);
            assert!(a.dot(&y) <= b + 1e-9);
            let yb = sample_ellipsoid(&mut rng, &xbar, &w, true);
            worst = worst.max(a.dot(&(yb - &xbar)));
        }
        assert!(worst <= margin + 1e-12 && worst >= 0.99 * margin, "{worst} vs {margin}");
    }

    #[test]
    fn obstacle_tightening_is_sound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let o = unit_obstacle();
        let m = diag(&[2.0, 0.7, 1.0, 1.0]);
        let m_inv = m.try_inverse().unwrap();
        let eta = 0.5;
        let w = &m_inv * (eta * eta);
        let mut checked = 0;
        while checked < 40 {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let r: f64 = rng.random_range(1.2..3.0);
            let xbar = v(&[r * angle.cos(), r * angle.sin(), 0.0, 1.0]);
            if obstacle_margin(&o, &xbar, &m_inv, eta).unwrap() < 0.0 {
                continue;
            }
            checked += 1;
            for _ in 0..250 {
                assert!(!o.contains(&sample_ellipsoid(&mut rng, &xbar, &w, false)));
            }
        }
    }

    #[test]
    fn constraint_spec_checks() {
        let spec = ConstraintSpec {
            halfspaces: vec![Halfspace { a: vec![0.0, 1.0, 0.0, 0.0], b: 2.0 }],
            obstacles: vec![BallObstacle { center: vec![5.0, 0.0], radius: 1.2, indices: vec![0, 1] }],
            goal: vec![Halfspace { a: vec![-1.0, 0.0, 0.0, 0.0], b: -9.0 }],
            risk: 0.1,
            control_bounds: None,
        };
        spec.validate(4, 2).unwrap();
        assert!(spec.state_ok(&v(&[0.0, 0.4, 0.0, 0.0])));
        assert!(!spec.state_ok(&v(&[0.0, 2.1, 0.0, 0.0])));
        assert!(!spec.state_ok(&v(&[5.0, 0.5, 0.0, 0.0])));
        assert!(spec.goal_ok(&v(&[9.5, 0.0, 0.0, 0.0])));
        let mut bad = spec.clone();
        bad.obstacles[0].indices = vec![0, 7];
        assert!(bad.validate(4, 2).is_err());
    }
}
