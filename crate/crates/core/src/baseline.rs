//! Gaussian-linearization comparison pipeline: MLE noise fit, covariance
//! propagation through the closed-loop linearization, χ² ellipsoid tightening.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::contraction::{PolicyDesigner, TrackingPolicy};
use crate::error::{Error, Result};
use crate::models::{Model, StateVec};
use crate::montecarlo::{evaluate, Evaluation, McReport};
use crate::noise::{fit_gaussian_mle, DisturbanceDataset, GaussianFit, NoiseDistribution};
use crate::trajopt::{solve, warm_start, PlanResult, PlannerProblem, SolverOptions, Tightening};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: StateVec,
    pub covariance: DMatrix<f64>,
}

/// Symmetrizes and clips negative eigenvalues to zero.
fn project_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.min() >= 0.0 {
        return sym;
    }
    let vals = eig.eigenvalues.map(|e| e.max(0.0));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// `μ_{k+1} = f(μ_k, π(μ_k))`, `Σ_{k+1} = A_cl Σ_k A_clᵀ + D Σ_w Dᵀ` with
/// `A_cl = A + B K_k` evaluated at the propagated mean.
pub fn propagate(
    model: &dyn Model,
    policy: &TrackingPolicy,
    sigma_w: &DMatrix<f64>,
    mu0: &StateVec,
    sigma0: &DMatrix<f64>,
) -> Result<Vec<GaussianBelief>> {
    let n = policy.horizon();
    let mut beliefs = Vec::with_capacity(n + 1);
    beliefs.push(GaussianBelief {
        mean: mu0.clone(),
        covariance: project_psd(sigma0),
    });
    for k in 0..n {
        let GaussianBelief { mean, covariance } = &beliefs[k];
        let u = policy.control(k, mean);
        let a_cl = model.jac_x(mean, &u) + model.jac_u(mean, &u) * &policy.gains()[k];
        let d = model.noise_matrix(mean);
        let next = &a_cl * covariance * a_cl.transpose() + &d * sigma_w * d.transpose();
        let mean_next = model.f(mean, &u);
        if !next.iter().chain(mean_next.iter()).all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("covariance propagation diverged at step {}", k + 1)));
        }
        beliefs.push(GaussianBelief {
            mean: mean_next,
            covariance: project_psd(&next),
        });
    }
    Ok(beliefs)
}

/// Lanczos approximation of `ln Γ(x)`, `x > 0`.
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let log_prefactor = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // Series.
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        (sum.ln() + log_prefactor).exp().min(1.0)
    } else {
        // Continued fraction for Q(a, x), modified Lentz.
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (1.0 - (log_prefactor.exp() * h)).max(0.0)
    }
}

/// Inverse χ² CDF by bisection on `P(dof/2, q/2)`.
pub fn chi2_quantile(dof: usize, level: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::Config("chi-squared needs dof >= 1".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("level {level} outside (0, 1)")));
    }
    let a = dof as f64 / 2.0;
    let cdf = |q: f64| gamma_p(a, q / 2.0);
    let mut hi = dof as f64 + 1.0;
    while cdf(hi) < level {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    while hi - lo > 1e-12 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Output of the plan ↔ propagate fixed point.
#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub plan: PlanResult,
    pub policy: TrackingPolicy,
    pub fit: GaussianFit,
    pub beliefs: Vec<GaussianBelief>,
    /// `shapes[k-1] = W_k`.
    pub shapes: Vec<DMatrix<f64>>,
    pub sweeps: usize,
    pub report: McReport,
}

/// Monte Carlo settings for the final evaluation under the true noise.
#[derive(Clone, Copy)]
pub struct BaselineEvaluation<'a> {
    pub truth: &'a NoiseDistribution,
    pub runs: usize,
    pub seed: u64,
}

const MAX_SWEEPS: usize = 10;
const SHAPE_TOL: f64 = 1e-4;

/// `W_k = χ²_{n_x}(1 − p/2)·Σ_k` for `k < N`, `W_N = χ²_{n_x}(1 − p)·Σ_N`.
pub fn chi2_shapes(beliefs: &[GaussianBelief], risk: f64) -> Result<Vec<DMatrix<f64>>> {
    let n_x = beliefs[0].mean.len();
    let step = chi2_quantile(n_x, 1.0 - risk / 2.0)?;
    let terminal = chi2_quantile(n_x, 1.0 - risk)?;
    let n = beliefs.len() - 1;
    Ok((1..=n)
        .map(|k| &beliefs[k].covariance * if k < n { step } else { terminal })
        .collect())
}

/// Fits a Gaussian to the pooled dataset, alternates planning and covariance
/// propagation until the tightening shapes settle, then evaluates the final
/// plan under the true noise with the same TV-LQR feedback.
pub fn baseline_plan_and_evaluate(
    template: &PlannerProblem,
    dataset: &DisturbanceDataset,
    designer: &PolicyDesigner,
    solver: &SolverOptions,
    eval: BaselineEvaluation<'_>,
) -> Result<BaselineOutcome> {
    if dataset.is_empty() {
        return Err(Error::Config("baseline needs a non-empty dataset".into()));
    }
    let model = &*template.model;
    let fit = fit_gaussian_mle(&dataset.pooled())?;
    let sigma_w = fit.regularized(1e-9);
    let n_x = model.n_x();
    let risk = template.constraints.risk;

    let mut problem = template.clone();
    problem.tightening = Tightening::none(n_x, problem.horizon);
    let mut plan = solve(&problem, &warm_start(&problem), solver)?;
    let mut shapes: Option<Vec<DMatrix<f64>>> = None;
    let mut sweeps = 0;
    let zero = DMatrix::zeros(n_x, n_x);
    loop {
        if !plan.status.is_usable() {
            return Err(Error::Infeasible(format!("baseline planning ended with status {}", plan.status)));
        }
        let policy = designer.design(model, &plan.trajectory)?;
        let beliefs = propagate(model, &policy, &sigma_w, &problem.x0, &zero)?;
        let next = chi2_shapes(&beliefs, risk)?;
        let change = shapes.as_ref().map_or(f64::INFINITY, |prev| {
            prev.iter().zip(&next).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max)
        });
        if change < SHAPE_TOL || sweeps == MAX_SWEEPS {
            let report = evaluate(&Evaluation {
                model,
                policy: &policy,
                dist: eval.truth,
                constraints: &problem.constraints,
                metric: None,
                schedule: None,
                runs: eval.runs,
                seed: eval.seed,
                method: "baseline",
                keep_rollouts: true,
            })?;
            return Ok(BaselineOutcome {
                plan,
                policy,
                fit,
                beliefs,
                shapes: shapes.unwrap_or(next),
                sweeps,
                report,
            });
        }
        sweeps += 1;
        problem.tightening = Tightening::from_shapes(next.clone());
        let seed = plan.trajectory.clone();
        plan = solve(&problem, &seed, solver)?;
        shapes = Some(next);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contraction::Metric;
    use crate::models::{LinearModel, Trajectory};
    use crate::tightening::halfspace_margin;
    use nalgebra::DVector;

    /// Closed-form χ² CDF for even dof: `1 − e^{−x/2} Σ_{j<dof/2} (x/2)^j / j!`.
    fn chi2_cdf_even(dof: usize, x: f64) -> f64 {
        let h = x / 2.0;
        let mut term = 1.0;
        let mut sum = 0.0;
        for j in 0..dof / 2 {
            if j > 0 {
                term *= h / j as f64;
            }
            sum += term;
        }
        1.0 - (-h).exp() * sum
    }

    #[test]
    fn chi2_known_values() {
        assert!((chi2_quantile(2, 0.95).unwrap() - (-2.0 * 0.05f64.ln())).abs() < 1e-9);
        assert!((chi2_quantile(2, 0.95).unwrap() - 5.9915).abs() < 1e-4);
        let q4 = chi2_quantile(4, 0.95).unwrap();
        assert!((chi2_cdf_even(4, q4) - 0.95).abs() < 1e-10);
        assert!((q4 - 9.4877).abs() < 1e-3);
        // dof 1: P(1/2, x/2) = erf(sqrt(x/2)); the median is 0.45494.
        assert!((chi2_quantile(1, 0.5).unwrap() - 0.454_936).abs() < 1e-5);
    }

    #[test]
    fn chi2_is_monotone() {
        let mut prev = 0.0;
        for i in 1..99 {
            let q = chi2_quantile(3, i as f64 / 100.0).unwrap();
            assert!(q > prev);
            prev = q;
        }
        for dof in 1..10 {
            assert!(chi2_quantile(dof + 1, 0.9).unwrap() > chi2_quantile(dof, 0.9).unwrap());
        }
        assert!(chi2_quantile(0, 0.9).is_err());
    }

    #[test]
    fn gamma_p_matches_closed_forms() {
        for x in [0.1, 0.5, 1.0, 2.0, 5.0, 12.0] {
            assert!((gamma_p(1.0, x) - (1.0 - (-x as f64).exp())).abs() < 1e-14);
            assert!((gamma_p(3.0, x) - chi2_cdf_even(6, 2.0 * x)).abs() < 1e-13);
        }
    }

    fn scalar_policy(a: f64, n: usize) -> (LinearModel, TrackingPolicy) {
        let model = LinearModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            1.0,
        )
        .unwrap();
        let target = Trajectory::rollout(&model, DVector::from_element(1, 0.0), vec![DVector::zeros(1); n]).unwrap();
        let policy = PolicyDesigner::identity(1, 1).design(&model, &target).unwrap();
        (model, policy)
    }

    #[test]
    fn zero_noise_keeps_zero_covariance() {
        let (model, policy) = scalar_policy(1.0, 20);
        let b = propagate(&model, &policy, &DMatrix::zeros(1, 1), &DVector::from_element(1, 0.0), &DMatrix::zeros(1, 1)).unwrap();
        assert!(b.iter().all(|g| g.covariance[(0, 0)] == 0.0 && g.mean[0] == 0.0));
    }

    #[test]
    fn scalar_lyapunov_fixed_point() {
        // Closed loop a_cl = 0.5 via zero feedback on a stable open loop.
        let model = LinearModel::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            1.0,
        )
        .unwrap();
        let target = Trajectory::rollout(&model, DVector::zeros(1), vec![DVector::zeros(1); 200]).unwrap();
        let policy = TrackingPolicy::new(target, vec![DMatrix::zeros(1, 1); 200]).unwrap();
        let b = propagate(&model, &policy, &DMatrix::identity(1, 1), &DVector::zeros(1), &DMatrix::zeros(1, 1)).unwrap();
        assert!((b[200].covariance[(0, 0)] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn shared_tightening_path_with_metric_shapes() {
        let metric = Metric::from_spd(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            0.5,
            10.0,
            0.2,
        )
        .unwrap();
        let eta = 0.4;
        let beliefs: Vec<GaussianBelief> = (0..3)
            .map(|_| GaussianBelief {
                mean: DVector::zeros(2),
                covariance: metric.m_inv() * (eta * eta),
            })
            .collect();
        let a = DVector::from_vec(vec![0.6, -1.0]);
        let via_metric = Tightening::from_metric(metric.m_inv(), 0.5, &[eta], eta);
        let via_shapes = Tightening::from_shapes(beliefs[1..].iter().map(|b| b.covariance.clone()).collect());
        for k in 1..=2 {
            let m1 = crate::tightening::support(&a, via_metric.shape(k));
            let m2 = crate::tightening::support(&a, via_shapes.shape(k));
            assert_eq!(m1, m2);
            assert!((m1 - halfspace_margin(&a, metric.m_inv(), eta)).abs() < 1e-15);
        }
    }
}
