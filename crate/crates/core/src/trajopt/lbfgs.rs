//! Limited-memory BFGS with Armijo backtracking.

use std::collections::VecDeque;

use nalgebra::DVector;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when `‖∇φ‖_∞ ≤ tol`.
    pub tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 12,
            max_iter: 2000,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `fg`, which returns the value and writes the gradient.
/// A non-finite value at the start is returned as-is with `converged = false`.
pub fn minimize<F>(fg: F, x0: DVector<f64>, opts: &LbfgsOptions) -> LbfgsOutcome
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64,
{
    minimize_preconditioned(fg, |_, _| None, x0, opts)
}

/// As [`minimize`], with `precond(x, v)` standing in for the initial inverse
/// Hessian applied to `v` at the current iterate. Returning `None` falls back
/// to the usual scalar scaling.
pub fn minimize_preconditioned<F, P>(mut fg: F, mut precond: P, x0: DVector<f64>, opts: &LbfgsOptions) -> LbfgsOutcome
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64,
    P: FnMut(&DVector<f64>, &DVector<f64>) -> Option<DVector<f64>>,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = DVector::zeros(n);
    let mut f = fg(&x, &mut g);
    let mut pairs: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut g_new = DVector::zeros(n);
    let mut iterations = 0;
    let mut idle = 0;
    while iterations < opts.max_iter && idle < 5 {
        let gn = g.amax();
        if !f.is_finite() || gn <= opts.tol {
            break;
        }
        iterations += 1;

        // Two-loop recursion.
        let mut d = -&g;
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * s.dot(&d);
            d.axpy(-a, y, 1.0);
            alphas.push(a);
        }
        if let Some(pd) = precond(&x, &d) {
            d = pd;
        } else if let Some((s, y, _)) = pairs.back() {
            d *= s.dot(y) / y.dot(y);
        } else {
            d /= gn.max(1.0);
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * y.dot(&d);
            d.axpy(a - b, s, 1.0);
        }
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            pairs.clear();
            d = precond(&x, &-&g).unwrap_or_else(|| -&g / gn.max(1.0));
            slope = g.dot(&d);
            if !(slope < 0.0) {
                d = -&g / gn.max(1.0);
                slope = g.dot(&d);
            }
        }

        let mut step = 1.0;
        let mut accepted = None;
        // Near a minimizer value differences drown in rounding; then accept on
        // the directional derivative instead (approximate Wolfe).
        let noise = 1e-13 * f.abs().max(1e-300);
        for _ in 0..60 {
            let trial = &x + &d * step;
            let ft = fg(&trial, &mut g_new);
            let armijo = ft <= f + 1e-4 * step * slope;
            let approx_wolfe = ft <= f + noise && g_new.dot(&d).abs() <= 0.9 * slope.abs();
            if ft.is_finite() && (armijo || approx_wolfe) {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, ft)) = accepted else {
            if pairs.is_empty() {
                break;
            }
            pairs.clear();
            continue;
        };
        let s = &trial - &x;
        if s.amax() <= 1e-15 * (1.0 + x.amax()) {
            idle += 1;
        } else {
            idle = 0;
        }
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        x = trial;
        f = ft;
        std::mem::swap(&mut g, &mut g_new);
    }
    let grad_norm = g.amax();
    LbfgsOutcome {
        converged: f.is_finite() && grad_norm <= opts.tol,
        x,
        value: f,
        grad_norm,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let out = minimize(
            |z, g| {
                let (a, b) = (z[0], z[1]);
                g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
                g[1] = 200.0 * (b - a * a);
                (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
            },
            DVector::from_vec(vec![-1.2, 1.0]),
            &LbfgsOptions {
                tol: 1e-10,
                ..Default::default()
            },
        );
        assert!(out.converged);
        assert!((out.x[0] - 1.0).abs() < 1e-8 && (out.x[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn ill_conditioned_quadratic() {
        let scales: Vec<f64> = (0..50).map(|i| 10f64.powf(i as f64 / 10.0)).collect();
        let out = minimize(
            |z, g| {
                let mut f = 0.0;
                for i in 0..z.len() {
                    g[i] = scales[i] * (z[i] - 1.0);
                    f += 0.5 * scales[i] * (z[i] - 1.0).powi(2);
                }
                f
            },
            DVector::zeros(50),
            &LbfgsOptions {
                tol: 1e-9,
                max_iter: 5000,
                ..Default::default()
            },
        );
        assert!(out.converged, "{}", out.grad_norm);
        assert!(out.x.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }
}
