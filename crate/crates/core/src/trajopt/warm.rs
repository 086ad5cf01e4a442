//! Geometric seed trajectories.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::DVector;

use crate::models::{StateVec, Trajectory};
use crate::tightening::{BallObstacle, Halfspace};

/// Box half-width that keeps the center LP bounded along free directions.
const BOX: f64 = 1e3;

/// Center of the largest ball inside `{H x ≤ h}`, ties broken toward `anchor` in ℓ1.
/// Falls back to `anchor` when the set is empty or the LP fails.
pub fn chebyshev_center(rows: &[Halfspace], anchor: &StateVec) -> StateVec {
    if rows.is_empty() {
        return anchor.clone();
    }
    let n = anchor.len();
    let build = |dir| {
        let mut lp = Problem::new(dir);
        let xs: Vec<_> = (0..n)
            .map(|j| lp.add_var(0.0, (anchor[j] - BOX, anchor[j] + BOX)))
            .collect();
        (lp, xs)
    };

    let (mut lp, xs) = build(OptimizationDirection::Maximize);
    let r = lp.add_var(1.0, (f64::NEG_INFINITY, BOX));
    for h in rows {
        let norm = h.a.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mut expr: Vec<_> = xs.iter().zip(&h.a).map(|(&x, &a)| (x, a)).collect();
        expr.push((r, norm));
        lp.add_constraint(expr.as_slice(), ComparisonOp::Le, h.b);
    }
    let r_star = match lp.solve() {
        Ok(sol) if sol.objective() >= 0.0 => sol.objective(),
        _ => return anchor.clone(),
    };

    let (mut lp, xs) = build(OptimizationDirection::Minimize);
    let ts: Vec<_> = (0..n).map(|_| lp.add_var(1.0, (0.0, f64::INFINITY))).collect();
    for h in rows {
        let norm = h.a.iter().map(|a| a * a).sum::<f64>().sqrt();
        let expr: Vec<_> = xs.iter().zip(&h.a).map(|(&x, &a)| (x, a)).collect();
        lp.add_constraint(expr.as_slice(), ComparisonOp::Le, h.b - (r_star - 1e-9).max(0.0) * norm);
    }
    for j in 0..n {
        lp.add_constraint(&[(xs[j], 1.0), (ts[j], -1.0)][..], ComparisonOp::Le, anchor[j]);
        lp.add_constraint(&[(xs[j], 1.0), (ts[j], 1.0)][..], ComparisonOp::Ge, anchor[j]);
    }
    match lp.solve() {
        Ok(sol) => DVector::from_iterator(n, xs.iter().map(|&x| sol[x])),
        Err(_) => anchor.clone(),
    }
}

/// Replaces the stretch of `path` inside the inflated ball by a counterclockwise arc
/// around the obstacle center (in its coordinate plane).
fn detour(path: &mut [StateVec], obs: &BallObstacle, clearance: f64) {
    let inside = |x: &StateVec| obs.signed_distance(x) + obs.radius < clearance;
    let Some(first) = path.iter().position(inside) else {
        return;
    };
    let last = path.iter().rposition(inside).unwrap();
    let (i, j) = (obs.indices[0], obs.indices[obs.indices.len().min(2) - 1]);
    if i == j || first == 0 || last + 1 == path.len() {
        // Endpoints or a one-dimensional subspace: push points radially outward.
        for x in path[first..=last].iter_mut() {
            if let Ok(n) = obs.normal(x) {
                let gap = clearance - (obs.signed_distance(x) + obs.radius);
                *x += n * gap;
            }
        }
        return;
    }
    let (ci, cj) = (obs.center[0], obs.center[1]);
    let angle = |x: &StateVec| (x[j] - cj).atan2(x[i] - ci);
    let a0 = angle(&path[first - 1]);
    let mut a1 = angle(&path[last + 1]);
    while a1 <= a0 {
        a1 += std::f64::consts::TAU;
    }
    let span = (last - first + 2) as f64;
    for (m, x) in path[first..=last].iter_mut().enumerate() {
        let a = a0 + (a1 - a0) * (m + 1) as f64 / span;
        x[i] = ci + clearance * a.cos();
        x[j] = cj + clearance * a.sin();
    }
}

/// Straight-line state interpolation from `x0` to `goal`, bent around each
/// obstacle at distance `clearance` from its center; controls are zero.
pub fn seed_path(
    x0: &StateVec,
    goal: &StateVec,
    obstacles: &[BallObstacle],
    clearance_extra: f64,
    horizon: usize,
    n_u: usize,
) -> Trajectory {
    let mut states: Vec<StateVec> = (0..=horizon)
        .map(|k| {
            let s = k as f64 / horizon as f64;
            x0 + (goal - x0) * s
        })
        .collect();
    for obs in obstacles {
        // Strictly outside the inflated radius.
        let clearance = (obs.radius + clearance_extra) * 1.05;
        detour(&mut states, obs, clearance);
    }
    states[0] = x0.clone();
    let controls = vec![DVector::zeros(n_u); horizon];
    Trajectory { states, controls }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn goal_box() -> Vec<Halfspace> {
        vec![
            Halfspace { a: vec![1.0, 0.0, 0.0, 0.0], b: 11.0 },
            Halfspace { a: vec![-1.0, 0.0, 0.0, 0.0], b: -9.0 },
            Halfspace { a: vec![0.0, 1.0, 0.0, 0.0], b: 1.4 },
            Halfspace { a: vec![0.0, -1.0, 0.0, 0.0], b: 0.6 },
        ]
    }

    #[test]
    fn center_of_box_keeps_free_coordinates() {
        let c = chebyshev_center(&goal_box(), &v(&[0.0, 0.4, 0.3, 0.0]));
        assert!((&c - v(&[10.0, 0.4, 0.3, 0.0])).amax() < 1e-7, "{c}");
        assert_eq!(chebyshev_center(&[], &v(&[1.0, 2.0])), v(&[1.0, 2.0]));
    }

    #[test]
    fn straight_line_without_obstacles() {
        let t = seed_path(&v(&[0.0, 0.4, 0.0, 0.0]), &v(&[10.0, 0.4, 0.0, 0.0]), &[], 0.0, 10, 2);
        assert_eq!(t.states[0], v(&[0.0, 0.4, 0.0, 0.0]));
        assert!((t.states[5][0] - 5.0).abs() < 1e-12);
        assert!(t.controls.iter().all(|u| u.iter().all(|c| *c == 0.0)));
    }

    #[test]
    fn detour_clears_inflated_ball_on_the_ccw_side() {
        let obs = BallObstacle { center: vec![5.0, 0.0], radius: 1.2, indices: vec![0, 1] };
        let extra = 0.4;
        let t = seed_path(&v(&[0.0, 0.4, 0.0, 0.0]), &v(&[10.0, 0.4, 0.0, 0.0]), &[obs.clone()], extra, 200, 2);
        let min = t.states.iter().map(|x| obs.signed_distance(x) + obs.radius).fold(f64::INFINITY, f64::min);
        assert!(min > 1.2 + extra, "{min}");
        let lowest = t.states.iter().map(|x| x[1]).fold(f64::INFINITY, f64::min);
        assert!(lowest < -1.6);
    }
}
