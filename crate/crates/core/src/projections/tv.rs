//! Projection onto the anisotropic total-variation ball.
//!
//! With `D` the stacked circular forward differences, the projection of `x`
//! onto `{u : ‖Du‖₁ ≤ r}` has the dual
//!
//! ```text
//! minimize_p  ½‖x − Dᵀp‖² + r‖p‖_∞,      u = x − Dᵀp.
//! ```
//!
//! The dual is solved by accelerated proximal gradient with adaptive restart.
//! The prox of the ∞-norm is the residual of an ℓ1-ball projection (Moreau).

use super::project_l1_in_place;
use crate::error::{invalid, Result};
use crate::grid::{dot, Grid};

/// Upper bound on ‖D‖² for 2-D circular forward differences.
const LIPSCHITZ: f64 = 8.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TvProjection {
    pub point: Grid,
    pub converged: bool,
    /// Duality gap attained by the returned point, relative to the primal
    /// objective.
    pub gap: f64,
    pub iterations: usize,
}

/// Anisotropic total variation with circular boundary.
pub fn total_variation(x: &Grid) -> f64 {
    let (rows, cols) = (x.rows(), x.cols());
    let d = x.as_slice();
    let mut tv = 0.0;
    for r in 0..rows {
        let down = ((r + 1) % rows) * cols;
        for c in 0..cols {
            let here = d[r * cols + c];
            tv += (d[r * cols + (c + 1) % cols] - here).abs();
            tv += (d[down + c] - here).abs();
        }
    }
    tv
}

/// `p = Dx`: horizontal differences in the first half, vertical in the second.
fn grad(x: &[f64], rows: usize, cols: usize, p: &mut [f64]) {
    let n = rows * cols;
    for r in 0..rows {
        let down = ((r + 1) % rows) * cols;
        for c in 0..cols {
            let i = r * cols + c;
            p[i] = x[r * cols + (c + 1) % cols] - x[i];
            p[n + i] = x[down + c] - x[i];
        }
    }
}

/// `out = Dᵀp`.
fn grad_adjoint(p: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    let n = rows * cols;
    for r in 0..rows {
        let up = ((r + rows - 1) % rows) * cols;
        for c in 0..cols {
            let i = r * cols + c;
            let left = r * cols + (c + cols - 1) % cols;
            out[i] = p[left] - p[i] + p[n + up + c] - p[n + i];
        }
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, a| m.max(a.abs()))
}

/// Projects `x` onto the TV ball of the given radius. Non-convergence within
/// `max_iters` is reported through [`TvProjection::converged`] together with
/// the attained gap.
pub fn project_tv_ball(x: &Grid, radius: f64, tol: f64, max_iters: usize) -> Result<TvProjection> {
    solve(x, radius, None, tol, max_iters)
}

/// Projects `x` onto `[lo, hi]ⁿ ∩ {u : ‖Du‖₁ ≤ r}`.
///
/// Same dual as [`project_tv_ball`] with the primal point clamped to the
/// box, `u(p) = clamp(x − Dᵀp, lo, hi)`. The clamp is 1-Lipschitz, so the
/// step size carries over.
pub fn project_box_tv(x: &Grid, lo: f64, hi: f64, radius: f64, tol: f64, max_iters: usize) -> Result<TvProjection> {
    if !(lo <= hi) {
        return invalid(format!("box needs lo <= hi, got [{lo}, {hi}]"));
    }
    solve(x, radius, Some((lo, hi)), tol, max_iters)
}

fn solve(x: &Grid, radius: f64, bounds: Option<(f64, f64)>, tol: f64, max_iters: usize) -> Result<TvProjection> {
    if !(radius >= 0.0 && radius.is_finite()) {
        return invalid(format!("TV radius must be non-negative, got {radius}"));
    }
    if !(tol > 0.0) {
        return invalid(format!("TV tolerance must be positive, got {tol}"));
    }
    let clamp = |a: f64| match bounds {
        Some((lo, hi)) => a.clamp(lo, hi),
        None => a,
    };
    let boxed = x.map(clamp);
    if total_variation(&boxed) <= radius {
        return Ok(TvProjection {
            point: boxed,
            converged: true,
            gap: 0.0,
            iterations: 0,
        });
    }
    if radius == 0.0 {
        let mean = clamp(x.sum() / x.len() as f64);
        return Ok(TvProjection {
            point: x.map(|_| mean),
            converged: true,
            gap: 0.0,
            iterations: 0,
        });
    }

    let (rows, cols) = (x.rows(), x.cols());
    let n = x.len();
    let xs = x.as_slice();
    let step = 1.0 / LIPSCHITZ;

    let mut p = vec![0.0; 2 * n];
    let mut p_prev = p.clone();
    let mut y = p.clone();
    let mut theta = 1.0_f64;
    let mut dtp = vec![0.0; n];
    let mut u = vec![0.0; n];
    let mut du = vec![0.0; 2 * n];
    let mut v = vec![0.0; 2 * n];

    let mut gap = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=max_iters {
        iterations = it;
        // gradient step at y: ∇ = −D(x − Dᵀy)
        grad_adjoint(&y, rows, cols, &mut dtp);
        for i in 0..n {
            u[i] = clamp(xs[i] - dtp[i]);
        }
        grad(&u, rows, cols, &mut du);
        for i in 0..2 * n {
            v[i] = y[i] + step * du[i];
        }
        // prox of step·r‖·‖_∞ via Moreau: v − P_{ℓ1(step·r)}(v)
        let mut w = v.clone();
        project_l1_in_place(&mut w, step * radius);
        p_prev.copy_from_slice(&p);
        for i in 0..2 * n {
            p[i] = v[i] - w[i];
        }

        // primal point and gap at the new iterate
        grad_adjoint(&p, rows, cols, &mut dtp);
        for i in 0..n {
            u[i] = clamp(xs[i] - dtp[i]);
        }
        grad(&u, rows, cols, &mut du);
        let tv_u: f64 = du.iter().map(|a| a.abs()).sum();
        let primal = 0.5 * u.iter().zip(xs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let raw_gap = radius * max_abs(&p) - dot(&p, &du);
        gap = raw_gap.max(0.0) / primal.max(1e-300);
        if tv_u <= radius * (1.0 + tol) && gap <= tol {
            converged = true;
            break;
        }

        // momentum with gradient-based restart
        let restart = y
            .iter()
            .zip(&p)
            .zip(&p_prev)
            .map(|((yi, pi), qi)| (yi - pi) * (pi - qi))
            .sum::<f64>()
            > 0.0;
        if restart {
            theta = 1.0;
            y.copy_from_slice(&p);
        } else {
            let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
            let beta = (theta - 1.0) / theta_next;
            for i in 0..2 * n {
                y[i] = p[i] + beta * (p[i] - p_prev[i]);
            }
            theta = theta_next;
        }
    }

    grad_adjoint(&p, rows, cols, &mut dtp);
    let point = Grid::from_raw(x.shape(), xs.iter().zip(&dtp).map(|(a, b)| clamp(a - b)).collect());
    Ok(TvProjection {
        point,
        converged,
        gap,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Tag};

    #[test]
    fn difference_operator_adjoint() {
        let (rows, cols) = (4, 5);
        let mut rng = rng::stream(1, Tag::DotTest, &[]);
        let x = rng::normal_vec(&mut rng, rows * cols);
        let q = rng::normal_vec(&mut rng, 2 * rows * cols);
        let mut dx = vec![0.0; 2 * rows * cols];
        let mut dtq = vec![0.0; rows * cols];
        grad(&x, rows, cols, &mut dx);
        grad_adjoint(&q, rows, cols, &mut dtq);
        let (a, b) = (dot(&dx, &q), dot(&x, &dtq));
        assert!((a - b).abs() < 1e-12 * a.abs());
    }

    #[test]
    fn constant_grid_is_fixed() {
        let x = Grid::filled(3, 3, 0.7);
        let p = project_tv_ball(&x, 0.5, 1e-6, 500).unwrap();
        assert_eq!(p.point, x);
        assert_eq!(total_variation(&x), 0.0);
    }

    #[test]
    fn feasible_grid_is_fixed() {
        let x = Grid::from_fn(3, 4, |r, c| (r + 2 * c) as f64);
        let tv = total_variation(&x);
        assert_eq!(project_tv_ball(&x, tv, 1e-6, 500).unwrap().point, x);
        assert_eq!(project_tv_ball(&x, tv + 1.0, 1e-6, 500).unwrap().point, x);
    }

    #[test]
    fn zero_radius_gives_mean() {
        let x = Grid::from_fn(2, 3, |r, c| (r * 3 + c) as f64);
        let p = project_tv_ball(&x, 0.0, 1e-6, 500).unwrap();
        assert!(p.point.as_slice().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn result_is_nearly_feasible() {
        let mut rng = rng::stream(5, Tag::DotTest, &[]);
        let x = Grid::from_vec(6, 6, rng::normal_vec(&mut rng, 36)).unwrap();
        let radius = 0.3 * total_variation(&x);
        let p = project_tv_ball(&x, radius, 1e-6, 5000).unwrap();
        assert!(p.converged, "gap {}", p.gap);
        assert!(total_variation(&p.point) <= radius * (1.0 + 1e-6));
        // projection preserves the mean (constants lie in the null space of D)
        assert!((p.point.sum() - x.sum()).abs() < 1e-9);
    }

    #[test]
    fn non_convergence_is_flagged() {
        let mut rng = rng::stream(6, Tag::DotTest, &[]);
        let x = Grid::from_vec(8, 8, rng::normal_vec(&mut rng, 64)).unwrap();
        let p = project_tv_ball(&x, 1.0, 1e-12, 2).unwrap();
        assert!(!p.converged);
        assert!(p.gap.is_finite());
    }
}
