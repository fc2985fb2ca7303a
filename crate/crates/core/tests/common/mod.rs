//! Independent reference solvers shared by the integration tests.
//!
//! Every projection oracle here solves the KKT system of the projection
//! problem through a scalar Lagrange multiplier found by bisection, which
//! shares no code with the library's sort-based, dual or Dykstra routes.

#![allow(dead_code)]

pub fn soft(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

fn bisect(lo: f64, hi: f64, too_big: impl FnMut(f64) -> bool) -> f64 {
    bisect_n(lo, hi, 200, too_big)
}

fn bisect_n(mut lo: f64, mut hi: f64, steps: usize, mut too_big: impl FnMut(f64) -> bool) -> f64 {
    for _ in 0..steps {
        let mid = 0.5 * (lo + hi);
        if too_big(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn l1(v: &[f64]) -> f64 {
    v.iter().map(|a| a.abs()).sum()
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// argmin ½‖z−x‖² s.t. ‖z‖₂ ≤ r, via z = x/(1+μ).
pub fn l2_ball_oracle(x: &[f64], r: f64) -> Vec<f64> {
    if l2(x) <= r {
        return x.to_vec();
    }
    let mu = bisect(0.0, l2(x) / r, |mu| l2(x) / (1.0 + mu) > r);
    x.iter().map(|v| v / (1.0 + mu)).collect()
}

/// argmin ½‖z−x‖² s.t. ‖z‖₁ ≤ r, via z = soft(x, θ).
pub fn l1_ball_oracle(x: &[f64], r: f64) -> Vec<f64> {
    if l1(x) <= r {
        return x.to_vec();
    }
    let top = x.iter().fold(0.0_f64, |m, a| m.max(a.abs()));
    let theta = bisect(0.0, top, |t| x.iter().map(|v| soft(*v, t).abs()).sum::<f64>() > r);
    x.iter().map(|v| soft(*v, theta)).collect()
}

/// Box ∩ ℓ1 ball: per coordinate the minimizer is clamp(soft(x, θ), lo, hi).
pub fn box_l1_oracle(x: &[f64], lo: f64, hi: f64, r: f64) -> Vec<f64> {
    let z = |t: f64| -> Vec<f64> { x.iter().map(|v| soft(*v, t).clamp(lo, hi)).collect() };
    if l1(&z(0.0)) <= r {
        return z(0.0);
    }
    let top = x.iter().fold(0.0_f64, |m, a| m.max(a.abs()));
    let theta = bisect(0.0, top, |t| l1(&z(t)) > r);
    z(theta)
}

/// Box ∩ ℓ2 ball: per coordinate clamp(x/(1+μ), lo, hi).
pub fn box_l2_oracle(x: &[f64], lo: f64, hi: f64, r: f64) -> Vec<f64> {
    let z = |mu: f64| -> Vec<f64> { x.iter().map(|v| (v / (1.0 + mu)).clamp(lo, hi)).collect() };
    if l2(&z(0.0)) <= r {
        return z(0.0);
    }
    let theta = bisect(0.0, 1e8, |mu| l2(&z(mu)) > r);
    z(theta)
}

/// Circular forward differences, horizontal then vertical.
pub fn diffs(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(x[r * cols + (c + 1) % cols] - x[r * cols + c]);
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            out.push(x[((r + 1) % rows) * cols + c] - x[r * cols + c]);
        }
    }
    out
}

pub fn tv(x: &[f64], rows: usize, cols: usize) -> f64 {
    l1(&diffs(x, rows, cols))
}

/// Edge list of the difference operator: (plus index, minus index) per row of D.
fn edges(rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let mut e = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            e.push((r * cols + (c + 1) % cols, r * cols + c));
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            e.push((((r + 1) % rows) * cols + c, r * cols + c));
        }
    }
    e
}

/// TV denoising prox: argmin ½‖u−x‖² + μ‖Du‖₁, by exact coordinate descent
/// on the box-constrained dual min_{|p|≤μ} ½‖x − Dᵀp‖².
pub fn tv_prox_oracle(x: &[f64], rows: usize, cols: usize, mu: f64, sweeps: usize) -> Vec<f64> {
    let e = edges(rows, cols);
    let mut p = vec![0.0; e.len()];
    let mut u = x.to_vec();
    for _ in 0..sweeps {
        for (j, &(a, b)) in e.iter().enumerate() {
            // Dᵀe_j = +1 at a, -1 at b, so ‖Dᵀe_j‖² = 2
            let dj = u[a] - u[b];
            let new = (p[j] + dj / 2.0).clamp(-mu, mu);
            let delta = new - p[j];
            if delta != 0.0 {
                // u = x − Dᵀp
                u[a] -= delta;
                u[b] += delta;
                p[j] = new;
            }
        }
    }
    u
}

/// TV-ball projection via bisection on the prox weight μ.
pub fn tv_ball_oracle(x: &[f64], rows: usize, cols: usize, r: f64) -> Vec<f64> {
    if tv(x, rows, cols) <= r {
        return x.to_vec();
    }
    let top = x.iter().fold(0.0_f64, |m, a| m.max(a.abs())) * 4.0 + 1.0;
    let mu = bisect_n(0.0, top, 60, |mu| tv(&tv_prox_oracle(x, rows, cols, mu, 1000), rows, cols) > r);
    tv_prox_oracle(x, rows, cols, mu, 20000)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
