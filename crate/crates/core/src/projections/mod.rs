//! Euclidean projections onto handcrafted convex sets and their intersections.

mod dykstra;
mod tv;

pub use dykstra::{is_feasible, project_intersection, Feasibility, IntersectionProjection};
pub use tv::{project_box_tv, project_tv_ball, total_variation, TvProjection};

use crate::error::{invalid, Result};
use crate::grid::Grid;

/// One convex constraint set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConstraintSpec {
    Box { lo: f64, hi: f64 },
    L2Ball { radius: f64 },
    L1Ball { radius: f64 },
    /// Anisotropic total variation with circular boundary. A zero radius
    /// admits only constant grids.
    TvBall { radius: f64 },
}

impl ConstraintSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ConstraintSpec::Box { lo, hi } => {
                if !(lo <= hi) {
                    return invalid(format!("box bounds must satisfy lo <= hi, got [{lo}, {hi}]"));
                }
            }
            ConstraintSpec::L2Ball { radius } | ConstraintSpec::L1Ball { radius } => {
                if !(radius > 0.0 && radius.is_finite()) {
                    return invalid(format!("ball radius must be positive, got {radius}"));
                }
            }
            ConstraintSpec::TvBall { radius } => {
                if !(radius >= 0.0 && radius.is_finite()) {
                    return invalid(format!("TV radius must be non-negative, got {radius}"));
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConstraintSpec::Box { .. } => "box",
            ConstraintSpec::L2Ball { .. } => "l2ball",
            ConstraintSpec::L1Ball { .. } => "l1ball",
            ConstraintSpec::TvBall { .. } => "tvball",
        }
    }

    /// How far `x` lies outside the set, measured in the set's own norm
    /// (sup-distance for the box, excess norm for the balls).
    pub fn violation(&self, x: &Grid) -> f64 {
        match *self {
            ConstraintSpec::Box { lo, hi } => x
                .as_slice()
                .iter()
                .map(|&v| (lo - v).max(v - hi))
                .fold(0.0, f64::max),
            ConstraintSpec::L2Ball { radius } => (x.norm2() - radius).max(0.0),
            ConstraintSpec::L1Ball { radius } => (x.norm1() - radius).max(0.0),
            ConstraintSpec::TvBall { radius } => (total_variation(x) - radius).max(0.0),
        }
    }

    /// Same set with its radius multiplied by `factor`; boxes are unchanged.
    pub fn with_radius_scale(&self, factor: f64) -> Self {
        match *self {
            ConstraintSpec::Box { .. } => *self,
            ConstraintSpec::L2Ball { radius } => ConstraintSpec::L2Ball { radius: radius * factor },
            ConstraintSpec::L1Ball { radius } => ConstraintSpec::L1Ball { radius: radius * factor },
            ConstraintSpec::TvBall { radius } => ConstraintSpec::TvBall { radius: radius * factor },
        }
    }

    /// Projection onto this single set.
    pub fn project(&self, x: &Grid, tv: &TvOptions) -> Result<Grid> {
        match *self {
            ConstraintSpec::Box { lo, hi } => project_box(x, lo, hi),
            ConstraintSpec::L2Ball { radius } => project_l2_ball(x, radius),
            ConstraintSpec::L1Ball { radius } => project_l1_ball(x, radius),
            ConstraintSpec::TvBall { radius } => {
                Ok(project_tv_ball(x, radius, tv.tol, tv.max_iters)?.point)
            }
        }
    }
}

/// Inner solver settings for TV-ball projections.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TvOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for TvOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iters: 500,
        }
    }
}

/// Ordered list of sets whose intersection is the feasible set.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintStack {
    pub sets: Vec<ConstraintSpec>,
    pub dykstra_max_iters: usize,
    pub dykstra_tol: f64,
    pub tv: TvOptions,
}

impl ConstraintStack {
    pub const DEFAULT_MAX_ITERS: usize = 200;
    pub const DEFAULT_TOL: f64 = 1e-8;

    pub fn new(sets: Vec<ConstraintSpec>) -> Result<Self> {
        let stack = Self {
            sets,
            dykstra_max_iters: Self::DEFAULT_MAX_ITERS,
            dykstra_tol: Self::DEFAULT_TOL,
            tv: TvOptions::default(),
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sets.is_empty() {
            return invalid("constraint stack must contain at least one set");
        }
        if !(self.dykstra_tol > 0.0) || !(self.tv.tol > 0.0) {
            return invalid("projection tolerances must be positive");
        }
        if self.dykstra_max_iters == 0 || self.tv.max_iters == 0 {
            return invalid("projection iteration caps must be positive");
        }
        self.sets.iter().try_for_each(ConstraintSpec::validate)
    }

    /// A copy with every ball radius multiplied by `factor`.
    pub fn with_radius_scale(&self, factor: f64) -> Self {
        Self {
            sets: self.sets.iter().map(|s| s.with_radius_scale(factor)).collect(),
            ..self.clone()
        }
    }
}

pub fn project_box(x: &Grid, lo: f64, hi: f64) -> Result<Grid> {
    if !(lo <= hi) {
        return invalid(format!("box bounds must satisfy lo <= hi, got [{lo}, {hi}]"));
    }
    Ok(x.map(|v| v.clamp(lo, hi)))
}

pub fn project_l2_ball(x: &Grid, radius: f64) -> Result<Grid> {
    if !(radius > 0.0) {
        return invalid(format!("l2 ball radius must be positive, got {radius}"));
    }
    let norm = x.norm2();
    if norm <= radius {
        return Ok(x.clone());
    }
    Ok(x.scaled(radius / norm))
}

pub fn project_l1_ball(x: &Grid, radius: f64) -> Result<Grid> {
    if !(radius > 0.0) {
        return invalid(format!("l1 ball radius must be positive, got {radius}"));
    }
    let mut out = x.clone();
    project_l1_in_place(out.as_mut_slice(), radius);
    Ok(out)
}

/// Sort-and-threshold projection onto `{v : ‖v‖₁ ≤ radius}`. The slice is
/// soft-thresholded in place by the level that makes the ℓ1 norm equal to
/// the radius.
pub(crate) fn project_l1_in_place(v: &mut [f64], radius: f64) {
    let l1: f64 = v.iter().map(|a| a.abs()).sum();
    if l1 <= radius {
        return;
    }
    if radius <= 0.0 {
        v.iter_mut().for_each(|a| *a = 0.0);
        return;
    }
    let mut mags: Vec<f64> = v.iter().map(|a| a.abs()).collect();
    // stable: ties keep index order
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &m) in mags.iter().enumerate() {
        cumsum += m;
        let candidate = (cumsum - radius) / (j + 1) as f64;
        if m - candidate > 0.0 {
            theta = candidate;
        } else {
            break;
        }
    }
    for a in v.iter_mut() {
        *a = a.signum() * (a.abs() - theta).max(0.0);
    }
}

/// Exact projection onto `[lo, hi]ⁿ ∩ {‖v‖₁ ≤ radius}` for `lo ≤ 0 ≤ hi`:
/// `clamp(soft(v, θ), lo, hi)` with θ solving the piecewise-linear
/// equation `‖clamp(soft(v, θ))‖₁ = radius` between consecutive breakpoints.
pub(crate) fn project_box_l1_in_place(v: &mut [f64], lo: f64, hi: f64, radius: f64) {
    let cap = |a: f64| if a >= 0.0 { hi } else { -lo };
    let mass = |theta: f64| -> f64 { v.iter().map(|&a| (a.abs() - theta).max(0.0).min(cap(a))).sum() };
    let mut theta = 0.0;
    let total = mass(0.0);
    if total > radius {
        let mut knots: Vec<f64> = v
            .iter()
            .flat_map(|&a| [a.abs(), a.abs() - cap(a)])
            .filter(|&t| t > 0.0)
            .collect();
        knots.push(0.0);
        knots.sort_by(f64::total_cmp);
        knots.dedup();
        // mass(knots[lo_i]) > radius >= mass(knots[hi_i])
        let (mut lo_i, mut hi_i) = (0, knots.len() - 1);
        let mut m_lo = total;
        let mut m_hi = mass(knots[hi_i]);
        while hi_i - lo_i > 1 {
            let mid = (lo_i + hi_i) / 2;
            let m = mass(knots[mid]);
            if m > radius {
                lo_i = mid;
                m_lo = m;
            } else {
                hi_i = mid;
                m_hi = m;
            }
        }
        let (t0, t1) = (knots[lo_i], knots[hi_i]);
        theta = t0 + (m_lo - radius) * (t1 - t0) / (m_lo - m_hi);
    }
    for a in v.iter_mut() {
        *a = a.signum() * (a.abs() - theta).max(0.0).min(cap(*a));
    }
}
