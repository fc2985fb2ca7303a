use super::{project_box_l1_in_place, project_box_tv, ConstraintSpec, ConstraintStack};
use crate::error::Result;
use crate::grid::Grid;

#[derive(Clone, Debug, PartialEq)]
pub struct Feasibility {
    pub feasible: bool,
    /// One entry per set of the stack, in stack order.
    pub violations: Vec<f64>,
}

impl Feasibility {
    pub fn max_violation(&self) -> f64 {
        self.violations.iter().copied().fold(0.0, f64::max)
    }
}

pub fn is_feasible(x: &Grid, stack: &ConstraintStack, tol: f64) -> Feasibility {
    let violations: Vec<f64> = stack.sets.iter().map(|s| s.violation(x)).collect();
    Feasibility {
        feasible: violations.iter().all(|&v| v <= tol),
        violations,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntersectionProjection {
    pub point: Grid,
    pub converged: bool,
    pub iterations: usize,
    /// Per-set violation of the returned point.
    pub violations: Vec<f64>,
}

fn box_l1_pair(sets: &[ConstraintSpec]) -> Option<(f64, f64, f64)> {
    match *sets {
        [ConstraintSpec::Box { lo, hi }, ConstraintSpec::L1Ball { radius }]
        | [ConstraintSpec::L1Ball { radius }, ConstraintSpec::Box { lo, hi }]
            if lo <= 0.0 && hi >= 0.0 =>
        {
            Some((lo, hi, radius))
        }
        _ => None,
    }
}

fn box_tv_pair(sets: &[ConstraintSpec]) -> Option<(f64, f64, f64)> {
    match *sets {
        [ConstraintSpec::Box { lo, hi }, ConstraintSpec::TvBall { radius }]
        | [ConstraintSpec::TvBall { radius }, ConstraintSpec::Box { lo, hi }] => Some((lo, hi, radius)),
        _ => None,
    }
}

/// Dykstra's alternating projections onto the intersection of the stack.
///
/// Stops once every set is satisfied to `dykstra_tol` and the sweep-to-sweep
/// change of both the iterate and the correction terms is below
/// `dykstra_tol · max(1, ‖x‖)`. A point already inside all
/// sets is returned as is. A single-set stack is projected directly. Two
/// pairs have dedicated solvers: a box containing 0 with an ℓ1 ball (closed
/// form), and a box with a TV ball (one dual solve).
pub fn project_intersection(x: &Grid, stack: &ConstraintStack) -> Result<IntersectionProjection> {
    stack.validate()?;
    let tol = stack.dykstra_tol;

    let exact = is_feasible(x, stack, 0.0);
    if exact.feasible {
        return Ok(IntersectionProjection {
            point: x.clone(),
            converged: true,
            iterations: 0,
            violations: exact.violations,
        });
    }
    if let [only] = stack.sets.as_slice() {
        let point = only.project(x, &stack.tv)?;
        let violations = vec![only.violation(&point)];
        return Ok(IntersectionProjection {
            point,
            converged: true,
            iterations: 1,
            violations,
        });
    }

    if let Some((lo, hi, radius)) = box_l1_pair(&stack.sets) {
        let mut point = x.clone();
        project_box_l1_in_place(point.as_mut_slice(), lo, hi, radius);
        let violations = stack.sets.iter().map(|s| s.violation(&point)).collect();
        return Ok(IntersectionProjection {
            point,
            converged: true,
            iterations: 1,
            violations,
        });
    }

    if let Some((lo, hi, radius)) = box_tv_pair(&stack.sets) {
        let p = project_box_tv(x, lo, hi, radius, stack.tv.tol, stack.tv.max_iters)?;
        let violations = stack.sets.iter().map(|s| s.violation(&p.point)).collect();
        return Ok(IntersectionProjection {
            point: p.point,
            converged: p.converged,
            iterations: p.iterations,
            violations,
        });
    }

    let mut current = x.clone();
    let mut increments = vec![Grid::zeros(x.rows(), x.cols()); stack.sets.len()];
    let mut iterations = 0;
    let mut converged = false;
    let mut violations = Vec::new();
    for it in 1..=stack.dykstra_max_iters {
        iterations = it;
        let previous = current.clone();
        let mut inc_change = 0.0;
        for (set, inc) in stack.sets.iter().zip(increments.iter_mut()) {
            let shifted = current.add(inc);
            let projected = set.project(&shifted, &stack.tv)?;
            let next_inc = shifted.sub(&projected);
            inc_change += next_inc.distance(inc).powi(2);
            *inc = next_inc;
            current = projected;
        }
        let feas = is_feasible(&current, stack, tol);
        violations = feas.violations;
        let change = current.distance(&previous).max(inc_change.sqrt());
        if feas.feasible && change <= tol * current.norm2().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok(IntersectionProjection {
        point: current,
        converged,
        iterations,
        violations,
    })
}
