//! Stochastic linearized Bregman iterations on the dual variable.
//!
//! One step with experiment `k`:
//!
//! ```text
//! x̃ ← x̃ − t_k (A_kᵀ(A_k x − y_k) + λ²(x − g))
//! x ← P_C(x̃)
//! ```
//!
//! with `λ = 0` for the plain iteration and the dynamic steplength
//! `t_k = ‖residual‖² / ‖gradient‖²`, capped at `t_max`.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::grid::{Grid, Shape};
use crate::linops::{LinearOp, LinearOperator, Space};
use crate::net::{Generator, LatentVec, NetWeights};
use crate::projections::{is_feasible, project_intersection, ConstraintStack};
use crate::rng::{self, Tag};

/// Gradients with squared norm below this are treated as zero.
pub const GRADIENT_FLOOR: f64 = 1e-30;

/// One source experiment: an operator and its observed data.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearExperiment {
    pub op: LinearOp,
    pub data: Vec<f64>,
}

impl LinearExperiment {
    pub fn new(op: LinearOp, data: Vec<f64>) -> Result<Self> {
        if !matches!(op.domain(), Space::Grid(_)) {
            return shape_err(format!("experiment operator must act on grids, domain is {}", op.domain()));
        }
        if op.range().len() != data.len() {
            return shape_err(format!(
                "experiment data has {} values, operator range is {}",
                data.len(),
                op.range()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return invalid("experiment data must be finite");
        }
        Ok(Self { op, data })
    }

    pub fn model_shape(&self) -> Shape {
        match self.op.domain() {
            Space::Grid(s) => s,
            Space::Vector(_) => unreachable!("checked at construction"),
        }
    }

    /// `A x − y`
    pub fn residual(&self, x: &Grid) -> Result<Vec<f64>> {
        let mut r = self.op.apply_grid(x)?;
        for (ri, yi) in r.iter_mut().zip(&self.data) {
            *ri -= yi;
        }
        Ok(r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BregmanConfig {
    pub t_max: f64,
    /// Use the stacked data-plus-prior residual for the steplength of the
    /// augmented iteration; otherwise only the data term.
    pub augmented_steplength: bool,
}

impl Default for BregmanConfig {
    fn default() -> Self {
        Self {
            t_max: 10.0,
            augmented_steplength: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BregmanState {
    pub x_dual: Grid,
    pub x_primal: Grid,
    pub iter: usize,
}

impl BregmanState {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            x_dual: Grid::zeros(shape.rows, shape.cols),
            x_primal: Grid::zeros(shape.rows, shape.cols),
            iter: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Steplength {
    pub value: f64,
    /// The gradient vanished; the step is a no-op.
    pub skipped: bool,
}

/// `‖residual‖² / ‖gradient‖²`, capped at `t_max`.
pub fn dynamic_steplength(residual_sq: f64, gradient: &Grid, t_max: f64) -> Steplength {
    let g2 = gradient.dot(gradient);
    if g2 < GRADIENT_FLOOR {
        return Steplength {
            value: 0.0,
            skipped: true,
        };
    }
    Steplength {
        value: (residual_sq / g2).min(t_max),
        skipped: false,
    }
}

/// Per-step diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Iteration count after this step.
    pub iter: usize,
    pub experiment: usize,
    pub steplength: f64,
    pub skipped: bool,
    /// `‖A_k x − y_k‖` at the pre-step primal.
    pub residual_norm: f64,
    /// `½‖A_k x − y_k‖² + (λ²/2)‖x − g‖²` at the pre-step primal, for λ > 0.
    pub joint_objective: Option<f64>,
    /// Largest constraint violation of the post-step primal.
    pub max_violation: f64,
    pub projection_converged: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveTrace {
    pub records: Vec<StepRecord>,
}

impl SolveTrace {
    pub const CSV_HEADER: &'static str = "iter,k,t_k,residual_norm,joint_objective";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let joint = r.joint_objective.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.iter, r.experiment, r.steplength, r.residual_norm, joint
            );
        }
        out
    }
}

fn abort(state: &BregmanState, what: &str) -> Error {
    Error::Numerical(format!(
        "{what} at Bregman iteration {} (‖x̃‖ = {}, ‖x‖ = {})",
        state.iter,
        state.x_dual.norm2(),
        state.x_primal.norm2()
    ))
}

/// Prior pull for the augmented iteration: the generator output `g(z, w)`
/// and the trade-off weight λ.
#[derive(Clone, Copy, Debug)]
pub struct PriorPull<'a> {
    pub target: &'a Grid,
    pub lambda: f64,
}

fn step_impl(
    state: &BregmanState,
    experiment: &LinearExperiment,
    k: usize,
    prior: Option<PriorPull<'_>>,
    stack: &ConstraintStack,
    cfg: &BregmanConfig,
) -> Result<(BregmanState, StepRecord)> {
    state.x_primal.check_same_shape(&state.x_dual, "Bregman state")?;
    if experiment.model_shape() != state.x_primal.shape() {
        return shape_err(format!(
            "experiment acts on {}, state is {}",
            experiment.model_shape(),
            state.x_primal.shape()
        ));
    }
    let residual = experiment.residual(&state.x_primal)?;
    let res_sq: f64 = residual.iter().map(|r| r * r).sum();
    let mut gradient = experiment.op.adjoint_grid(&residual)?;

    let mut joint_objective = None;
    let mut num = res_sq;
    if let Some(PriorPull { target, lambda }) = prior {
        target.check_same_shape(&state.x_primal, "prior target")?;
        let l2 = lambda * lambda;
        let diff = state.x_primal.sub(target);
        let diff_sq = diff.dot(&diff);
        joint_objective = Some(0.5 * res_sq + 0.5 * l2 * diff_sq);
        gradient.axpy(l2, &diff);
        if cfg.augmented_steplength {
            num += l2 * diff_sq;
        }
    }

    let t = if prior.is_some() && !cfg.augmented_steplength {
        // data-term-only steplength, measured against the data gradient
        let data_grad = experiment.op.adjoint_grid(&residual)?;
        dynamic_steplength(res_sq, &data_grad, cfg.t_max)
    } else {
        dynamic_steplength(num, &gradient, cfg.t_max)
    };
    if !(res_sq.is_finite() && t.value.is_finite() && gradient.is_finite()) {
        return Err(abort(state, "non-finite residual or gradient"));
    }

    let mut next = state.clone();
    next.iter += 1;
    let mut projection_converged = true;
    if t.value > 0.0 {
        next.x_dual.axpy(-t.value, &gradient);
        let proj = project_intersection(&next.x_dual, stack)?;
        projection_converged = proj.converged;
        next.x_primal = proj.point;
        if !next.x_dual.is_finite() || !next.x_primal.is_finite() {
            return Err(abort(state, "non-finite iterate"));
        }
    }
    let feas = is_feasible(&next.x_primal, stack, stack.dykstra_tol);
    let record = StepRecord {
        iter: next.iter,
        experiment: k,
        steplength: t.value,
        skipped: t.skipped,
        residual_norm: res_sq.sqrt(),
        joint_objective,
        max_violation: feas.max_violation(),
        projection_converged,
    };
    Ok((next, record))
}

/// Plain step: `x̃ ← x̃ − t_k A_kᵀ(A_k x − y_k)`, `x ← P_C(x̃)`.
pub fn bregman_step(
    state: &BregmanState,
    experiment: &LinearExperiment,
    k: usize,
    stack: &ConstraintStack,
    cfg: &BregmanConfig,
) -> Result<(BregmanState, StepRecord)> {
    step_impl(state, experiment, k, None, stack, cfg)
}

/// Step augmented with the deep-prior pull `λ²(x − g)`. With `λ = 0` this is
/// exactly [`bregman_step`].
pub fn bregman_step_augmented(
    state: &BregmanState,
    experiment: &LinearExperiment,
    k: usize,
    prior: PriorPull<'_>,
    stack: &ConstraintStack,
    cfg: &BregmanConfig,
) -> Result<(BregmanState, StepRecord)> {
    if !(prior.lambda >= 0.0) {
        return invalid(format!("lambda must be non-negative, got {}", prior.lambda));
    }
    if prior.lambda == 0.0 {
        return bregman_step(state, experiment, k, stack, cfg);
    }
    step_impl(state, experiment, k, Some(prior), stack, cfg)
}

/// Uniform draw of an index in `0..len` for step `step` of stream `stream`.
/// Counter-based, so any step can be reproduced in isolation.
pub fn draw_index(seed: u64, stream: u64, step: u64, len: usize) -> usize {
    rng::stream(seed, Tag::ExperimentDraw, &[stream, step]).random_range(0..len)
}

/// `iters` plain steps from `state`, drawing experiments uniformly with
/// replacement.
pub fn run_bregman_from(
    mut state: BregmanState,
    bank: &[LinearExperiment],
    stack: &ConstraintStack,
    iters: usize,
    seed: u64,
    cfg: &BregmanConfig,
) -> Result<(BregmanState, SolveTrace)> {
    if bank.is_empty() {
        return invalid("experiment bank is empty");
    }
    let mut trace = SolveTrace::default();
    for _ in 0..iters {
        let k = draw_index(seed, 0, state.iter as u64, bank.len());
        let (next, record) = bregman_step(&state, &bank[k], k, stack, cfg)?;
        state = next;
        trace.records.push(record);
    }
    Ok((state, trace))
}

/// Plain inversion from `x̃ = x = 0`.
pub fn run_bregman(
    bank: &[LinearExperiment],
    stack: &ConstraintStack,
    iters: usize,
    seed: u64,
    cfg: &BregmanConfig,
) -> Result<(BregmanState, SolveTrace)> {
    let shape = bank
        .first()
        .map(LinearExperiment::model_shape)
        .ok_or_else(|| Error::InvalidInput("experiment bank is empty".into()))?;
    run_bregman_from(BregmanState::zeros(shape), bank, stack, iters, seed, cfg)
}

/// `½ Σ_i ‖y_i − A_i x‖²` over the whole bank.
pub fn eval_lsq_objective(bank: &[LinearExperiment], x: &Grid) -> Result<f64> {
    let mut total = 0.0;
    for e in bank {
        let r = e.residual(x)?;
        total += 0.5 * r.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total)
}

/// Data misfit over the bank plus `(λ²/2)‖x − g(z, w)‖²`.
pub fn eval_joint_objective(
    bank: &[LinearExperiment],
    x: &Grid,
    net: &Generator,
    w: &NetWeights,
    z: &LatentVec,
    lambda: f64,
) -> Result<f64> {
    if !(lambda >= 0.0) {
        return invalid(format!("lambda must be non-negative, got {lambda}"));
    }
    let data = eval_lsq_objective(bank, x)?;
    let g = net.forward(w, z)?;
    x.check_same_shape(&g, "joint objective")?;
    let d = x.sub(&g);
    Ok(data + 0.5 * lambda * lambda * d.dot(&d))
}
