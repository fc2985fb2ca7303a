//! Expectation-maximization training of the deep prior.
//!
//! The bank is split into `n` disjoint tuples. Each round runs
//!
//! 1. E-step, per tuple and in parallel: augmented Bregman steps on the
//!    tuple's slack model `x_i` pulled towards `g(z_i, w)`, then Langevin
//!    sampling of `z_i` given `x_i`;
//! 2. M-step: a gradient step on `(1/n) Σ_i ‖x_i − g(z_i, w)‖²` with the
//!    per-tuple gradients reduced in ascending tuple order.
//!
//! All randomness is keyed by tuple id and iteration counters, so a run is
//! independent of thread scheduling and can be resumed from any round.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::bregman::{
    bregman_step_augmented, draw_index, BregmanConfig, BregmanState, LinearExperiment, PriorPull, SolveTrace,
};
use crate::error::{invalid, Error, Result};
use crate::grid::Grid;
use crate::io::{read_portable_grid, write_portable_grid};
use crate::net::{read_checkpoint, write_checkpoint, Generator, LatentVec, NetArch, NetWeights};
use crate::projections::{is_feasible, ConstraintStack};
use crate::rng::{self, Tag};
use crate::sgld::{sgld_run, SgldParams};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTuple {
    pub id: usize,
    pub experiment_ids: Vec<usize>,
    pub state: BregmanState,
    pub z: LatentVec,
}

/// Linear ramp from `initial` to `target` over `ramp_rounds`, then constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaSchedule {
    pub initial: f64,
    pub target: f64,
    pub ramp_rounds: usize,
}

impl LambdaSchedule {
    pub fn constant(lambda: f64) -> Self {
        Self {
            initial: lambda,
            target: lambda,
            ramp_rounds: 0,
        }
    }

    pub fn at(&self, round: usize) -> f64 {
        ramp(self.initial, self.target, self.ramp_rounds, round)
    }
}

fn ramp(from: f64, to: f64, rounds: usize, round: usize) -> f64 {
    if round >= rounds {
        to
    } else {
        from + (to - from) * round as f64 / rounds as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossNorm {
    /// Divide the summed loss by the tuple count.
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub tuples: usize,
    pub rounds: usize,
    pub bregman_steps_per_round: usize,
    pub sgld: SgldParams,
    pub lambda: LambdaSchedule,
    pub eta: f64,
    pub m_steps_per_round: usize,
    pub loss: LossNorm,
    /// Final multiplier of the ball radii, reached with the same ramp as λ.
    pub radius_growth: f64,
    pub bregman: BregmanConfig,
    /// Experiment draws, latent initialization and Langevin noise.
    pub seed: u64,
    pub net_seed: u64,
    pub init_scale: f64,
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tuples: 8,
            rounds: 50,
            bregman_steps_per_round: 8,
            sgld: SgldParams::default(),
            lambda: LambdaSchedule {
                initial: 0.1,
                target: 1.0,
                ramp_rounds: 25,
            },
            eta: 1e-4,
            m_steps_per_round: 1,
            loss: LossNorm::Mean,
            radius_growth: 1.0,
            bregman: BregmanConfig::default(),
            seed: 5,
            net_seed: 6,
            init_scale: 1.0,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, bank_len: usize) -> Result<()> {
        if self.tuples == 0 {
            return invalid("tuple count must be at least 1");
        }
        if self.tuples > bank_len {
            return invalid(format!("tuple count {} exceeds bank size {bank_len}", self.tuples));
        }
        self.sgld.validate()?;
        if !(self.lambda.initial >= 0.0 && self.lambda.target >= 0.0) {
            return invalid("lambda schedule must be non-negative");
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return invalid(format!("weight steplength must be non-negative, got {}", self.eta));
        }
        if !(self.radius_growth > 0.0 && self.radius_growth.is_finite()) {
            return invalid(format!("radius growth must be positive, got {}", self.radius_growth));
        }
        if !(self.init_scale > 0.0) {
            return invalid(format!("init scale must be positive, got {}", self.init_scale));
        }
        Ok(())
    }

    pub fn radius_scale(&self, round: usize) -> f64 {
        ramp(1.0, self.radius_growth, self.lambda.ramp_rounds, round)
    }
}

/// Round-robin partition of the bank into `n` tuples with zero models and
/// standard normal latents.
pub fn init_tuples(bank: &[LinearExperiment], n: usize, latent_dim: usize, seed: u64) -> Result<Vec<TrainTuple>> {
    if n == 0 || n > bank.len() {
        return invalid(format!("tuple count must lie in 1..={}, got {n}", bank.len()));
    }
    let shape = bank[0].model_shape();
    Ok((0..n)
        .map(|i| TrainTuple {
            id: i,
            experiment_ids: (i..bank.len()).step_by(n).collect(),
            state: BregmanState::zeros(shape),
            z: LatentVec::standard_normal(&mut rng::stream(seed, Tag::Latent, &[i as u64]), latent_dim),
        })
        .collect())
}

/// Settings of one E-step.
#[derive(Clone, Copy, Debug)]
pub struct EStep<'a> {
    pub round: usize,
    pub lambda: f64,
    pub steps: usize,
    pub sgld: &'a SgldParams,
    pub bregman: &'a BregmanConfig,
    pub seed: u64,
    pub parallel: bool,
}

fn e_step_tuple(
    tuple: &mut TrainTuple,
    bank: &[LinearExperiment],
    stack: &ConstraintStack,
    net: &Generator,
    w: &NetWeights,
    p: &EStep<'_>,
) -> Result<SolveTrace> {
    let mut trace = SolveTrace::default();
    let target = if p.lambda > 0.0 && p.steps > 0 {
        net.forward(w, &tuple.z)?
    } else {
        Grid::zeros(tuple.state.x_primal.rows(), tuple.state.x_primal.cols())
    };
    let prior = PriorPull {
        target: &target,
        lambda: p.lambda,
    };
    let subset = &tuple.experiment_ids;
    for _ in 0..p.steps {
        let pick = draw_index(p.seed, tuple.id as u64, tuple.state.iter as u64, subset.len());
        let k = subset[pick];
        let (next, record) = bregman_step_augmented(&tuple.state, &bank[k], k, prior, stack, p.bregman)?;
        tuple.state = next;
        trace.records.push(record);
    }
    if p.sgld.steps > 0 {
        let mut stream = rng::stream(p.seed, Tag::Sgld, &[tuple.id as u64, p.round as u64]);
        tuple.z = sgld_run(&tuple.z, &tuple.state.x_primal, net, w, p.lambda, p.sgld, &mut stream)?.0;
    }
    Ok(trace)
}

/// Bregman steps then Langevin sampling for every tuple. Weights are read
/// only. Returns the Bregman trace of each tuple.
pub fn e_step(
    tuples: &mut [TrainTuple],
    bank: &[LinearExperiment],
    stack: &ConstraintStack,
    net: &Generator,
    w: &NetWeights,
    p: &EStep<'_>,
) -> Result<Vec<SolveTrace>> {
    let run = |t: &mut TrainTuple| e_step_tuple(t, bank, stack, net, w, p);
    let traces: Vec<Result<SolveTrace>> = if p.parallel {
        tuples.par_iter_mut().map(run).collect()
    } else {
        tuples.iter_mut().map(run).collect()
    };
    traces.into_iter().collect()
}

/// Outcome of one weight update.
#[derive(Clone, Debug, PartialEq)]
pub struct MStep {
    pub weights: NetWeights,
    /// Normalized loss before the update.
    pub loss: f64,
    pub per_tuple_loss: Vec<f64>,
}

/// One gradient step on `Σ_i ‖x_i − g(z_i, w)‖²`, divided by `n` for
/// [`LossNorm::Mean`].
pub fn m_step(
    tuples: &[TrainTuple],
    net: &Generator,
    w: &NetWeights,
    eta: f64,
    norm: LossNorm,
    parallel: bool,
) -> Result<MStep> {
    if tuples.is_empty() {
        return invalid("m-step needs at least one tuple");
    }
    let scale = match norm {
        LossNorm::Mean => 1.0 / tuples.len() as f64,
        LossNorm::Sum => 1.0,
    };
    let grad_one = |t: &TrainTuple| -> Result<(f64, NetWeights)> {
        let mut loss = 0.0;
        let (_, _, gw) = net.forward_backward(w, &t.z, |g| {
            let diff = g.sub(&t.state.x_primal);
            loss = diff.dot(&diff);
            diff.scaled(2.0 * scale)
        })?;
        Ok((loss, gw))
    };
    let parts: Vec<Result<(f64, NetWeights)>> = if parallel {
        tuples.par_iter().map(grad_one).collect()
    } else {
        tuples.iter().map(grad_one).collect()
    };
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;

    let mut grad = NetWeights::zeros(w.len());
    let mut per_tuple_loss = Vec::with_capacity(parts.len());
    for (loss, gw) in &parts {
        grad.axpy(1.0, gw);
        per_tuple_loss.push(*loss);
    }
    let loss = scale * per_tuple_loss.iter().sum::<f64>();
    if !grad.is_finite() || !loss.is_finite() {
        let report = per_tuple_loss
            .iter()
            .enumerate()
            .map(|(i, l)| format!("tuple {i}: {l:e}"))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::Numerical(format!("non-finite weight gradient ({report})")));
    }
    let mut weights = w.clone();
    weights.axpy(-eta, &grad);
    Ok(MStep {
        weights,
        loss,
        per_tuple_loss,
    })
}

/// Per-round diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub lambda: f64,
    pub radius_scale: f64,
    /// Mean over tuples of `‖A_S x_i − y_S‖` on the tuple's own experiments.
    pub data_misfit: f64,
    /// Mean over tuples of `‖x_i − g(z_i, w)‖` after the round.
    pub prior_misfit: f64,
    /// Normalized M-step loss before the first update of the round.
    pub m_loss: f64,
    pub max_violation: f64,
}

pub const ROUND_CSV_HEADER: &str = "round,lambda,radius_scale,data_misfit,prior_misfit,m_loss,max_violation";

pub fn rounds_to_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from(ROUND_CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.round, r.lambda, r.radius_scale, r.data_misfit, r.prior_misfit, r.m_loss, r.max_violation
        );
    }
    out
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of completed rounds.
    pub round: usize,
    pub weights: NetWeights,
    pub tuples: Vec<TrainTuple>,
}

pub fn initial_state(bank: &[LinearExperiment], net: &Generator, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate(bank.len())?;
    Ok(TrainState {
        round: 0,
        weights: net.init(cfg.net_seed, cfg.init_scale)?,
        tuples: init_tuples(bank, cfg.tuples, net.latent_dim(), cfg.seed)?,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutput {
    pub rounds: Vec<RoundRecord>,
    /// Concatenated Bregman records, one trace per tuple.
    pub bregman: Vec<SolveTrace>,
}

fn tuple_misfits(
    t: &TrainTuple,
    bank: &[LinearExperiment],
    net: &Generator,
    w: &NetWeights,
) -> Result<(f64, f64)> {
    let mut data = 0.0;
    for &k in &t.experiment_ids {
        data += bank[k].residual(&t.state.x_primal)?.iter().map(|r| r * r).sum::<f64>();
    }
    let g = net.forward(w, &t.z)?;
    Ok((data.sqrt(), t.state.x_primal.distance(&g)))
}

/// Runs the remaining rounds of `cfg.rounds` starting from `state`.
/// `on_round` sees the state after every completed round together with the
/// round's Bregman records per tuple and may persist them; an error from it
/// stops training.
pub fn train_from(
    state: &mut TrainState,
    bank: &[LinearExperiment],
    stack: &ConstraintStack,
    net: &Generator,
    cfg: &TrainConfig,
    mut on_round: impl FnMut(&TrainState, &RoundRecord, &[SolveTrace]) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate(bank.len())?;
    stack.validate()?;
    let mut out = TrainOutput {
        rounds: Vec::new(),
        bregman: vec![SolveTrace::default(); state.tuples.len()],
    };
    while state.round < cfg.rounds {
        let round = state.round;
        let lambda = cfg.lambda.at(round);
        let radius_scale = cfg.radius_scale(round);
        let round_stack = if radius_scale == 1.0 {
            stack.clone()
        } else {
            stack.with_radius_scale(radius_scale)
        };
        let p = EStep {
            round,
            lambda,
            steps: cfg.bregman_steps_per_round,
            sgld: &cfg.sgld,
            bregman: &cfg.bregman,
            seed: cfg.seed,
            parallel: cfg.parallel,
        };
        let traces = e_step(&mut state.tuples, bank, &round_stack, net, &state.weights, &p)?;

        let mut m_loss = f64::NAN;
        for s in 0..cfg.m_steps_per_round {
            let m = m_step(&state.tuples, net, &state.weights, cfg.eta, cfg.loss, cfg.parallel)?;
            if s == 0 {
                m_loss = m.loss;
            }
            state.weights = m.weights;
        }

        let mut data = 0.0;
        let mut prior = 0.0;
        let mut max_violation: f64 = 0.0;
        for t in &state.tuples {
            let (d, p) = tuple_misfits(t, bank, net, &state.weights)?;
            data += d;
            prior += p;
            max_violation = max_violation.max(is_feasible(&t.state.x_primal, &round_stack, 0.0).max_violation());
        }
        let n = state.tuples.len() as f64;
        let record = RoundRecord {
            round,
            lambda,
            radius_scale,
            data_misfit: data / n,
            prior_misfit: prior / n,
            m_loss,
            max_violation,
        };
        state.round += 1;
        on_round(state, &record, &traces)?;
        out.rounds.push(record);
        for (all, t) in out.bregman.iter_mut().zip(traces) {
            all.records.extend(t.records);
        }
    }
    Ok(out)
}

/// Fresh training run from initial weights and tuples.
pub fn train(
    bank: &[LinearExperiment],
    stack: &ConstraintStack,
    arch: &NetArch,
    cfg: &TrainConfig,
) -> Result<(TrainState, TrainOutput)> {
    let net = Generator::new(arch.clone())?;
    let mut state = initial_state(bank, &net, cfg)?;
    let out = train_from(&mut state, bank, stack, &net, cfg, |_, _, _| Ok(()))?;
    Ok((state, out))
}

pub const WEIGHTS_FILE: &str = "weights.dpnw";
pub const TUPLES_FILE: &str = "tuples.csv";

fn tuple_grid_name(id: usize, which: &str) -> String {
    format!("tuple_{id:03}_{which}.pgrd")
}

/// Writes weights, per-tuple primal and dual grids and a CSV with the round
/// counter, iteration counts, experiment subsets and latents.
pub fn save_train_state(dir: &Path, arch: &NetArch, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_checkpoint(&dir.join(WEIGHTS_FILE), arch, &state.weights)?;
    let mut csv = String::from("round,id,iter,experiments,z\n");
    for t in &state.tuples {
        write_portable_grid(&t.state.x_primal, &dir.join(tuple_grid_name(t.id, "primal")))?;
        write_portable_grid(&t.state.x_dual, &dir.join(tuple_grid_name(t.id, "dual")))?;
        let exps = t.experiment_ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        let z = t.z.0.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(csv, "{},{},{},{exps},{z}", state.round, t.id, t.state.iter);
    }
    fs::write(dir.join(TUPLES_FILE), csv)?;
    Ok(())
}

pub fn load_train_state(dir: &Path, arch: &NetArch) -> Result<TrainState> {
    let weights = read_checkpoint(&dir.join(WEIGHTS_FILE), arch)?;
    let text = fs::read_to_string(dir.join(TUPLES_FILE))?;
    let mut round = 0;
    let mut tuples = Vec::new();
    let mut offset = 0;
    for (n, line) in text.split_inclusive('\n').enumerate() {
        let here = offset;
        offset += line.len();
        if n == 0 || line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            offset: here,
            msg: format!("{TUPLES_FILE}: {msg}"),
        };
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 5 {
            return Err(bad("expected 5 columns"));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
        round = int(fields[0])?;
        let id = int(fields[1])?;
        let iter = int(fields[2])?;
        let experiment_ids = fields[3].split_whitespace().map(int).collect::<Result<Vec<_>>>()?;
        let z = fields[4]
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| bad("bad latent value")))
            .collect::<Result<Vec<_>>>()?;
        if z.len() != arch.latent_dim {
            return Err(bad("latent length does not match the architecture"));
        }
        let x_primal = read_portable_grid(&dir.join(tuple_grid_name(id, "primal")))?;
        let x_dual = read_portable_grid(&dir.join(tuple_grid_name(id, "dual")))?;
        tuples.push(TrainTuple {
            id,
            experiment_ids,
            state: BregmanState { x_dual, x_primal, iter },
            z: LatentVec(z),
        });
    }
    if tuples.is_empty() {
        return invalid(format!("{TUPLES_FILE} lists no tuples"));
    }
    Ok(TrainState { round, weights, tuples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Shape;
    use crate::linops::LinearOp;
    use crate::projections::ConstraintSpec;

    fn bank(n: usize) -> Vec<LinearExperiment> {
        let shape = Shape::new(2, 2);
        (0..n)
            .map(|k| LinearExperiment::new(LinearOp::identity(shape), vec![k as f64 * 0.1; 4]).unwrap())
            .collect()
    }

    #[test]
    fn round_robin_partition() {
        let b = bank(7);
        let t = init_tuples(&b, 3, 4, 0).unwrap();
        assert_eq!(t[0].experiment_ids, vec![0, 3, 6]);
        assert_eq!(t[1].experiment_ids, vec![1, 4]);
        assert_eq!(t[2].experiment_ids, vec![2, 5]);
        assert_eq!(init_tuples(&b, 7, 4, 0).unwrap()[4].experiment_ids, vec![4]);
        assert_eq!(init_tuples(&b, 1, 4, 0).unwrap()[0].experiment_ids, (0..7).collect::<Vec<_>>());
        assert!(init_tuples(&b, 8, 4, 0).is_err());
        assert!(init_tuples(&b, 0, 4, 0).is_err());
    }

    #[test]
    fn schedule_ramps_then_holds() {
        let s = LambdaSchedule {
            initial: 0.0,
            target: 2.0,
            ramp_rounds: 4,
        };
        let got: Vec<f64> = (0..6).map(|r| s.at(r)).collect();
        assert_eq!(got, vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.0]);
        assert_eq!(LambdaSchedule::constant(0.3).at(0), 0.3);
    }

    #[test]
    fn scalar_linear_m_step() {
        let net = Generator::new(NetArch::dense(1, 1, 1, false)).unwrap();
        let w = NetWeights::zeros(1);
        let tuple = TrainTuple {
            id: 0,
            experiment_ids: vec![0],
            state: BregmanState {
                x_dual: Grid::filled(1, 1, 1.0),
                x_primal: Grid::filled(1, 1, 1.0),
                iter: 0,
            },
            z: LatentVec(vec![1.0]),
        };
        let m = m_step(&[tuple.clone()], &net, &w, 0.5, LossNorm::Mean, false).unwrap();
        assert_eq!(m.weights.flat, vec![1.0]);
        assert_eq!(m.loss, 1.0);
        let frozen = m_step(&[tuple], &net, &w, 0.0, LossNorm::Mean, false).unwrap();
        assert_eq!(frozen.weights, w);
    }

    #[test]
    fn fitted_tuples_leave_weights_alone() {
        let net = Generator::new(NetArch::dense(2, 2, 2, true)).unwrap();
        let w = net.init(0, 1.0).unwrap();
        let tuples: Vec<TrainTuple> = (0..3)
            .map(|i| {
                let z = LatentVec(vec![i as f64, 1.0 - i as f64]);
                let x = net.forward(&w, &z).unwrap();
                TrainTuple {
                    id: i,
                    experiment_ids: vec![i],
                    state: BregmanState {
                        x_dual: x.clone(),
                        x_primal: x,
                        iter: 0,
                    },
                    z,
                }
            })
            .collect();
        let m = m_step(&tuples, &net, &w, 0.1, LossNorm::Sum, true).unwrap();
        assert_eq!(m.weights, w);
    }

    #[test]
    fn idle_e_step_changes_nothing() {
        let b = bank(4);
        let net = Generator::new(NetArch::dense(3, 2, 2, false)).unwrap();
        let w = net.init(0, 1.0).unwrap();
        let stack = ConstraintStack::new(vec![ConstraintSpec::Box { lo: -1.0, hi: 1.0 }]).unwrap();
        let mut tuples = init_tuples(&b, 2, 3, 9).unwrap();
        let before = tuples.clone();
        let sgld = SgldParams { steps: 0, ..SgldParams::default() };
        let p = EStep {
            round: 0,
            lambda: 1.0,
            steps: 0,
            sgld: &sgld,
            bregman: &BregmanConfig::default(),
            seed: 1,
            parallel: false,
        };
        e_step(&mut tuples, &b, &stack, &net, &w, &p).unwrap();
        assert_eq!(tuples, before);
    }

    #[test]
    fn zero_rounds_returns_initial_state() {
        let b = bank(4);
        let stack = ConstraintStack::new(vec![ConstraintSpec::Box { lo: -1.0, hi: 1.0 }]).unwrap();
        let arch = NetArch::dense(3, 2, 2, true);
        let cfg = TrainConfig {
            tuples: 2,
            rounds: 0,
            ..TrainConfig::default()
        };
        let (state, out) = train(&b, &stack, &arch, &cfg).unwrap();
        let net = Generator::new(arch).unwrap();
        assert_eq!(state, initial_state(&b, &net, &cfg).unwrap());
        assert!(out.rounds.is_empty());
    }

    #[test]
    fn invalid_configs() {
        let cfg = TrainConfig::default();
        assert!(cfg.validate(4).is_err());
        assert!(TrainConfig { tuples: 0, ..cfg.clone() }.validate(10).is_err());
        assert!(TrainConfig { eta: -1.0, ..cfg.clone() }.validate(10).is_err());
        assert!(cfg.validate(10).is_ok());
    }
}
