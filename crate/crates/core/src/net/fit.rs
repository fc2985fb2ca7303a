//! Strong deep prior: fit `w` so that `A g(z, w)` matches the data for one
//! fixed latent draw.

use super::{Generator, LatentVec, NetWeights};
use crate::error::{invalid, shape_err, Error, Result};
use crate::grid::Grid;
use crate::linops::{LinearOp, LinearOperator, Space};
use crate::rng::{self, Tag};

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub weights: NetWeights,
    pub z: LatentVec,
    /// `½‖y − A g(z, w)‖²` before each update, plus the final value.
    pub losses: Vec<f64>,
}

/// Gradient descent on `½‖y − A g(z, w)‖²` over `w`, with `z ~ N(0, I)` drawn
/// once from `seed` and weights initialized from the same seed.
pub fn fit_strong(
    y: &[f64],
    op: &LinearOp,
    net: &Generator,
    seed: u64,
    init_scale: f64,
    iters: usize,
    step: f64,
) -> Result<FitResult> {
    if !(step >= 0.0) {
        return invalid(format!("step must be non-negative, got {step}"));
    }
    if op.domain() != Space::Grid(net.output_shape()) {
        return shape_err(format!(
            "operator domain {} does not match network output {}",
            op.domain(),
            net.output_shape()
        ));
    }
    if op.range().len() != y.len() {
        return shape_err(format!("data has {} values, operator range is {}", y.len(), op.range()));
    }
    let mut z_rng = rng::stream(seed, Tag::Latent, &[0]);
    let z = LatentVec::standard_normal(&mut z_rng, net.latent_dim());
    let mut w = net.init(seed, init_scale)?;
    let mut losses = Vec::with_capacity(iters + 1);

    let loss_and_grad = |w: &NetWeights, want_grad: bool| -> Result<(f64, Option<NetWeights>)> {
        let mut loss = 0.0;
        let mut failure = None;
        let (_, _, gw) = net.forward_backward(w, &z, |g| {
            let residual: Vec<f64> = match op.apply(g.as_slice()) {
                Ok(ag) => ag.iter().zip(y).map(|(a, b)| a - b).collect(),
                Err(e) => {
                    failure = Some(e);
                    return Grid::zeros(g.rows(), g.cols());
                }
            };
            loss = 0.5 * residual.iter().map(|r| r * r).sum::<f64>();
            if !want_grad {
                return Grid::zeros(g.rows(), g.cols());
            }
            match op.adjoint_grid(&residual) {
                Ok(grid) => grid,
                Err(e) => {
                    failure = Some(e);
                    Grid::zeros(g.rows(), g.cols())
                }
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        Ok((loss, want_grad.then_some(gw)))
    };

    for it in 0..iters {
        let (loss, grad) = loss_and_grad(&w, true)?;
        losses.push(loss);
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "strong-prior fit diverged at iteration {it}; loss trace {losses:?}"
            )));
        }
        w.axpy(-step, &grad.expect("gradient requested"));
    }
    let (final_loss, _) = loss_and_grad(&w, false)?;
    losses.push(final_loss);
    if !final_loss.is_finite() || !w.is_finite() {
        return Err(Error::Numerical(format!(
            "strong-prior fit diverged; loss trace {losses:?}"
        )));
    }
    Ok(FitResult { weights: w, z, losses })
}
