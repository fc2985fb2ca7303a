//! Langevin sampling of latent codes with the network weights frozen.
//!
//! One step is
//!
//! ```text
//! z ← z − (ε/2) ∇_z U(z) + ξ,    ξ ~ N(0, εI),
//! U(z) = λ²‖x − g(z, w)‖² + c‖z‖²
//! ```
//!
//! with `c = 1` for [`Potential::Literal`] and `c = ½` for
//! [`Potential::HalfNorm`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, shape_err, Error, Result};
use crate::grid::Grid;
use crate::net::{Generator, LatentVec, NetWeights};

/// Weight of the latent term in the potential.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Potential {
    /// `‖z‖²`
    #[default]
    Literal,
    /// `½‖z‖²`, the negative log-density of a standard normal prior.
    HalfNorm,
}

impl Potential {
    fn weight(self) -> f64 {
        match self {
            Potential::Literal => 1.0,
            Potential::HalfNorm => 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgldParams {
    pub epsilon: f64,
    pub steps: usize,
    pub potential: Potential,
    /// Test hook: `false` suppresses the injected noise.
    pub noise: bool,
    /// Test hook: `false` suppresses the gradient drift.
    pub drift: bool,
}

impl Default for SgldParams {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            steps: 20,
            potential: Potential::Literal,
            noise: true,
            drift: true,
        }
    }
}

impl SgldParams {
    pub fn new(epsilon: f64, steps: usize) -> Result<Self> {
        let p = Self {
            epsilon,
            steps,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 2.0) {
            return invalid(format!("SGLD steplength must lie in (0, 2), got {}", self.epsilon));
        }
        Ok(())
    }
}

/// Stationary per-coordinate variance of the `λ = 0` chain.
pub fn stationary_variance(params: &SgldParams) -> f64 {
    let a = 1.0 - params.epsilon * params.potential.weight();
    params.epsilon / (1.0 - a * a)
}

/// Potential and its gradient at `z`.
fn potential_and_grad(
    z: &LatentVec,
    x: &Grid,
    net: &Generator,
    w: &NetWeights,
    lambda: f64,
    potential: Potential,
) -> Result<(f64, Vec<f64>)> {
    let c = potential.weight();
    let mut u = c * z.norm_sq();
    let mut grad: Vec<f64> = z.0.iter().map(|&v| 2.0 * c * v).collect();
    if lambda != 0.0 {
        let l2 = lambda * lambda;
        let mut misfit = 0.0;
        let (_, gz, _) = net.forward_backward(w, z, |g| {
            let diff = g.sub(x);
            misfit = diff.dot(&diff);
            diff.scaled(2.0 * l2)
        })?;
        u += l2 * misfit;
        for (a, b) in grad.iter_mut().zip(&gz.0) {
            *a += b;
        }
    }
    Ok((u, grad))
}

fn check(z: &LatentVec, x: &Grid, net: &Generator, lambda: f64, params: &SgldParams) -> Result<()> {
    params.validate()?;
    if !(lambda >= 0.0) {
        return invalid(format!("lambda must be non-negative, got {lambda}"));
    }
    if z.len() != net.latent_dim() {
        return shape_err(format!("latent has {} entries, network expects {}", z.len(), net.latent_dim()));
    }
    if x.shape() != net.output_shape() {
        return shape_err(format!("model is {}, network output is {}", x.shape(), net.output_shape()));
    }
    Ok(())
}

fn step_unchecked<R: Rng + ?Sized>(
    z: &LatentVec,
    x: &Grid,
    net: &Generator,
    w: &NetWeights,
    lambda: f64,
    params: &SgldParams,
    rng: &mut R,
) -> Result<(LatentVec, f64)> {
    let eps = params.epsilon;
    let (u, grad) = potential_and_grad(z, x, net, w, lambda, params.potential)?;
    let sd = eps.sqrt();
    let mut next = z.0.clone();
    for (v, g) in next.iter_mut().zip(&grad) {
        if params.drift {
            *v -= 0.5 * eps * g;
        }
        if params.noise {
            let xi: f64 = StandardNormal.sample(rng);
            *v += sd * xi;
        }
    }
    if !next.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!(
            "SGLD produced a non-finite latent (potential {u:e}, |z|² {:e}, λ {lambda}, ε {eps})",
            z.norm_sq()
        )));
    }
    Ok((LatentVec(next), u))
}

/// One Langevin step.
pub fn sgld_step<R: Rng + ?Sized>(
    z: &LatentVec,
    x: &Grid,
    net: &Generator,
    w: &NetWeights,
    lambda: f64,
    params: &SgldParams,
    rng: &mut R,
) -> Result<LatentVec> {
    check(z, x, net, lambda, params)?;
    Ok(step_unchecked(z, x, net, w, lambda, params, rng)?.0)
}

/// `params.steps` steps from `z_warm`. The trace holds the potential at the
/// start of each step.
pub fn sgld_run<R: Rng + ?Sized>(
    z_warm: &LatentVec,
    x: &Grid,
    net: &Generator,
    w: &NetWeights,
    lambda: f64,
    params: &SgldParams,
    rng: &mut R,
) -> Result<(LatentVec, Vec<f64>)> {
    check(z_warm, x, net, lambda, params)?;
    let mut z = z_warm.clone();
    let mut trace = Vec::with_capacity(params.steps);
    for _ in 0..params.steps {
        let (next, u) = step_unchecked(&z, x, net, w, lambda, params, rng)?;
        trace.push(u);
        z = next;
    }
    Ok((z, trace))
}
