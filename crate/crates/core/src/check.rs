//! Runtime self-check: adjoint dot tests, projection optimality, network
//! gradients and the Langevin stationary variance.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::grid::{Grid, Shape};
use crate::linops::{dot_test, ConvKernel, LinearOp, LinearOperator, RestrictionMask, Space};
use crate::net::{Generator, LatentVec, NetArch};
use crate::projections::{is_feasible, project_intersection, total_variation, ConstraintSpec, ConstraintStack};
use crate::rng::{self, Tag};
use crate::sgld::{sgld_run, stationary_variance, SgldParams};
use crate::testbed::{generate, BankSpec, TestbedSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOptions {
    pub seed: u64,
    pub dot_trials: usize,
    pub projection_instances: usize,
    /// Architecture for the gradient check.
    pub arch: NetArch,
    pub sampled_weights: usize,
    pub sgld_steps: usize,
    /// Test fixture: flips the sign of every adjoint seen by the dot tests.
    pub inject_adjoint_sign_error: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            dot_trials: 20,
            projection_instances: 100,
            arch: NetArch::with_stages(4),
            sampled_weights: 50,
            sgld_steps: 100_000,
            inject_adjoint_sign_error: false,
        }
    }
}

/// Wraps an operator and negates its adjoint.
struct NegatedAdjoint<'a>(&'a LinearOp);

impl LinearOperator for NegatedAdjoint<'_> {
    fn domain(&self) -> Space {
        self.0.domain()
    }
    fn range(&self) -> Space {
        self.0.range()
    }
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.0.apply(x)
    }
    fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.0.adjoint(y)?.into_iter().map(|v| -v).collect())
    }
}

fn run_dot_test(op: &LinearOp, opts: &CheckOptions) -> Result<f64> {
    if opts.inject_adjoint_sign_error {
        dot_test(&NegatedAdjoint(op), opts.seed, opts.dot_trials)
    } else {
        dot_test(op, opts.seed, opts.dot_trials)
    }
}

/// One operator of every kind on a small grid.
pub fn operator_zoo() -> Result<Vec<LinearOp>> {
    let shape = Shape::new(12, 10);
    let n = shape.len();
    let mut r = rng::stream(1, Tag::DotTest, &[77]);
    let taps = rng::normal_vec(&mut r, 25);
    let mut idx = sample(&mut r, n, n / 3).into_vec();
    idx.sort_unstable();
    let mask = RestrictionMask::new(idx, n)?;
    let conv = LinearOp::conv(ConvKernel::new(5, taps)?, shape);
    Ok(vec![
        LinearOp::identity(shape),
        LinearOp::scale(-2.5, shape),
        conv.clone(),
        LinearOp::restrict(mask.clone(), shape)?,
        LinearOp::compose(LinearOp::restrict(mask, shape)?, conv)?,
    ])
}

pub fn check_operators(opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for op in operator_zoo()? {
        out.push(CheckResult::new(format!("dot_test[{}]", op.kind()), run_dot_test(&op, opts)?, 1e-10));
    }
    let tb = generate(&TestbedSpec {
        shape: Shape::new(32, 32),
        bank: BankSpec {
            experiments: 8,
            ..BankSpec::default()
        },
        ..TestbedSpec::default()
    })?;
    let mut worst: f64 = 0.0;
    for e in &tb.bank.experiments {
        worst = worst.max(run_dot_test(&e.op, opts)?);
    }
    out.push(CheckResult::new("dot_test[bank]", worst, 1e-10));
    Ok(out)
}

/// A point of the set built without calling any projection.
fn feasible_point(spec: &ConstraintSpec, shape: Shape, r: &mut impl Rng) -> Grid {
    let raw = Grid::from_vec(shape.rows, shape.cols, rng::normal_vec(r, shape.len())).unwrap();
    let frac = r.random_range(0.2..1.0);
    let shrink = |g: &Grid, norm: f64, radius: f64| g.scaled((radius / norm.max(1e-300)).min(1.0) * frac);
    match *spec {
        ConstraintSpec::Box { lo, hi } => {
            let u: Vec<f64> = (0..shape.len()).map(|_| lo + (hi - lo) * r.random::<f64>()).collect();
            Grid::from_vec(shape.rows, shape.cols, u).unwrap()
        }
        ConstraintSpec::L2Ball { radius } => shrink(&raw, raw.norm2(), radius),
        ConstraintSpec::L1Ball { radius } => shrink(&raw, raw.norm1(), radius),
        ConstraintSpec::TvBall { radius } => {
            let mean = raw.sum() / raw.len() as f64;
            let centred = raw.map(|v| v - mean);
            shrink(&centred, total_variation(&raw), radius).map(|v| v + mean)
        }
    }
}

/// Worst normalized violation of `<x − p, c − p> ≤ 0` over feasible `c`,
/// or infinity if `p` is infeasible.
fn optimality_gap(x: &Grid, p: &Grid, stack: &ConstraintStack, feasible: &[Grid], feas_tol: f64) -> f64 {
    if !is_feasible(p, stack, feas_tol).feasible {
        return f64::INFINITY;
    }
    let d = x.sub(p);
    let dn = d.norm2();
    feasible
        .iter()
        .map(|c| {
            let e = c.sub(p);
            (d.dot(&e) / (dn * e.norm2()).max(1e-300)).max(0.0)
        })
        .fold(0.0, f64::max)
}

pub fn check_projections(opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let shape = Shape::new(2, 4);
    let cases: Vec<(&str, Vec<ConstraintSpec>, f64)> = vec![
        ("box", vec![ConstraintSpec::Box { lo: -0.5, hi: 0.8 }], 1e-6),
        ("l2ball", vec![ConstraintSpec::L2Ball { radius: 1.3 }], 1e-6),
        ("l1ball", vec![ConstraintSpec::L1Ball { radius: 1.7 }], 1e-6),
        ("tvball", vec![ConstraintSpec::TvBall { radius: 2.0 }], 1e-4),
        (
            "intersection",
            vec![ConstraintSpec::Box { lo: -0.6, hi: 0.6 }, ConstraintSpec::L1Ball { radius: 2.0 }],
            1e-6,
        ),
    ];
    let mut out = Vec::new();
    for (name, sets, tol) in cases {
        let mut stack = ConstraintStack::new(sets.clone())?;
        stack.tv.tol = 1e-9;
        stack.tv.max_iters = 20_000;
        stack.dykstra_max_iters = 5_000;
        let mut worst: f64 = 0.0;
        for i in 0..opts.projection_instances {
            let mut r = rng::stream(opts.seed, Tag::DotTest, &[1000 + i as u64]);
            let x = Grid::from_vec(shape.rows, shape.cols, rng::normal_vec(&mut r, shape.len()))?.scaled(2.0);
            let p = project_intersection(&x, &stack)?.point;
            let feasible: Vec<Grid> = (0..20)
                .map(|_| {
                    // intersection: scale a box point into the ℓ1 ball (0 lies in both)
                    let mut c = feasible_point(&sets[0], shape, &mut r);
                    for s in &sets[1..] {
                        if let ConstraintSpec::L1Ball { radius } = *s {
                            c = c.scaled((radius / c.norm1().max(1e-300)).min(1.0));
                        }
                    }
                    c
                })
                .collect();
            worst = worst.max(optimality_gap(&x, &p, &stack, &feasible, 1e-8));
        }
        out.push(CheckResult::new(format!("projection[{name}]"), worst, tol));
    }
    Ok(out)
}

/// Derivative at 0 of a piecewise-affine scalar function.
///
/// Uses the central difference when the stencil is affine, otherwise the
/// one-sided difference on the affine side. Shrinks `h` when neither side
/// is affine. Returns the slope and whether a one-sided difference was used.
pub fn piecewise_affine_slope(f: impl Fn(f64) -> f64, h: f64) -> (f64, bool) {
    let mut h = h;
    let f0 = f(0.0);
    let tol = 1e-11 * f0.abs().max(1.0);
    for _ in 0..4 {
        let (fp, fm) = (f(h), f(-h));
        if (fp - 2.0 * f0 + fm).abs() <= tol {
            return ((fp - fm) / (2.0 * h), false);
        }
        if (f(0.5 * h) - 0.5 * (f0 + fp)).abs() <= tol {
            return ((fp - f0) / h, true);
        }
        if (f(-0.5 * h) - 0.5 * (f0 + fm)).abs() <= tol {
            return ((f0 - fm) / h, true);
        }
        h *= 0.1;
    }
    ((f(h) - f(-h)) / (2.0 * h), true)
}

pub fn check_gradients(opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    const H: f64 = 1e-5;
    let net = Generator::new(opts.arch.clone())?;
    let w = net.init(opts.seed, 1.0)?;
    let mut r = rng::stream(opts.seed, Tag::DotTest, &[2000]);
    let z = LatentVec::standard_normal(&mut r, net.latent_dim());
    let shape = net.output_shape();
    let up = Grid::from_vec(shape.rows, shape.cols, rng::normal_vec(&mut r, shape.len()))?;
    let (gz, gw) = net.backward(&w, &z, &up)?;
    net.forward(&w, &z)?;
    let pairing = |w: &crate::net::NetWeights, z: &LatentVec| -> Result<f64> { Ok(net.forward(w, z)?.dot(&up)) };
    let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);

    let mut worst_z: f64 = 0.0;
    for i in 0..z.len() {
        let along = |t: f64| {
            let mut zt = z.clone();
            zt.0[i] += t;
            pairing(&w, &zt).unwrap_or(f64::NAN)
        };
        worst_z = worst_z.max(rel(piecewise_affine_slope(along, H).0, gz.0[i]));
    }
    let mut worst_w: f64 = 0.0;
    for i in sample(&mut r, w.len(), opts.sampled_weights.min(w.len())) {
        let along = |t: f64| {
            let mut wt = w.clone();
            wt.flat[i] += t;
            pairing(&wt, &z).unwrap_or(f64::NAN)
        };
        worst_w = worst_w.max(rel(piecewise_affine_slope(along, H).0, gw.flat[i]));
    }
    Ok(vec![
        CheckResult::new("gradient[z]", worst_z, 1e-5),
        CheckResult::new("gradient[w]", worst_w, 1e-5),
    ])
}

/// Relative deviation of the per-coordinate variance of the λ = 0 chain
/// from its stationary value.
pub fn check_sgld(opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let params = SgldParams {
        steps: 1,
        ..SgldParams::new(0.1, 1)?
    };
    let dim = 8;
    let net = Generator::new(NetArch::dense(dim, 1, 1, false))?;
    let w = net.init(opts.seed, 1.0)?;
    let x = Grid::zeros(1, 1);
    let mut r = rng::stream(opts.seed, Tag::Sgld, &[3000]);
    let mut z = LatentVec::zeros(dim);
    let burn = 1000;
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    for i in 0..burn + opts.sgld_steps {
        z = sgld_run(&z, &x, &net, &w, 0.0, &params, &mut r)?.0;
        if i >= burn {
            for j in 0..dim {
                sum[j] += z.0[j];
                sq[j] += z.0[j] * z.0[j];
            }
        }
    }
    let n = opts.sgld_steps as f64;
    let target = stationary_variance(&params);
    let worst = (0..dim)
        .map(|j| {
            let mean = sum[j] / n;
            ((sq[j] / n - mean * mean) / target - 1.0).abs()
        })
        .fold(0.0, f64::max);
    Ok(vec![CheckResult::new("sgld_variance", worst, 0.05)])
}

pub fn run_all(opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut out = check_operators(opts)?;
    out.extend(check_projections(opts)?);
    out.extend(check_gradients(opts)?);
    out.extend(check_sgld(opts)?);
    Ok(out)
}

pub fn format_table(results: &[CheckResult]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<24} {:>12} {:>10}  status", "check", "value", "tolerance");
    for r in results {
        let _ = writeln!(
            out,
            "{:<24} {:>12.3e} {:>10.1e}  {}",
            r.name,
            r.value,
            r.tolerance,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    out
}
