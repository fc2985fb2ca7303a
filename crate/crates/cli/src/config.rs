//! Run configuration: a TOML file with one table per pipeline stage.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use deepbreg::bregman::BregmanConfig;
use deepbreg::em::{LambdaSchedule, LossNorm, TrainConfig};
use deepbreg::net::{NetArch, Stage};
use deepbreg::projections::{ConstraintSpec, ConstraintStack, TvOptions};
use deepbreg::sgld::{Potential, SgldParams};
use deepbreg::stats::StdConvention;
use deepbreg::testbed::{BankSpec, NoiseSpec, TestbedSpec};
use deepbreg::Shape;

use crate::CliError;

pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub testbed: TestbedSection,
    pub constraints: ConstraintsSection,
    pub net: NetSection,
    pub bregman: BregmanSection,
    pub sgld: SgldSection,
    pub em: EmSection,
    pub stats: StatsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestbedSection {
    pub rows: usize,
    pub cols: usize,
    pub truth_seed: u64,
    pub experiments: usize,
    pub kernel_size: usize,
    pub kernel_sigma: f64,
    pub sampling_fraction: f64,
    pub bank_seed: u64,
    /// `inf` gives noise-free data.
    pub snr_db: f64,
    /// Surrogate nonlinearity; calibrated from `coherent_fraction` when absent.
    pub gamma: Option<f64>,
    pub coherent_fraction: f64,
    pub noise_seed: u64,
}

impl Default for TestbedSection {
    fn default() -> Self {
        let spec = TestbedSpec::default();
        Self {
            rows: spec.shape.rows,
            cols: spec.shape.cols,
            truth_seed: spec.truth_seed,
            experiments: spec.bank.experiments,
            kernel_size: spec.bank.kernel_size,
            kernel_sigma: spec.bank.kernel_sigma,
            sampling_fraction: spec.bank.sampling_fraction,
            bank_seed: spec.bank.seed,
            snr_db: spec.noise.target_snr_db,
            gamma: spec.noise.gamma,
            coherent_fraction: spec.noise.coherent_fraction,
            noise_seed: spec.noise_seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SetConfig {
    Box { lo: f64, hi: f64 },
    L2 { radius: f64 },
    L1 { radius: f64 },
    Tv { radius: f64 },
}

/// The feasible set is the intersection of `sets`, projected onto in
/// list order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintsSection {
    pub sets: Vec<SetConfig>,
    pub dykstra_max_iters: usize,
    pub dykstra_tol: f64,
    pub tv_tol: f64,
    pub tv_max_iters: usize,
}

impl Default for ConstraintsSection {
    fn default() -> Self {
        let tv = TvOptions::default();
        Self {
            sets: vec![SetConfig::Box { lo: -1.0, hi: 1.0 }, SetConfig::L1 { radius: 1500.0 }],
            dykstra_max_iters: ConstraintStack::DEFAULT_MAX_ITERS,
            dykstra_tol: ConstraintStack::DEFAULT_TOL,
            tv_tol: tv.tol,
            tv_max_iters: tv.max_iters,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub latent_dim: usize,
    pub base_rows: usize,
    pub base_cols: usize,
    pub base_channels: usize,
    pub stages: usize,
    pub channels: usize,
    pub kernel: usize,
    pub final_kernel: usize,
    pub bias: bool,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for NetSection {
    fn default() -> Self {
        let arch = NetArch::with_stages(4);
        let cfg = TrainConfig::default();
        Self {
            latent_dim: arch.latent_dim,
            base_rows: arch.base_rows,
            base_cols: arch.base_cols,
            base_channels: arch.base_channels,
            stages: arch.stages.len(),
            channels: arch.stages[0].channels,
            kernel: arch.stages[0].kernel,
            final_kernel: arch.final_kernel.unwrap_or(3),
            bias: arch.bias,
            seed: cfg.net_seed,
            init_scale: cfg.init_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BregmanSection {
    pub iterations: usize,
    pub seed: u64,
    pub t_max: f64,
    pub augmented_steplength: bool,
}

impl Default for BregmanSection {
    fn default() -> Self {
        let cfg = BregmanConfig::default();
        Self {
            iterations: 350,
            seed: 4,
            t_max: cfg.t_max,
            augmented_steplength: cfg.augmented_steplength,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialName {
    #[default]
    Literal,
    HalfNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgldSection {
    pub epsilon: f64,
    pub steps: usize,
    pub potential: PotentialName,
}

impl Default for SgldSection {
    fn default() -> Self {
        let p = SgldParams::default();
        Self {
            epsilon: p.epsilon,
            steps: p.steps,
            potential: PotentialName::Literal,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSection {
    pub tuples: usize,
    pub rounds: usize,
    pub bregman_steps: usize,
    pub lambda_initial: f64,
    pub lambda_final: f64,
    pub ramp_rounds: usize,
    pub eta: f64,
    pub m_steps: usize,
    pub loss: LossName,
    pub radius_growth: f64,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for EmSection {
    fn default() -> Self {
        let cfg = TrainConfig::default();
        Self {
            tuples: cfg.tuples,
            rounds: cfg.rounds,
            bregman_steps: cfg.bregman_steps_per_round,
            lambda_initial: cfg.lambda.initial,
            lambda_final: cfg.lambda.target,
            ramp_rounds: cfg.lambda.ramp_rounds,
            eta: cfg.eta,
            m_steps: cfg.m_steps_per_round,
            loss: LossName::Mean,
            radius_growth: cfg.radius_growth,
            seed: cfg.seed,
            parallel: cfg.parallel,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdName {
    #[default]
    Population,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    /// Realizations behind the mean, std and histograms.
    pub samples: usize,
    /// Realizations written by `sample`.
    pub write_samples: usize,
    pub seed: u64,
    pub bins: usize,
    /// `[[row, col], ...]`; the max-std and median-std pixels when absent.
    pub probes: Option<Vec<[usize; 2]>>,
    pub std: StdName,
}

impl Default for StatsSection {
    fn default() -> Self {
        Self {
            samples: 3200,
            write_samples: 16,
            seed: 7,
            bins: 40,
            probes: None,
            std: StdName::Population,
        }
    }
}

fn bad<T>(key: &str, msg: impl std::fmt::Display) -> Result<T, CliError> {
    Err(CliError::Config(format!("{key}: {msg}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RESOLVED_CONFIG_FILE), self.to_toml())?;
        Ok(())
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.testbed.rows, self.testbed.cols)
    }

    pub fn testbed_spec(&self) -> Result<TestbedSpec, CliError> {
        let t = &self.testbed;
        if t.rows < deepbreg::testbed::MIN_SIDE || t.cols < deepbreg::testbed::MIN_SIDE {
            return bad("testbed.rows", format!("grid sides must be at least {}", deepbreg::testbed::MIN_SIDE));
        }
        if t.experiments == 0 {
            return bad("testbed.experiments", "must be at least 1");
        }
        if t.kernel_size % 2 == 0 {
            return bad("testbed.kernel_size", "must be odd");
        }
        if !(t.kernel_sigma > 0.0) {
            return bad("testbed.kernel_sigma", "must be positive");
        }
        if !(t.sampling_fraction > 0.0 && t.sampling_fraction <= 1.0) {
            return bad("testbed.sampling_fraction", "must lie in (0, 1]");
        }
        if t.snr_db.is_nan() || t.snr_db == f64::NEG_INFINITY {
            return bad("testbed.snr_db", "must be finite or inf");
        }
        if let Some(g) = t.gamma {
            if !(g >= 0.0 && g.is_finite()) {
                return bad("testbed.gamma", "must be non-negative");
            }
        }
        if !(0.0..=1.0).contains(&t.coherent_fraction) {
            return bad("testbed.coherent_fraction", "must lie in [0, 1]");
        }
        Ok(TestbedSpec {
            shape: self.shape(),
            truth_seed: t.truth_seed,
            bank: BankSpec {
                experiments: t.experiments,
                kernel_size: t.kernel_size,
                kernel_sigma: t.kernel_sigma,
                sampling_fraction: t.sampling_fraction,
                seed: t.bank_seed,
            },
            noise: NoiseSpec {
                target_snr_db: t.snr_db,
                gamma: t.gamma,
                coherent_fraction: t.coherent_fraction,
            },
            noise_seed: t.noise_seed,
        })
    }

    pub fn constraint_stack(&self) -> Result<ConstraintStack, CliError> {
        let c = &self.constraints;
        let mut sets = Vec::new();
        for (i, set) in c.sets.iter().enumerate() {
            let key = format!("constraints.sets[{i}]");
            let spec = match *set {
                SetConfig::Box { lo, hi } => ConstraintSpec::Box { lo, hi },
                SetConfig::L2 { radius } => ConstraintSpec::L2Ball { radius },
                SetConfig::L1 { radius } => ConstraintSpec::L1Ball { radius },
                SetConfig::Tv { radius } => ConstraintSpec::TvBall { radius },
            };
            if let Err(e) = spec.validate() {
                return bad(&key, e);
            }
            sets.push(spec);
        }
        if c.dykstra_max_iters == 0 {
            return bad("constraints.dykstra_max_iters", "must be at least 1");
        }
        if !(c.dykstra_tol > 0.0) {
            return bad("constraints.dykstra_tol", "must be positive");
        }
        if !(c.tv_tol > 0.0) {
            return bad("constraints.tv_tol", "must be positive");
        }
        if c.tv_max_iters == 0 {
            return bad("constraints.tv_max_iters", "must be at least 1");
        }
        Ok(ConstraintStack {
            sets,
            dykstra_max_iters: c.dykstra_max_iters,
            dykstra_tol: c.dykstra_tol,
            tv: TvOptions {
                tol: c.tv_tol,
                max_iters: c.tv_max_iters,
            },
        })
    }

    /// The generator architecture; its output must cover the testbed grid.
    pub fn arch(&self) -> Result<NetArch, CliError> {
        let arch = self.arch_unchecked()?;
        if arch.output_shape() != self.shape() {
            return bad(
                "net.stages",
                format!("generator output {} does not match testbed grid {}", arch.output_shape(), self.shape()),
            );
        }
        Ok(arch)
    }

    /// The generator architecture without the grid check.
    pub fn arch_unchecked(&self) -> Result<NetArch, CliError> {
        let n = &self.net;
        if n.latent_dim == 0 {
            return bad("net.latent_dim", "must be at least 1");
        }
        if n.init_scale <= 0.0 || !n.init_scale.is_finite() {
            return bad("net.init_scale", "must be positive");
        }
        let arch = NetArch {
            latent_dim: n.latent_dim,
            base_rows: n.base_rows,
            base_cols: n.base_cols,
            base_channels: n.base_channels,
            stages: vec![
                Stage {
                    channels: n.channels,
                    kernel: n.kernel,
                };
                n.stages
            ],
            final_kernel: Some(n.final_kernel),
            bias: n.bias,
        };
        if let Err(e) = arch.validate() {
            return bad("net", e);
        }
        Ok(arch)
    }

    pub fn bregman_config(&self) -> Result<BregmanConfig, CliError> {
        if !(self.bregman.t_max > 0.0) {
            return bad("bregman.t_max", "must be positive");
        }
        Ok(BregmanConfig {
            t_max: self.bregman.t_max,
            augmented_steplength: self.bregman.augmented_steplength,
        })
    }

    pub fn sgld_params(&self) -> Result<SgldParams, CliError> {
        let s = &self.sgld;
        if !(s.epsilon > 0.0 && s.epsilon < 2.0) {
            return bad("sgld.epsilon", "must lie in (0, 2)");
        }
        Ok(SgldParams {
            epsilon: s.epsilon,
            steps: s.steps,
            potential: match s.potential {
                PotentialName::Literal => Potential::Literal,
                PotentialName::HalfNorm => Potential::HalfNorm,
            },
            ..SgldParams::default()
        })
    }

    pub fn train_config(&self, bank_len: usize) -> Result<TrainConfig, CliError> {
        let e = &self.em;
        if e.tuples == 0 || e.tuples > bank_len {
            return bad("em.tuples", format!("must lie in 1..={bank_len} (bank size)"));
        }
        if !(e.lambda_initial >= 0.0) {
            return bad("em.lambda_initial", "must be non-negative");
        }
        if !(e.lambda_final >= 0.0) {
            return bad("em.lambda_final", "must be non-negative");
        }
        if !(e.eta >= 0.0 && e.eta.is_finite()) {
            return bad("em.eta", "must be non-negative");
        }
        if !(e.radius_growth > 0.0 && e.radius_growth.is_finite()) {
            return bad("em.radius_growth", "must be positive");
        }
        Ok(TrainConfig {
            tuples: e.tuples,
            rounds: e.rounds,
            bregman_steps_per_round: e.bregman_steps,
            sgld: self.sgld_params()?,
            lambda: LambdaSchedule {
                initial: e.lambda_initial,
                target: e.lambda_final,
                ramp_rounds: e.ramp_rounds,
            },
            eta: e.eta,
            m_steps_per_round: e.m_steps,
            loss: match e.loss {
                LossName::Mean => LossNorm::Mean,
                LossName::Sum => LossNorm::Sum,
            },
            radius_growth: e.radius_growth,
            bregman: self.bregman_config()?,
            seed: e.seed,
            net_seed: self.net.seed,
            init_scale: self.net.init_scale,
            parallel: e.parallel,
        })
    }

    pub fn std_convention(&self) -> StdConvention {
        match self.stats.std {
            StdName::Population => StdConvention::Population,
            StdName::Sample => StdConvention::Sample,
        }
    }

    pub fn probes(&self) -> Result<Option<Vec<(usize, usize)>>, CliError> {
        let Some(list) = &self.stats.probes else {
            return Ok(None);
        };
        let shape = self.shape();
        let mut out = Vec::new();
        for &[r, c] in list {
            if r >= shape.rows || c >= shape.cols {
                return bad("stats.probes", format!("pixel ({r}, {c}) outside {shape} grid"));
            }
            out.push((r, c));
        }
        Ok(Some(out))
    }
}
