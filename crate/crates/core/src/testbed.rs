//! Synthetic experiment banks at desk scale.
//!
//! The unknown `δm` is a layered image on a smooth background `m`. Each
//! experiment observes a seeded subset of the blurred perturbation,
//! `A_k = R_k K`. Observed data carry a coherent linearization error and
//! white noise, scaled together to a prescribed survey-wide SNR.
//!
//! The coherent error comes from the quadratic surrogate forward
//!
//! ```text
//! F_k(v) = R_k [K v + γ ((C v)⊙(C v) − 2 (C m)⊙(C v))]
//! ```
//!
//! whose Jacobian at `m` is exactly `A_k`, so that
//! `F_k(m + δm) − F_k(m) − A_k δm = γ R_k (C δm)⊙(C δm)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::bregman::LinearExperiment;
use crate::error::{invalid, shape_err, Error, Result};
use crate::grid::{Grid, Shape};
use crate::io::{read_portable_grid, write_portable_grid};
use crate::linops::{dot_test, ConvKernel, LinearOp, RestrictionMask};
use crate::rng::{self, Tag};

/// Output shapes smaller than this are rejected.
pub const MIN_SIDE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub delta_m: Grid,
    pub m_background: Grid,
    pub layers: usize,
}

/// `3..=6` layers separated by wavy interfaces, one amplitude in `[−1, 1]`
/// per layer, on a smoothed depth ramp.
pub fn make_ground_truth(shape: Shape, seed: u64) -> Result<GroundTruth> {
    if shape.rows < MIN_SIDE || shape.cols < MIN_SIDE {
        return invalid(format!("ground truth needs at least {MIN_SIDE}x{MIN_SIDE}, got {shape}"));
    }
    let mut r = rng::stream(seed, Tag::Truth, &[]);
    let layers: usize = r.random_range(3..=6);
    let amps: Vec<f64> = (0..layers).map(|_| r.random_range(-1.0..=1.0)).collect();

    let spacing = shape.rows as f64 / layers as f64;
    let tau = std::f64::consts::TAU;
    let interfaces: Vec<(f64, f64, f64, f64)> = (1..layers)
        .map(|j| {
            let depth = j as f64 * spacing + r.random_range(-0.15..0.15) * spacing;
            let amp = r.random_range(0.05..0.25) * spacing;
            let cycles = r.random_range(1..=3) as f64;
            let phase = r.random_range(0.0..tau);
            (depth, amp, cycles, phase)
        })
        .collect();
    let delta_m = Grid::from_fn(shape.rows, shape.cols, |row, col| {
        let x = col as f64 / shape.cols as f64;
        let layer = interfaces
            .iter()
            .filter(|(d, a, k, p)| row as f64 >= d + a * (tau * k * x + p).sin())
            .count();
        amps[layer]
    });

    let ramp = Grid::from_fn(shape.rows, shape.cols, |row, _| {
        1.5 + 3.0 * row as f64 / (shape.rows - 1) as f64
    });
    let m_background = smooth_rows(&ramp, shape.rows / 4, 3);
    Ok(GroundTruth {
        delta_m,
        m_background,
        layers,
    })
}

/// Repeated vertical moving average with clamped ends.
fn smooth_rows(g: &Grid, half: usize, passes: usize) -> Grid {
    let (rows, cols) = (g.rows(), g.cols());
    let mut cur = g.clone();
    for _ in 0..passes {
        cur = Grid::from_fn(rows, cols, |r, c| {
            let lo = r.saturating_sub(half);
            let hi = (r + half).min(rows - 1);
            (lo..=hi).map(|rr| cur.get(rr, c)).sum::<f64>() / (hi - lo + 1) as f64
        });
    }
    cur
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankSpec {
    pub experiments: usize,
    pub kernel_size: usize,
    pub kernel_sigma: f64,
    pub sampling_fraction: f64,
    pub seed: u64,
}

impl Default for BankSpec {
    fn default() -> Self {
        Self {
            experiments: 64,
            kernel_size: 5,
            kernel_sigma: 1.0,
            sampling_fraction: 0.25,
            seed: 2,
        }
    }
}

impl BankSpec {
    pub fn kernel(&self) -> Result<ConvKernel> {
        ConvKernel::gaussian(self.kernel_size, self.kernel_sigma)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentBank {
    pub shape: Shape,
    pub kernel: ConvKernel,
    pub masks: Vec<RestrictionMask>,
    pub experiments: Vec<LinearExperiment>,
}

impl ExperimentBank {
    pub fn len(&self) -> usize {
        self.experiments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experiments.is_empty()
    }

    /// Rebuilds the bank from its pieces; `data[k]` belongs to `masks[k]`.
    pub fn assemble(shape: Shape, kernel: ConvKernel, masks: Vec<RestrictionMask>, data: Vec<Vec<f64>>) -> Result<Self> {
        if masks.len() != data.len() {
            return shape_err(format!("{} masks but {} data vectors", masks.len(), data.len()));
        }
        let experiments = masks
            .iter()
            .zip(data)
            .map(|(mask, y)| {
                let op = LinearOp::compose(
                    LinearOp::restrict(mask.clone(), shape)?,
                    LinearOp::conv(kernel.clone(), shape),
                )?;
                LinearExperiment::new(op, y)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            shape,
            kernel,
            masks,
            experiments,
        })
    }

    /// `(Cδm)⊙(Cδm)` restricted to each experiment.
    fn restricted(&self, full: &Grid) -> Vec<Vec<f64>> {
        self.masks
            .iter()
            .map(|m| m.indices().iter().map(|&i| full.as_slice()[i]).collect())
            .collect()
    }

    /// `A_k δm` for every experiment.
    pub fn clean_data(&self, delta_m: &Grid) -> Result<Vec<Vec<f64>>> {
        self.experiments.iter().map(|e| e.op.apply_grid(delta_m)).collect()
    }

    fn with_data(&self, data: Vec<Vec<f64>>) -> Result<Self> {
        Self::assemble(self.shape, self.kernel.clone(), self.masks.clone(), data)
    }
}

/// Largest dot-test discrepancy over all bank operators.
pub fn audit_bank(bank: &ExperimentBank, seed: u64, trials: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (k, e) in bank.experiments.iter().enumerate() {
        worst = worst.max(dot_test(&e.op, rng::key(seed, Tag::DotTest, &[k as u64]), trials)?);
    }
    Ok(worst)
}

/// Noiseless bank `y_k = R_k K δm` with seeded masks of
/// `round(fraction · cells)` distinct indices each.
pub fn make_bank(truth: &GroundTruth, spec: &BankSpec) -> Result<ExperimentBank> {
    if spec.experiments == 0 {
        return invalid("bank needs at least one experiment");
    }
    if !(spec.sampling_fraction > 0.0 && spec.sampling_fraction <= 1.0) {
        return invalid(format!("sampling fraction must lie in (0, 1], got {}", spec.sampling_fraction));
    }
    let shape = truth.delta_m.shape();
    let cells = shape.len();
    let count = ((spec.sampling_fraction * cells as f64).round() as usize).clamp(1, cells);
    let masks = (0..spec.experiments)
        .map(|k| {
            let mut r = rng::stream(spec.seed, Tag::Bank, &[k as u64]);
            let mut idx = rand::seq::index::sample(&mut r, cells, count).into_vec();
            idx.sort_unstable();
            RestrictionMask::new(idx, cells)
        })
        .collect::<Result<Vec<_>>>()?;
    let skeleton = ExperimentBank::assemble(shape, spec.kernel()?, masks, vec![vec![0.0; count]; spec.experiments])?;
    let bank = skeleton.with_data(skeleton.clean_data(&truth.delta_m)?)?;
    let worst = audit_bank(&bank, spec.seed, 2)?;
    if worst > 1e-10 {
        return Err(Error::Numerical(format!("bank operator failed its dot test: {worst:e}")));
    }
    Ok(bank)
}

/// Quadratic surrogate of the nonlinear forward map around `m`.
#[derive(Clone, Debug)]
pub struct SurrogateForward<'a> {
    pub bank: &'a ExperimentBank,
    pub c: &'a LinearOp,
    pub gamma: f64,
    pub m_background: &'a Grid,
}

impl SurrogateForward<'_> {
    /// `F_k(v)`
    pub fn apply(&self, k: usize, v: &Grid) -> Result<Vec<f64>> {
        let cv = self.c.apply_grid(v)?;
        let cm = self.c.apply_grid(self.m_background)?;
        let kv = LinearOp::conv(self.bank.kernel.clone(), self.bank.shape).apply_grid(v)?;
        let full: Vec<f64> = kv
            .iter()
            .zip(&cv)
            .zip(&cm)
            .map(|((a, b), m)| a + self.gamma * (b * b - 2.0 * m * b))
            .collect();
        Ok(self.bank.masks[k].indices().iter().map(|&i| full[i]).collect())
    }

    /// `F_k(m + δm) − F_k(m) − A_k δm`, evaluated term by term.
    pub fn direct_error(&self, k: usize, delta_m: &Grid) -> Result<Vec<f64>> {
        let perturbed = self.apply(k, &self.m_background.add(delta_m))?;
        let base = self.apply(k, self.m_background)?;
        let lin = self.bank.experiments[k].op.apply_grid(delta_m)?;
        Ok(perturbed.iter().zip(&base).zip(&lin).map(|((p, b), l)| p - b - l).collect())
    }
}

/// Closed-form coherent error `γ R_k (C δm)⊙(C δm)` for every experiment.
pub fn linearization_error(bank: &ExperimentBank, truth: &GroundTruth, c: &LinearOp, gamma: f64) -> Result<Vec<Vec<f64>>> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return invalid(format!("gamma must be finite and non-negative, got {gamma}"));
    }
    let cd = c.apply_grid(&truth.delta_m)?;
    let sq = Grid::from_raw(bank.shape, cd.iter().map(|v| gamma * v * v).collect());
    Ok(bank.restricted(&sq))
}

pub fn snr_db(signal_energy: f64, perturbation_energy: f64) -> Result<f64> {
    if !(signal_energy > 0.0 && perturbation_energy > 0.0) {
        return invalid(format!(
            "SNR needs positive energies, got signal {signal_energy} and perturbation {perturbation_energy}"
        ));
    }
    Ok(10.0 * (signal_energy / perturbation_energy).log10())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    /// `f64::INFINITY` requests noise-free data.
    pub target_snr_db: f64,
    /// Surrogate nonlinearity; `None` calibrates it from `coherent_fraction`.
    pub gamma: Option<f64>,
    /// Share of the total perturbation energy carried by the coherent error
    /// when γ is calibrated.
    pub coherent_fraction: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            target_snr_db: -11.37,
            gamma: None,
            coherent_fraction: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseReport {
    pub gamma: f64,
    pub noise_scale: f64,
    pub signal_energy: f64,
    pub coherent_energy: f64,
    pub noise_energy: f64,
    pub perturbation_energy: f64,
    /// `+∞` when the data are unperturbed.
    pub snr_db: f64,
    pub per_experiment_snr_db: Vec<f64>,
}

fn energy(v: &[Vec<f64>]) -> f64 {
    v.iter().flatten().map(|a| a * a).sum()
}

/// Adds coherent error and white noise to a noiseless bank so that the
/// survey-wide SNR hits the target. Noise for experiment `k` is drawn from
/// its own stream keyed by `(seed, k)`.
pub fn add_noise_to_snr(
    bank: &ExperimentBank,
    truth: &GroundTruth,
    spec: &NoiseSpec,
    c: &LinearOp,
    seed: u64,
) -> Result<(ExperimentBank, NoiseReport)> {
    let clean = bank.clean_data(&truth.delta_m)?;
    let signal = energy(&clean);
    if !(signal > 0.0) {
        return invalid("signal energy is zero, SNR is undefined");
    }
    if spec.target_snr_db.is_nan() || spec.target_snr_db == f64::NEG_INFINITY {
        return invalid(format!("target SNR must be finite or +inf, got {}", spec.target_snr_db));
    }
    if !(spec.coherent_fraction >= 0.0 && spec.coherent_fraction <= 1.0) {
        return invalid(format!("coherent fraction must lie in [0, 1], got {}", spec.coherent_fraction));
    }

    if spec.target_snr_db == f64::INFINITY {
        if spec.gamma.unwrap_or(0.0) != 0.0 {
            return invalid("a noise-free target requires gamma = 0");
        }
        let report = NoiseReport {
            gamma: 0.0,
            noise_scale: 0.0,
            signal_energy: signal,
            coherent_energy: 0.0,
            noise_energy: 0.0,
            perturbation_energy: 0.0,
            snr_db: f64::INFINITY,
            per_experiment_snr_db: vec![f64::INFINITY; bank.len()],
        };
        return Ok((bank.with_data(clean)?, report));
    }

    let total = signal / 10f64.powf(spec.target_snr_db / 10.0);
    let gamma = match spec.gamma {
        Some(g) => g,
        None => {
            let unit = energy(&linearization_error(bank, truth, c, 1.0)?);
            if unit > 0.0 {
                (spec.coherent_fraction * total / unit).sqrt()
            } else {
                0.0
            }
        }
    };
    let coherent = linearization_error(bank, truth, c, gamma)?;
    let white: Vec<Vec<f64>> = clean
        .iter()
        .enumerate()
        .map(|(k, y)| rng::normal_vec(&mut rng::stream(seed, Tag::Noise, &[k as u64]), y.len()))
        .collect();

    // s²‖n‖² + 2s<e, n> + ‖e‖² = total
    let a = energy(&white);
    let b: f64 = coherent.iter().flatten().zip(white.iter().flatten()).map(|(e, n)| e * n).sum();
    let c0 = energy(&coherent) - total;
    let disc = b * b - a * c0;
    if !(a > 0.0) || disc < 0.0 {
        return invalid("coherent error alone exceeds the perturbation budget for this SNR");
    }
    let s = (-b + disc.sqrt()) / a;
    if s < 0.0 {
        return invalid("coherent error alone exceeds the perturbation budget for this SNR");
    }

    let mut data = Vec::with_capacity(clean.len());
    let mut per = Vec::with_capacity(clean.len());
    let mut pert_energy = 0.0;
    for ((y, e), n) in clean.iter().zip(&coherent).zip(&white) {
        let p: Vec<f64> = e.iter().zip(n).map(|(e, n)| e + s * n).collect();
        let pe: f64 = p.iter().map(|v| v * v).sum();
        let ye: f64 = y.iter().map(|v| v * v).sum();
        pert_energy += pe;
        per.push(if ye > 0.0 && pe > 0.0 { 10.0 * (ye / pe).log10() } else { f64::NAN });
        data.push(y.iter().zip(&p).map(|(y, p)| y + p).collect());
    }
    let report = NoiseReport {
        gamma,
        noise_scale: s,
        signal_energy: signal,
        coherent_energy: energy(&coherent),
        noise_energy: s * s * a,
        perturbation_energy: pert_energy,
        snr_db: snr_db(signal, pert_energy)?,
        per_experiment_snr_db: per,
    };
    Ok((bank.with_data(data)?, report))
}

/// Everything needed to regenerate or reload a bank.
#[derive(Clone, Debug, PartialEq)]
pub struct BankManifest {
    pub shape: Shape,
    pub truth_seed: u64,
    pub bank: BankSpec,
    pub noise: NoiseSpec,
    pub noise_seed: u64,
    pub kernel_taps: Vec<f64>,
    pub masks: Vec<Vec<usize>>,
    pub report: NoiseReport,
}

const MANIFEST_FORMAT: &str = "deepbreg-bank 1";

fn join<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

impl BankManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let r = &self.report;
        let gamma = self.noise.gamma.map_or("calibrated".to_string(), |g| format!("{g:?}"));
        let _ = writeln!(s, "format = {MANIFEST_FORMAT}");
        let _ = writeln!(s, "rows = {}", self.shape.rows);
        let _ = writeln!(s, "cols = {}", self.shape.cols);
        let _ = writeln!(s, "truth_seed = {}", self.truth_seed);
        let _ = writeln!(s, "bank_seed = {}", self.bank.seed);
        let _ = writeln!(s, "noise_seed = {}", self.noise_seed);
        let _ = writeln!(s, "experiments = {}", self.bank.experiments);
        let _ = writeln!(s, "sampling_fraction = {:?}", self.bank.sampling_fraction);
        let _ = writeln!(s, "kernel_size = {}", self.bank.kernel_size);
        let _ = writeln!(s, "kernel_sigma = {:?}", self.bank.kernel_sigma);
        let _ = writeln!(s, "kernel_taps = {}", join(&self.kernel_taps));
        let _ = writeln!(s, "target_snr_db = {:?}", self.noise.target_snr_db);
        let _ = writeln!(s, "gamma_setting = {gamma}");
        let _ = writeln!(s, "coherent_fraction = {:?}", self.noise.coherent_fraction);
        let _ = writeln!(s, "gamma = {:?}", r.gamma);
        let _ = writeln!(s, "noise_scale = {:?}", r.noise_scale);
        let _ = writeln!(s, "signal_energy = {:?}", r.signal_energy);
        let _ = writeln!(s, "coherent_energy = {:?}", r.coherent_energy);
        let _ = writeln!(s, "noise_energy = {:?}", r.noise_energy);
        let _ = writeln!(s, "perturbation_energy = {:?}", r.perturbation_energy);
        let _ = writeln!(s, "measured_snr_db = {:?}", r.snr_db);
        let _ = writeln!(s, "experiment_snr_db = {}", join(&r.per_experiment_snr_db));
        for (k, m) in self.masks.iter().enumerate() {
            let _ = writeln!(s, "mask.{k} = {}", join(m));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: Vec<(usize, &str, &str)> = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let body = line.trim_end();
            if !body.is_empty() && !body.starts_with('#') {
                let (k, v) = body.split_once(" = ").ok_or_else(|| Error::Parse {
                    offset,
                    msg: format!("expected `key = value`, got {body:?}"),
                })?;
                kv.push((offset, k.trim(), v.trim()));
            }
            offset += line.len();
        }
        let end = offset;
        let find = |key: &str| -> Result<(usize, &str)> {
            kv.iter()
                .find(|(_, k, _)| *k == key)
                .map(|&(o, _, v)| (o, v))
                .ok_or_else(|| Error::Parse {
                    offset: end,
                    msg: format!("missing key {key}"),
                })
        };
        fn num<T: std::str::FromStr>(o: usize, key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Parse {
                offset: o,
                msg: format!("bad value for {key}: {v:?}"),
            })
        }
        let get = |key: &str| -> Result<(usize, &str)> { find(key) };
        macro_rules! field {
            ($key:expr) => {{
                let (o, v) = get($key)?;
                num(o, $key, v)?
            }};
        }
        macro_rules! list {
            ($key:expr) => {{
                let (o, v) = get($key)?;
                v.split_whitespace().map(|t| num(o, $key, t)).collect::<Result<Vec<_>>>()?
            }};
        }

        let (o, format) = get("format")?;
        if format != MANIFEST_FORMAT {
            return Err(Error::Parse {
                offset: o,
                msg: format!("unsupported manifest format {format:?}"),
            });
        }
        let experiments: usize = field!("experiments");
        let gamma_setting = get("gamma_setting")?;
        let gamma = match gamma_setting.1 {
            "calibrated" => None,
            v => Some(num(gamma_setting.0, "gamma_setting", v)?),
        };
        let masks = (0..experiments)
            .map(|k| {
                let key = format!("mask.{k}");
                let (o, v) = get(&key)?;
                v.split_whitespace().map(|t| num(o, &key, t)).collect::<Result<Vec<usize>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            shape: Shape::new(field!("rows"), field!("cols")),
            truth_seed: field!("truth_seed"),
            bank: BankSpec {
                experiments,
                kernel_size: field!("kernel_size"),
                kernel_sigma: field!("kernel_sigma"),
                sampling_fraction: field!("sampling_fraction"),
                seed: field!("bank_seed"),
            },
            noise: NoiseSpec {
                target_snr_db: field!("target_snr_db"),
                gamma,
                coherent_fraction: field!("coherent_fraction"),
            },
            noise_seed: field!("noise_seed"),
            kernel_taps: list!("kernel_taps"),
            masks,
            report: NoiseReport {
                gamma: field!("gamma"),
                noise_scale: field!("noise_scale"),
                signal_energy: field!("signal_energy"),
                coherent_energy: field!("coherent_energy"),
                noise_energy: field!("noise_energy"),
                perturbation_energy: field!("perturbation_energy"),
                snr_db: field!("measured_snr_db"),
                per_experiment_snr_db: list!("experiment_snr_db"),
            },
        })
    }
}

/// Settings for a complete synthetic survey.
#[derive(Clone, Debug, PartialEq)]
pub struct TestbedSpec {
    pub shape: Shape,
    pub truth_seed: u64,
    pub bank: BankSpec,
    pub noise: NoiseSpec,
    pub noise_seed: u64,
}

impl Default for TestbedSpec {
    fn default() -> Self {
        Self {
            shape: Shape::new(64, 64),
            truth_seed: 1,
            bank: BankSpec::default(),
            noise: NoiseSpec::default(),
            noise_seed: 3,
        }
    }
}

/// A generated survey with the truth used to make it.
#[derive(Clone, Debug)]
pub struct Testbed {
    pub truth: GroundTruth,
    pub bank: ExperimentBank,
    pub manifest: BankManifest,
}

/// Truth, noiseless bank and perturbed data in one go. `C` is the bank's
/// own convolution.
pub fn generate(spec: &TestbedSpec) -> Result<Testbed> {
    let truth = make_ground_truth(spec.shape, spec.truth_seed)?;
    let clean = make_bank(&truth, &spec.bank)?;
    let c = LinearOp::conv(clean.kernel.clone(), spec.shape);
    let (bank, report) = add_noise_to_snr(&clean, &truth, &spec.noise, &c, spec.noise_seed)?;
    let manifest = BankManifest {
        shape: spec.shape,
        truth_seed: spec.truth_seed,
        bank: spec.bank.clone(),
        noise: spec.noise,
        noise_seed: spec.noise_seed,
        kernel_taps: bank.kernel.taps().to_vec(),
        masks: bank.masks.iter().map(|m| m.indices().to_vec()).collect(),
        report,
    };
    Ok(Testbed { truth, bank, manifest })
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TRUTH_FILE: &str = "truth.pgrd";
pub const BACKGROUND_FILE: &str = "background.pgrd";
pub const DATA_FILE: &str = "data.pgrd";

/// Writes manifest, truth, background and an `N × samples` data grid.
pub fn write_testbed(dir: &Path, tb: &Testbed) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST_FILE), tb.manifest.to_text())?;
    write_portable_grid(&tb.truth.delta_m, &dir.join(TRUTH_FILE))?;
    write_portable_grid(&tb.truth.m_background, &dir.join(BACKGROUND_FILE))?;
    let width = tb.bank.experiments.first().map_or(0, |e| e.data.len());
    let flat: Vec<f64> = tb.bank.experiments.iter().flat_map(|e| e.data.iter().copied()).collect();
    write_portable_grid(&Grid::from_vec(tb.bank.len(), width, flat)?, &dir.join(DATA_FILE))
}

pub fn read_testbed(dir: &Path) -> Result<Testbed> {
    let manifest = BankManifest::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let delta_m = read_portable_grid(&dir.join(TRUTH_FILE))?;
    let m_background = read_portable_grid(&dir.join(BACKGROUND_FILE))?;
    let data = read_portable_grid(&dir.join(DATA_FILE))?;
    if delta_m.shape() != manifest.shape || m_background.shape() != manifest.shape {
        return shape_err(format!("truth grids do not match manifest shape {}", manifest.shape));
    }
    if data.rows() != manifest.masks.len() {
        return shape_err(format!("data has {} rows, manifest lists {} experiments", data.rows(), manifest.masks.len()));
    }
    let kernel = ConvKernel::new(manifest.bank.kernel_size, manifest.kernel_taps.clone())?;
    let masks = manifest
        .masks
        .iter()
        .map(|m| RestrictionMask::new(m.clone(), manifest.shape.len()))
        .collect::<Result<Vec<_>>>()?;
    let rows = data.as_slice().chunks(data.cols().max(1)).map(<[f64]>::to_vec).collect();
    let bank = ExperimentBank::assemble(manifest.shape, kernel, masks, rows)?;
    let layers = make_ground_truth(manifest.shape, manifest.truth_seed)?.layers;
    Ok(Testbed {
        truth: GroundTruth {
            delta_m,
            m_background,
            layers,
        },
        bank,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bregman::eval_lsq_objective;

    fn small() -> TestbedSpec {
        TestbedSpec {
            shape: Shape::new(16, 16),
            bank: BankSpec {
                experiments: 6,
                ..BankSpec::default()
            },
            ..TestbedSpec::default()
        }
    }

    #[test]
    fn truth_is_deterministic_and_bounded() {
        let a = make_ground_truth(Shape::new(16, 20), 4).unwrap();
        assert_eq!(a, make_ground_truth(Shape::new(16, 20), 4).unwrap());
        assert!(a.delta_m.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(make_ground_truth(Shape::new(8, 32), 4).is_err());
    }

    #[test]
    fn layer_counts_stay_in_range() {
        let mut seen = [false; 7];
        for seed in 0..100 {
            let t = make_ground_truth(Shape::new(16, 16), seed).unwrap();
            assert!((3..=6).contains(&t.layers));
            seen[t.layers] = true;
        }
        assert!(seen[3..=6].iter().all(|&s| s));
    }

    #[test]
    fn identity_kernel_full_sampling_returns_truth() {
        let truth = make_ground_truth(Shape::new(16, 16), 1).unwrap();
        let spec = BankSpec {
            experiments: 2,
            kernel_size: 1,
            kernel_sigma: 1.0,
            sampling_fraction: 1.0,
            seed: 0,
        };
        let bank = make_bank(&truth, &spec).unwrap();
        assert_eq!(bank.experiments[0].data, truth.delta_m.as_slice());
        assert_eq!(eval_lsq_objective(&bank.experiments, &truth.delta_m).unwrap(), 0.0);
    }

    #[test]
    fn noiseless_bank_fits_truth() {
        let truth = make_ground_truth(Shape::new(16, 16), 1).unwrap();
        let bank = make_bank(&truth, &BankSpec { experiments: 4, ..BankSpec::default() }).unwrap();
        assert_eq!(eval_lsq_objective(&bank.experiments, &truth.delta_m).unwrap(), 0.0);
        assert_eq!(bank.masks[0].len(), 64);
    }

    #[test]
    fn snr_arithmetic() {
        assert_eq!(snr_db(100.0, 1.0).unwrap(), 20.0);
        assert_eq!(snr_db(1.0, 1.0).unwrap(), 0.0);
        assert!(snr_db(0.0, 1.0).is_err());
        assert!(snr_db(1.0, -1.0).is_err());
    }

    #[test]
    fn calibration_hits_target() {
        let tb = generate(&small()).unwrap();
        let r = &tb.manifest.report;
        assert!((r.snr_db + 11.37).abs() < 1e-9, "{}", r.snr_db);
        assert!((r.coherent_energy / r.perturbation_energy - 0.3).abs() < 0.05);
    }

    #[test]
    fn twenty_db_budget() {
        let truth = make_ground_truth(Shape::new(16, 16), 1).unwrap();
        let bank = make_bank(&truth, &BankSpec { experiments: 3, ..BankSpec::default() }).unwrap();
        let c = LinearOp::conv(bank.kernel.clone(), bank.shape);
        let spec = NoiseSpec {
            target_snr_db: 20.0,
            ..NoiseSpec::default()
        };
        let (_, r) = add_noise_to_snr(&bank, &truth, &spec, &c, 0).unwrap();
        assert!((r.perturbation_energy - r.signal_energy / 100.0).abs() < 1e-9 * r.signal_energy);
    }

    #[test]
    fn noise_free_sentinel_leaves_bank_unchanged() {
        let truth = make_ground_truth(Shape::new(16, 16), 1).unwrap();
        let bank = make_bank(&truth, &BankSpec { experiments: 3, ..BankSpec::default() }).unwrap();
        let c = LinearOp::conv(bank.kernel.clone(), bank.shape);
        let spec = NoiseSpec {
            target_snr_db: f64::INFINITY,
            gamma: Some(0.0),
            ..NoiseSpec::default()
        };
        let (noisy, r) = add_noise_to_snr(&bank, &truth, &spec, &c, 0).unwrap();
        assert_eq!(noisy, bank);
        assert_eq!(r.snr_db, f64::INFINITY);
    }

    #[test]
    fn zero_signal_is_rejected() {
        let mut truth = make_ground_truth(Shape::new(16, 16), 1).unwrap();
        truth.delta_m = Grid::zeros(16, 16);
        let bank = make_bank(&truth, &BankSpec { experiments: 2, ..BankSpec::default() }).unwrap();
        let c = LinearOp::conv(bank.kernel.clone(), bank.shape);
        assert!(add_noise_to_snr(&bank, &truth, &NoiseSpec::default(), &c, 0).is_err());
    }

    #[test]
    fn coherent_error_vanishes_trivially() {
        let tb = generate(&small()).unwrap();
        let c = LinearOp::conv(tb.bank.kernel.clone(), tb.bank.shape);
        let zero = linearization_error(&tb.bank, &tb.truth, &c, 0.0).unwrap();
        assert!(zero.iter().flatten().all(|&v| v == 0.0));
        let mut flat = tb.truth.clone();
        flat.delta_m = Grid::zeros(16, 16);
        let none = linearization_error(&tb.bank, &flat, &c, 2.0).unwrap();
        assert!(none.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn manifest_round_trip() {
        let tb = generate(&small()).unwrap();
        let text = tb.manifest.to_text();
        assert_eq!(BankManifest::parse(&text).unwrap(), tb.manifest);
        let broken = text.replace("rows = 16", "rows = x");
        assert!(matches!(BankManifest::parse(&broken), Err(Error::Parse { .. })));
    }
}
