//! Command implementations behind the `deepbreg` binary.
//!
//! Each command reads a [`RunConfig`] plus input directories, writes its
//! outputs and the resolved config into one output directory and returns a
//! short human-readable summary.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use deepbreg::bregman::{run_bregman, LinearExperiment, SolveTrace};
use deepbreg::check::{format_table, run_all, CheckOptions};
use deepbreg::em::{initial_state, load_train_state, rounds_to_csv, save_train_state, train_from, TrainState, WEIGHTS_FILE};
use deepbreg::io::write_portable_grid;
use deepbreg::net::{read_checkpoint, Generator, NetArch, NetWeights};
use deepbreg::projections::is_feasible;
use deepbreg::stats::{default_probes, model_quality, sample_latent, stream_statistics, PixelHistogram, StreamStats};
use deepbreg::testbed::{generate, read_testbed, write_testbed, Testbed};
use deepbreg::{Grid, Shape};

pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or missing input; exit code 2.
    Usage(String),
    /// Invalid configuration value; exit code 2.
    Config(String),
    /// A self-check failed; exit code 1.
    Property(String),
    /// Non-finite values or divergence; exit code 3.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Property(_) => 1,
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Config(m) => write!(f, "invalid config: {m}"),
            CliError::Property(m) => write!(f, "property check failed: {m}"),
            CliError::Numerical(m) => write!(f, "numerical abort: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<deepbreg::Error> for CliError {
    fn from(e: deepbreg::Error) -> Self {
        match e {
            deepbreg::Error::Numerical(m) => CliError::Numerical(m),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub const TRACE_FILE: &str = "trace.csv";
pub const PRIMAL_FILE: &str = "primal.pgrd";
pub const DUAL_FILE: &str = "dual.pgrd";
pub const QUALITY_FILE: &str = "quality.csv";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

const QUALITY_HEADER: &str = "estimate,relative_l2,snr_db";

pub fn tuple_trace_file(id: usize) -> String {
    format!("trace_{id:03}.csv")
}

fn load_bank(dir: &Path) -> CliResult<Testbed> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("bank directory {} does not exist", dir.display())));
    }
    read_testbed(dir).map_err(|e| CliError::Usage(format!("cannot read bank {}: {e}", dir.display())))
}

fn check_arch_fits(arch: &NetArch, shape: Shape) -> CliResult<()> {
    if arch.output_shape() != shape {
        return Err(CliError::Config(format!(
            "net.stages: generator output {} does not match bank grid {shape}",
            arch.output_shape()
        )));
    }
    Ok(())
}

/// Accepts either a checkpoint directory or a training output directory.
fn checkpoint_dir(path: &Path) -> CliResult<PathBuf> {
    let nested = path.join(CHECKPOINT_DIR);
    if nested.join(WEIGHTS_FILE).is_file() {
        Ok(nested)
    } else if path.join(WEIGHTS_FILE).is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(CliError::Usage(format!("no checkpoint found in {}", path.display())))
    }
}

fn quality_line(out: &mut String, name: &str, x: &Grid, truth: &Grid) -> CliResult<f64> {
    let q = model_quality(x, truth)?;
    let _ = writeln!(out, "{name},{},{}", q.relative_l2, q.snr_db);
    Ok(q.relative_l2)
}

pub struct GenSummary {
    pub snr_db: f64,
    pub gamma: f64,
    pub noise_scale: f64,
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> CliResult<(GenSummary, String)> {
    let spec = cfg.testbed_spec()?;
    let tb = generate(&spec)?;
    write_testbed(out, &tb)?;
    cfg.write_resolved(out)?;
    let r = &tb.manifest.report;
    let text = format!(
        "testbed {} with {} experiments\nSNR: {:.4} dB (gamma {:.6e}, noise scale {:.6e})\n",
        spec.shape,
        tb.bank.len(),
        r.snr_db,
        r.gamma,
        r.noise_scale
    );
    Ok((
        GenSummary {
            snr_db: r.snr_db,
            gamma: r.gamma,
            noise_scale: r.noise_scale,
        },
        text,
    ))
}

fn max_trace_violation(trace: &SolveTrace) -> f64 {
    trace.records.iter().map(|r| r.max_violation).fold(0.0, f64::max)
}

pub fn cmd_invert(cfg: &RunConfig, bank_dir: &Path, out: &Path) -> CliResult<String> {
    let tb = load_bank(bank_dir)?;
    let stack = cfg.constraint_stack()?;
    let bcfg = cfg.bregman_config()?;
    let (state, trace) = run_bregman(&tb.bank.experiments, &stack, cfg.bregman.iterations, cfg.bregman.seed, &bcfg)?;
    fs::create_dir_all(out)?;
    write_portable_grid(&state.x_primal, &out.join(PRIMAL_FILE))?;
    write_portable_grid(&state.x_dual, &out.join(DUAL_FILE))?;
    fs::write(out.join(TRACE_FILE), trace.to_csv())?;
    let mut quality = format!("{QUALITY_HEADER}\n");
    let rel = quality_line(&mut quality, "primal", &state.x_primal, &tb.truth.delta_m)?;
    fs::write(out.join(QUALITY_FILE), quality)?;
    cfg.write_resolved(out)?;
    Ok(format!(
        "{} Bregman iterations, relative error {rel:.4}, max constraint violation {:.3e}\n",
        state.iter,
        max_trace_violation(&trace)
    ))
}

fn trace_rows(trace: &SolveTrace) -> String {
    let csv = trace.to_csv();
    csv.split_once('\n').map(|(_, rows)| rows.to_string()).unwrap_or_default()
}

/// Keeps the header and the data lines accepted by `keep(index, line)`.
fn truncate_csv(path: &Path, keep: impl Fn(usize, &str) -> bool) -> CliResult<()> {
    let text = fs::read_to_string(path)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || keep(i - 1, line) {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn append(path: &Path, text: &str) -> CliResult<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new().append(true).open(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Prepares the output directory and returns the state to start from.
fn start_training(
    out: &Path,
    resume: bool,
    arch: &NetArch,
    bank: &[LinearExperiment],
    net: &Generator,
    tcfg: &deepbreg::em::TrainConfig,
) -> CliResult<TrainState> {
    let ck = out.join(CHECKPOINT_DIR);
    if resume && ck.join(WEIGHTS_FILE).is_file() {
        let state = load_train_state(&ck, arch)?;
        if state.tuples.len() != tcfg.tuples {
            return Err(CliError::Config(format!(
                "em.tuples: checkpoint has {} tuples, config asks for {}",
                state.tuples.len(),
                tcfg.tuples
            )));
        }
        let done = state.round;
        truncate_csv(&out.join(ROUNDS_FILE), |_, line| {
            line.split(',').next().and_then(|r| r.parse::<usize>().ok()).is_some_and(|r| r < done)
        })?;
        for t in &state.tuples {
            truncate_csv(&out.join(tuple_trace_file(t.id)), |i, _| i < t.state.iter)?;
        }
        return Ok(state);
    }
    let state = initial_state(bank, net, tcfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(ROUNDS_FILE), rounds_to_csv(&[]))?;
    for t in &state.tuples {
        fs::write(out.join(tuple_trace_file(t.id)), format!("{}\n", SolveTrace::CSV_HEADER))?;
    }
    save_train_state(&ck, arch, &state)?;
    Ok(state)
}

/// Trains from scratch, or from `out/checkpoint` when `resume` is set and a
/// checkpoint exists. The checkpoint and traces are updated after every
/// round, so an interrupted run can be resumed.
pub fn cmd_train(cfg: &RunConfig, bank_dir: &Path, out: &Path, resume: bool) -> CliResult<String> {
    let tb = load_bank(bank_dir)?;
    let bank = &tb.bank.experiments;
    let stack = cfg.constraint_stack()?;
    let arch = cfg.arch_unchecked()?;
    check_arch_fits(&arch, tb.bank.shape)?;
    let tcfg = cfg.train_config(bank.len())?;
    let net = Generator::new(arch.clone())?;
    cfg.write_resolved(out)?;
    let mut state = start_training(out, resume, &arch, bank, &net, &tcfg)?;
    let start_round = state.round;
    let ck = out.join(CHECKPOINT_DIR);
    let result = train_from(&mut state, bank, &stack, &net, &tcfg, |s, record, traces| {
        append(&out.join(ROUNDS_FILE), rounds_to_csv(std::slice::from_ref(record)).split_once('\n').unwrap().1)
            .map_err(|e| deepbreg::Error::Io(io::Error::other(e.to_string())))?;
        for (t, trace) in s.tuples.iter().zip(traces) {
            append(&out.join(tuple_trace_file(t.id)), &trace_rows(trace))
                .map_err(|e| deepbreg::Error::Io(io::Error::other(e.to_string())))?;
        }
        save_train_state(&ck, &arch, s)
    });
    let output = result?;
    let mut text = format!("trained rounds {start_round}..{} with {} tuples\n", state.round, state.tuples.len());
    if let Some(last) = output.rounds.last() {
        let _ = writeln!(
            text,
            "last round: lambda {:.4}, data misfit {:.4}, prior misfit {:.4}, max violation {:.3e}",
            last.lambda, last.data_misfit, last.prior_misfit, last.max_violation
        );
    }
    let worst = state
        .tuples
        .iter()
        .map(|t| is_feasible(&t.state.x_primal, &stack, 0.0).max_violation())
        .fold(0.0, f64::max);
    let _ = writeln!(text, "final max constraint violation {worst:.3e}");
    Ok(text)
}

fn load_weights(cfg: &RunConfig, checkpoint: &Path) -> CliResult<(Generator, NetWeights, PathBuf)> {
    let arch = cfg.arch()?;
    let dir = checkpoint_dir(checkpoint)?;
    let w = read_checkpoint(&dir.join(WEIGHTS_FILE), &arch)?;
    Ok((Generator::new(arch)?, w, dir))
}

pub fn sample_file(i: usize) -> String {
    format!("sample_{i:04}.pgrd")
}

/// Writes the first `stats.write_samples` realizations. Realization `i`
/// uses the same latent as realization `i` of `stats`.
pub fn cmd_sample(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> CliResult<String> {
    let (net, w, _) = load_weights(cfg, checkpoint)?;
    fs::create_dir_all(out)?;
    for i in 0..cfg.stats.write_samples {
        let g = net.forward(&w, &sample_latent(cfg.stats.seed, i, net.latent_dim()))?;
        if !g.as_slice().iter().all(|v| v.is_finite()) {
            return Err(CliError::Numerical(format!("realization {i} is not finite")));
        }
        write_portable_grid(&g, &out.join(sample_file(i)))?;
    }
    cfg.write_resolved(out)?;
    Ok(format!("wrote {} realizations\n", cfg.stats.write_samples))
}

pub struct StatsSummary {
    pub probes: Vec<(usize, usize)>,
    pub prior_mean_std: f64,
    pub posterior_mean_std: f64,
    /// Relative ℓ2 error of the posterior mean, when truth is available.
    pub mean_relative_error: Option<f64>,
    /// Smallest relative ℓ2 error among the tuple primals.
    pub best_tuple_relative_error: Option<f64>,
}

fn histograms_csv(stats: &StreamStats, probes: &[(usize, usize)], bins: usize) -> CliResult<String> {
    let mut out = format!("{}\n", PixelHistogram::CSV_HEADER);
    for (p, values) in probes.iter().zip(&stats.probe_values) {
        let h = PixelHistogram::from_values(*p, values, bins)?;
        out.push_str(h.to_csv().split_once('\n').unwrap().1);
    }
    Ok(out)
}

fn mean_of(g: &Grid) -> f64 {
    g.sum() / g.len() as f64
}

/// Sample statistics of the trained generator and of its initial weights.
/// With a bank, also compares the posterior mean and the tuple primals with
/// the ground truth.
pub fn cmd_stats(
    cfg: &RunConfig,
    checkpoint: &Path,
    bank_dir: Option<&Path>,
    out: &Path,
) -> CliResult<(StatsSummary, String)> {
    let m = cfg.stats.samples;
    if m < 2 {
        return Err(CliError::Config(format!(
            "stats.samples: pointwise standard deviation needs at least 2 realizations, got {m}"
        )));
    }
    if cfg.stats.bins == 0 {
        return Err(CliError::Config("stats.bins: must be at least 1".into()));
    }
    let configured = cfg.probes()?;
    let (net, w, dir) = load_weights(cfg, checkpoint)?;
    let prior_w = net.init(cfg.net.seed, cfg.net.init_scale)?;
    let truth = bank_dir.map(load_bank).transpose()?.map(|tb| tb.truth.delta_m);
    let seed = cfg.stats.seed;
    let conv = cfg.std_convention();

    let (post, probes) = match configured {
        Some(p) => (stream_statistics(&net, &w, m, seed, &p)?, p),
        None => {
            let first = stream_statistics(&net, &w, m, seed, &[])?;
            let probes = default_probes(&first.acc.std(conv)?).to_vec();
            (stream_statistics(&net, &w, m, seed, &probes)?, probes)
        }
    };
    let prior = stream_statistics(&net, &prior_w, m, seed, &probes)?;

    fs::create_dir_all(out)?;
    let post_mean = post.acc.mean()?;
    let post_std = post.acc.std(conv)?;
    let prior_mean = prior.acc.mean()?;
    let prior_std = prior.acc.std(conv)?;
    write_portable_grid(&post_mean, &out.join("mean.pgrd"))?;
    write_portable_grid(&post_std, &out.join("std.pgrd"))?;
    write_portable_grid(&prior_mean, &out.join("prior_mean.pgrd"))?;
    write_portable_grid(&prior_std, &out.join("prior_std.pgrd"))?;
    fs::write(out.join("hist_posterior.csv"), histograms_csv(&post, &probes, cfg.stats.bins)?)?;
    fs::write(out.join("hist_prior.csv"), histograms_csv(&prior, &probes, cfg.stats.bins)?)?;
    let mut probe_csv = String::from("probe,row,col\n");
    for (i, (r, c)) in probes.iter().enumerate() {
        let _ = writeln!(probe_csv, "{i},{r},{c}");
    }
    fs::write(out.join("probes.csv"), probe_csv)?;
    let summary_spread = (mean_of(&prior_std), mean_of(&post_std));
    fs::write(
        out.join("spread.csv"),
        format!(
            "weights,mean_pointwise_std\nprior,{}\nposterior,{}\n",
            summary_spread.0, summary_spread.1
        ),
    )?;

    let mut summary = StatsSummary {
        probes: probes.clone(),
        prior_mean_std: summary_spread.0,
        posterior_mean_std: summary_spread.1,
        mean_relative_error: None,
        best_tuple_relative_error: None,
    };
    if let Some(truth) = &truth {
        let mut q = format!("{QUALITY_HEADER}\n");
        summary.mean_relative_error = Some(quality_line(&mut q, "posterior_mean", &post_mean, truth)?);
        quality_line(&mut q, "prior_mean", &prior_mean, truth)?;
        if let Ok(state) = load_train_state(&dir, net.arch()) {
            let mut best = f64::INFINITY;
            for t in &state.tuples {
                best = best.min(quality_line(&mut q, &format!("tuple_{:03}", t.id), &t.state.x_primal, truth)?);
            }
            if best.is_finite() {
                summary.best_tuple_relative_error = Some(best);
            }
        }
        fs::write(out.join(QUALITY_FILE), q)?;
    }
    cfg.write_resolved(out)?;

    let mut text = format!(
        "{m} realizations, probes {:?}\nmean pointwise std: prior {:.5}, posterior {:.5}\n",
        probes, summary.prior_mean_std, summary.posterior_mean_std
    );
    if let Some(e) = summary.mean_relative_error {
        let _ = writeln!(text, "posterior mean relative error {e:.4}");
    }
    if let Some(e) = summary.best_tuple_relative_error {
        let _ = writeln!(text, "best tuple relative error {e:.4}");
    }
    Ok((summary, text))
}

/// Runs the self-check suite. `seed` keys every random draw of the suite.
pub fn cmd_check(cfg: &RunConfig, seed: u64, inject_adjoint_sign_error: bool) -> CliResult<String> {
    let opts = CheckOptions {
        seed,
        arch: cfg.arch_unchecked()?,
        inject_adjoint_sign_error,
        ..CheckOptions::default()
    };
    let results = run_all(&opts)?;
    let table = format_table(&results);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(table)
    } else {
        Err(CliError::Property(format!("{}\n{table}", failed.join(", "))))
    }
}
