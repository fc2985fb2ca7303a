use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use deepbreg_cli::{cmd_check, cmd_gen, cmd_invert, cmd_sample, cmd_stats, cmd_train, CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "deepbreg", version, about = "Constrained stochastic Bregman imaging with a weak deep prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the stage the command runs.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate ground truth and a noisy experiment bank.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plain stochastic Bregman inversion of a bank.
    Invert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generator with the EM loop.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint` if present.
        #[arg(long)]
        resume: bool,
    },
    /// Write generator realizations as grids.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pointwise mean, std, histograms and quality of generator samples.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Bank directory with the ground truth for quality metrics.
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the self-check suite.
    Check {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        inject_adjoint_sign_error: bool,
    },
}

fn load(common: &Common, set_seed: impl FnOnce(&mut RunConfig, u64)) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        set_seed(&mut cfg, s);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Gen { common, out } => {
            let cfg = load(&common, |c, s| c.testbed.noise_seed = s)?;
            Ok(cmd_gen(&cfg, &out)?.1)
        }
        Command::Invert { common, bank, out } => {
            let cfg = load(&common, |c, s| c.bregman.seed = s)?;
            cmd_invert(&cfg, &bank, &out)
        }
        Command::Train {
            common,
            bank,
            out,
            resume,
        } => {
            let cfg = load(&common, |c, s| c.em.seed = s)?;
            cmd_train(&cfg, &bank, &out, resume)
        }
        Command::Sample { common, checkpoint, out } => {
            let cfg = load(&common, |c, s| c.stats.seed = s)?;
            cmd_sample(&cfg, &checkpoint, &out)
        }
        Command::Stats {
            common,
            checkpoint,
            bank,
            out,
        } => {
            let cfg = load(&common, |c, s| c.stats.seed = s)?;
            Ok(cmd_stats(&cfg, &checkpoint, bank.as_deref(), &out)?.1)
        }
        Command::Check {
            common,
            inject_adjoint_sign_error,
        } => {
            let cfg = load(&common, |_, _| {})?;
            cmd_check(&cfg, common.seed.unwrap_or(0), inject_adjoint_sign_error)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &CliError) -> u8 {
    e.exit_code() as u8
}
