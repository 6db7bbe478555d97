//! `diffmerge`: train, sample, score and sweep merged diffusion experts.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use diffmerge::integrate::Method;
use diffmerge::likelihood::DivergenceMode;
use diffmerge::train::Weighting;
use diffmerge::verify::Fault;

use crate::config::{BoundChoice, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "diffmerge", version, about = "Merge diffusion experts at a switching time and evaluate the trade-off")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for training, sampling and likelihood streams (the dataset keeps its own).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Rk45,
    Euler,
    EulerMaruyama,
    Ancestral,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Rk45 => Method::Rk45,
            MethodArg::Euler => Method::Euler,
            MethodArg::EulerMaruyama => Method::EulerMaruyama,
            MethodArg::Ancestral => Method::Ancestral,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DivergenceArg {
    Exact,
    Hutchinson,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum WeightingArg {
    Elbo,
    SimpleHighNoise,
}

#[derive(Subcommand)]
enum Command {
    /// Train a score network and write its checkpoint and run log.
    Train {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum)]
        weighting: Option<WeightingArg>,
    },
    /// Draw samples from an expert, a merged pair or an analytic model.
    Sample {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Switching time for a merged pair.
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Negative log-likelihood bounds on the test split.
    Nll {
        #[arg(long, value_enum)]
        bound: Option<BoundChoice>,
        #[arg(long, value_enum)]
        divergence: Option<DivergenceArg>,
        /// Hutchinson probes per datum.
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Evaluate a grid of switching times plus both base experts.
    Sweep,
    /// Run the oracle verification suite.
    Verify {
        /// Deliberately break the schedule under test.
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    FlipGammaSign,
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    match &cli.command {
        Command::Train { steps, weighting } => {
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
            if let Some(w) = weighting {
                cfg.train.weighting = match w {
                    WeightingArg::Elbo => Weighting::Elbo,
                    WeightingArg::SimpleHighNoise => Weighting::SimpleHighNoise,
                };
            }
        }
        Command::Sample { n, method, eta } => {
            if let Some(n) = n {
                cfg.sample.n = *n;
            }
            if let Some(m) = method {
                cfg.solver.method = (*m).into();
            }
            if eta.is_some() {
                cfg.model.eta = *eta;
            }
        }
        Command::Nll { bound, divergence, probes, eta } => {
            if let Some(b) = bound {
                cfg.nll.bound = *b;
            }
            if let Some(d) = divergence {
                cfg.divergence.mode = match d {
                    DivergenceArg::Exact => DivergenceMode::Exact,
                    DivergenceArg::Hutchinson => DivergenceMode::Hutchinson,
                };
            }
            if let Some(p) = probes {
                cfg.divergence.probes = *p;
            }
            if eta.is_some() {
                cfg.model.eta = *eta;
            }
        }
        Command::Sweep => {}
        Command::Verify { inject_fault } => {
            if let Some(FaultArg::FlipGammaSign) = inject_fault {
                cfg.verify.fault = Some(Fault::FlipGammaSign);
            }
        }
    }
    cfg.apply_seed();
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve(&cli)?;
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Train { .. } => commands::train(&cfg),
        Command::Sample { .. } => commands::sample(&cfg),
        Command::Nll { .. } => commands::nll(&cfg),
        Command::Sweep => commands::sweep(&cfg),
        Command::Verify { .. } => commands::verify(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
