//! `follower`: batch runner for monotone-follower experiments.
//!
//! Exit codes: 0 success, 1 unexpected error, 2 configuration error or
//! unverified coercivity, 3 solver nonconvergence, 4 certificate or check
//! failure. The worker thread count is read from `FOLLOWER_THREADS`.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use follower_cli::artifacts::Artifacts;
use follower_cli::commands::{self, ConfigError, ReproName};
use follower_cli::config::{ExperimentConfig, Format};

#[derive(Parser)]
#[command(name = "follower", version, about = "Monotone-follower experiments on scenario trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one control problem and certify the result.
    Solve(Common),
    /// Solve the capped problems of a cap ladder and compare with the singular one.
    Ladder(Common),
    /// Read a stopping rule off the optimal control and compare with the Snell envelope.
    Stop(Common),
    /// Reproduce a worked example.
    Repro {
        #[arg(value_enum)]
        name: ReproName,
        #[command(flatten)]
        common: Common,
    },
    /// Pseudopath and sup-norm distance matrices.
    Mzdist {
        #[command(flatten)]
        common: Common,
        /// JSON file of named paths on a shared grid (schema follower/paths/v1).
        #[arg(long)]
        paths: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `outputs.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    waive_coercivity: bool,
    /// Certificate tolerance; overrides `certificate.tolerance`.
    #[arg(long)]
    tolerance: Option<f64>,
}

impl Common {
    fn load(&self, required: bool) -> anyhow::Result<Option<ExperimentConfig>> {
        let Some(path) = &self.config else {
            if required {
                return Err(anyhow::anyhow!("--config is required").context(ConfigError));
            }
            return Ok(None);
        };
        let mut config = ExperimentConfig::load(path).context(ConfigError)?;
        if let Some(seed) = self.seed {
            config.set_seed(seed);
        }
        if self.waive_coercivity {
            config.solver.waive_coercivity = true;
        }
        if let Some(tol) = self.tolerance {
            config.certificate.tolerance = tol;
            config.validate().context(ConfigError)?;
        }
        Ok(Some(config))
    }

    fn out_dir(&self, config: Option<&ExperimentConfig>) -> PathBuf {
        self.out
            .clone()
            .or_else(|| config.map(|c| c.outputs.directory.clone()))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("FOLLOWER_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().with_context(|| format!("FOLLOWER_THREADS={raw:?} is not a count"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    init_threads().context(ConfigError)?;
    let (name, common) = match &cli.command {
        Command::Solve(c) => ("solve", c),
        Command::Ladder(c) => ("ladder", c),
        Command::Stop(c) => ("stop", c),
        Command::Repro { common, .. } => ("repro", common),
        Command::Mzdist { common, .. } => ("mzdist", common),
    };
    let needs_config = matches!(cli.command, Command::Solve(_) | Command::Ladder(_) | Command::Stop(_));
    let config = common.load(needs_config)?;
    let mut art = Artifacts::create(&common.out_dir(config.as_ref()))?;
    let code = match &cli.command {
        Command::Solve(_) => commands::solve(config.as_ref().expect("required"), &mut art)?,
        Command::Ladder(_) => commands::ladder(config.as_ref().expect("required"), &mut art)?,
        Command::Stop(_) => commands::stop(config.as_ref().expect("required"), &mut art)?,
        Command::Repro { name, .. } => {
            let mut opts = config.as_ref().map(|c| c.solver).unwrap_or_default();
            opts.seed = common.seed.unwrap_or(opts.seed);
            commands::repro(*name, &opts, &mut art)?
        }
        Command::Mzdist { paths, .. } => {
            let formats = config.as_ref().map(|c| c.outputs.formats.clone()).unwrap_or(vec![Format::Json, Format::Csv]);
            commands::mzdist(config.as_ref(), paths.as_deref(), &mut art, &formats)?
        }
    };
    let seed = config.as_ref().map(|c| c.solver.seed).or(common.seed);
    art.finish(name, seed, config.as_ref(), code)?;
    Ok(code)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let coercivity = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<follower_core::Error>(),
            Some(follower_core::Error::CoercivityUnverified(_) | follower_core::Error::AuditFailed(_))
        )
    });
    if coercivity || err.downcast_ref::<ConfigError>().is_some() {
        commands::CONFIG
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
