use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedhd_cli::commands::{self, Context, SweepParam};
use fedhd_cli::config::RunConfig;
use fedhd_cli::CliError;

#[derive(Parser)]
#[command(name = "fedhd", version, about = "Federated dataset distillation on generated MIL cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration; absent keys take the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single seed, overriding `run.seeds`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding `run.out` (default `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Worker threads, overriding `run.threads`.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Clone)]
struct Input {
    /// Cohort manifest; without one the cohort is generated in memory.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a cohort and write its bags and manifest.
    GenCohort(#[command(flatten)] Common),
    /// Distill every client's training slides.
    Distill {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        common: Common,
    },
    /// Run the federated protocol for each seed.
    Federate {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        common: Common,
    },
    /// Membership inference against one client's release.
    Mia {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        common: Common,
    },
    /// Federated runs over a grid of one parameter.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        common: Common,
    },
}

fn context(common: &Common) -> Result<Context, CliError> {
    let raw = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = raw.resolve()?;
    if let Some(n) = common.threads.or(cfg.threads) {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot set up {n} threads: {e}")))?;
    }
    let seeds = common.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
    let out = common.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    Ok(Context { cfg, seeds, out, force: common.force })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenCohort(common) => commands::gen_cohort(&context(&common)?),
        Command::Distill { input, common } => commands::distill(&context(&common)?, input.manifest.as_deref()),
        Command::Federate { input, common } => commands::federate(&context(&common)?, input.manifest.as_deref()),
        Command::Mia { input, common } => commands::mia(&context(&common)?, input.manifest.as_deref()),
        Command::Sweep { param, values, input, common } => {
            commands::sweep(&context(&common)?, input.manifest.as_deref(), param, &values)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
