use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use rollsim_cli::commands;
use rollsim_cli::config::{ConfigFile, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "rollsim", version, about = "Trace-driven simulator for grouped RL rollout serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the iteration-0 workload trace into <out>/trace.jsonl.
    Generate(ExperimentFlags),
    /// Simulate every policy for every iteration; writes summary.csv and timelines.
    Run(ExperimentFlags),
    /// Normalize policies against the first one; refuses mismatched traces or parameters.
    Compare {
        /// Result directories holding summary.csv.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Per-run table of a results directory, or the length histogram of a trace.
    Report {
        dir: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Serve the grouped draft service over TCP.
    ServeDgds {
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
        /// Shard count; ROLLSIM_DGDS_SHARDS takes precedence.
        #[arg(long, default_value_t = 4)]
        shards: usize,
    },
}

#[derive(Args)]
struct ExperimentFlags {
    /// TOML experiment file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// moonlight-like, qwen72b-like or k2-like.
    #[arg(long)]
    preset: Option<String>,
    /// Replay this trace instead of generating one per iteration.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Comma-separated policy names, e.g. group-baseline,full.
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<String>>,
    #[arg(long)]
    iterations: Option<u32>,
    /// Master seed; iteration i runs with derive_seed(seed, i).
    #[arg(long)]
    seed: Option<u64>,
    /// Preset scale factor in (0, 1].
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Use an external draft server at HOST:PORT instead of an in-process one.
    #[arg(long, value_name = "HOST:PORT")]
    service_dgds: Option<String>,
}

impl ExperimentFlags {
    fn resolve(self) -> Result<(ExperimentConfig, bool)> {
        let file = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let flags = Overrides {
            preset: self.preset,
            scale: self.scale,
            seed: self.seed,
            iterations: self.iterations,
            policies: self.policies,
            trace: self.trace,
            out: self.out,
            service_dgds: self.service_dgds,
        };
        Ok((ExperimentConfig::resolve(file, flags)?, self.force))
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(f) => {
            let (cfg, force) = f.resolve()?;
            let path = commands::generate(&cfg, force)?;
            println!("{}", path.display());
        }
        Command::Run(f) => {
            let (cfg, force) = f.resolve()?;
            commands::run(&cfg, force)?;
            println!("{}", cfg.out.join(commands::SUMMARY_FILE).display());
        }
        Command::Compare { dirs } => print!("{}", commands::compare(&dirs)?),
        Command::Report { dir, trace } => {
            if dir.is_none() && trace.is_none() {
                anyhow::bail!("report needs a results directory or --trace");
            }
            if let Some(t) = trace {
                print!("{}", commands::report_trace(&t)?);
            }
            if let Some(d) = dir {
                print!("{}", commands::report_runs(&d)?);
            }
        }
        Command::ServeDgds { listen, shards } => commands::serve_dgds(&listen, shards)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
