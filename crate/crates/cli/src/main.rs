mod commands;
mod config;
mod manifest;
mod plot;

use clap::{Args, Parser, Subcommand};
use commands::{ConfigError, EvalOptions};
use config::RunConfig;
use m2m::datagen::DatasetKind;
use m2m::M2mError;
use std::path::PathBuf;
use std::process::ExitCode;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const DEVICE_VAR: &str = "M2M_DEVICE";

#[derive(Parser)]
#[command(name = "m2m", version, about = "Multi-scale multi-expert neural operator toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration as TOML.
    DefaultConfig,
    /// Generate a dataset into `data.path`.
    Generate(ConfigArgs),
    /// Train a model on `data.path`, writing a checkpoint and logs into `output_dir`.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split directory (e.g. `data/poisson/test`).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "poisson")]
        kind: Kind,
        /// Also write `eval.csv`, `eval.json` and a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = m2m::evalbench::MIN_BENCH_WARMUPS)]
        warmups: usize,
        #[arg(long, default_value_t = m2m::evalbench::MIN_BENCH_REPEATS)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
    /// Train and evaluate the configured sweep and write the Pareto report into `output_dir`.
    Bench(ConfigArgs),
    /// Render a Pareto scatter and router heatmaps as PNG files.
    Plot {
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        run_log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Kind {
    Poisson,
    Ns,
    Cylinder,
}

impl From<Kind> for DatasetKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Poisson => DatasetKind::Poisson,
            Kind::Ns => DatasetKind::Ns,
            Kind::Cylinder => DatasetKind::Cylinder,
        }
    }
}

fn device() -> anyhow::Result<String> {
    match std::env::var(DEVICE_VAR) {
        Err(_) => Ok("cpu".into()),
        Ok(d) if d.eq_ignore_ascii_case("cpu") => Ok("cpu".into()),
        Ok(d) => Err(ConfigError(format!("{DEVICE_VAR}={d} is not available; only \"cpu\" is supported")).into()),
    }
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    RunConfig::load(args.config.as_deref(), &args.overrides)
        .map_err(|e| e.context(ConfigError("invalid configuration".into())))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let device = device()?;
    match cli.command {
        Command::DefaultConfig => print!("{}", RunConfig::default().to_toml()?),
        Command::Generate(args) => {
            let dir = commands::generate(&load_config(&args)?, &device)?;
            println!("{}", dir.display());
        }
        Command::Train(args) => {
            let dir = commands::train(&load_config(&args)?, &device)?;
            println!("{}", dir.display());
        }
        Command::Eval {
            checkpoint,
            data,
            kind,
            out,
            warmups,
            repeats,
            batch,
        } => {
            let opts = EvalOptions {
                warmups,
                repeats,
                batch,
            };
            let record = commands::eval(&checkpoint, &data, kind.into(), &opts, out.as_deref(), &device)?;
            println!("{}", serde_json::to_string(&record)?);
        }
        Command::Bench(args) => {
            let cfg = load_config(&args)?;
            cfg.validate_bench()
                .map_err(|e| e.context(ConfigError("invalid bench configuration".into())))?;
            let report = commands::bench(&cfg, &device)?;
            print!("{}", report.to_csv());
        }
        Command::Plot { report, run_log, out } => {
            for path in plot::plot(report.as_deref(), run_log.as_deref(), &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

/// 2 for configuration errors, 3 for data errors, 4 for divergence.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<M2mError>() {
            return match e {
                M2mError::Diverged { .. } => 4,
                M2mError::InvalidConfig(_)
                | M2mError::TopKOutOfRange { .. }
                | M2mError::PriorDimension { .. }
                | M2mError::ZeroPrior(_)
                | M2mError::ModeOverflow { .. } => 2,
                _ => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
