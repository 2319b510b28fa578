use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clustcast_cli::{run_pipeline, CliError, Command, RunConfig};

#[derive(Parser)]
#[command(name = "clustcast", version, about = "Local, global and cluster-wise load forecasting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// INI run configuration (defaults apply when omitted).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set model.kind=gbdt`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output directory (`output.dir`).
    #[arg(long, global = true)]
    outdir: Option<PathBuf>,

    /// Run directory name (`output.run_id`).
    #[arg(long, global = true)]
    run_id: Option<String>,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Validate and copy CSV inputs into the run directory.
    Ingest,
    /// Generate the synthetic benchmark collection.
    Synth,
    /// Heterogeneity indices of every training series.
    Profile,
    /// Train the configured paradigms and save their bundles.
    Train,
    /// Train, forecast the test span and write metrics.csv.
    Evaluate,
    /// Evaluate and write peak errors.
    Peaks,
    /// Zero-shot forecasts of region and system aggregates.
    Zeroshot,
    /// Evaluate and write summary and drift reports.
    Report,
    /// Every stage in order.
    Run,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Ingest => Command::Ingest,
            Cmd::Synth => Command::Synth,
            Cmd::Profile => Command::Profile,
            Cmd::Train => Command::Train,
            Cmd::Evaluate => Command::Evaluate,
            Cmd::Peaks => Command::Peaks,
            Cmd::Zeroshot => Command::Zeroshot,
            Cmd::Report => Command::Report,
            Cmd::Run => Command::Run,
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let original = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(d) = &cli.outdir {
        overrides.push(format!("output.dir={}", d.display()));
    }
    if let Some(id) = &cli.run_id {
        overrides.push(format!("output.run_id={id}"));
    }
    let cfg = RunConfig::parse_with_overrides(&original, &overrides)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Config(e.to_string()))?;
    let outcome = pool.install(|| run_pipeline(&cfg, &original, cli.command.into()))?;
    println!("{}", outcome.run_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
