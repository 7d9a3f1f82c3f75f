use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use levcool::config::OutputFormat;
use levcool::ensemble::with_threads;
use levcool::scenario::{execute, prepare, Overrides, RunError, Verb};

#[derive(Parser)]
#[command(name = "levcool", version, about = "Feedback cooling simulations for levitated nanoparticles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Overrides `scenario.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
}

#[derive(Subcommand)]
enum Command {
    /// Run any scenario.
    Run { config: PathBuf },
    /// Controller design and gain tables.
    Design { config: PathBuf },
    /// Detector and electrode calibration.
    Calibrate { config: PathBuf },
    /// Delay or pressure sweep.
    Sweep { config: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (verb, path) = match cli.command {
        Command::Run { config } => (Verb::Run, config),
        Command::Design { config } => (Verb::Design, config),
        Command::Calibrate { config } => (Verb::Calibrate, config),
        Command::Sweep { config } => (Verb::Sweep, config),
    };
    let overrides = Overrides {
        seed: cli.seed,
        out_dir: cli.out_dir,
        format: cli.format.map(|f| match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        }),
    };
    let result = prepare(&path, verb, &overrides).and_then(|cfg| {
        with_threads(cli.threads, || execute(&cfg)).map_err(|e| RunError::Other(e.into()))?
    });
    match result {
        Ok(out) => {
            println!("{}", serde_json::to_string_pretty(&out.summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
