use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ncd_cli::config::{artifacts, PipelineConfig, Preset};
use ncd_cli::stages::{self, Tagged};
use ncd_core::error::Error;

#[derive(Parser)]
#[command(
    name = "ncd",
    version,
    about = "Novel-class discovery and detection over serialized box features"
)]
struct Cli {
    /// TOML run configuration; keys it leaves out fall back to the preset.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run seed, overriding the config file.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Cap on worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Built-in defaults the config file is merged onto.
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Voc)]
    preset: PresetArg,

    /// Output directory, overriding the config file.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PresetArg {
    Voc,
    Lvis,
}

impl From<PresetArg> for Preset {
    fn from(arg: PresetArg) -> Self {
        match arg {
            PresetArg::Voc => Preset::Voc,
            PresetArg::Lvis => Preset::Lvis,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world and write its datasets.
    Synth,
    /// Average labeled base features into per-class prototypes.
    Prototypes,
    /// Cluster discovery proposals into novel prototypes.
    Discover,
    /// Score test proposals against the prototypes and post-process.
    Infer,
    /// Assign cluster indices to semantic class ids.
    Map,
    /// Score detections against ground truth and write the report.
    Eval,
    /// Run every stage in order.
    Pipeline,
}

/// Stable exit codes: 2 config, 3 missing input, 4 dimension mismatch,
/// 5 malformed data, 1 anything else.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig { .. } => 2,
        Error::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => 3,
        Error::DimMismatch { .. } => 4,
        Error::BadMagic { .. }
        | Error::BadVersion { .. }
        | Error::Truncated { .. }
        | Error::TrailingData { .. }
        | Error::Json { .. }
        | Error::NonFinite { .. }
        | Error::ZeroVector { .. }
        | Error::InvalidRecord { .. }
        | Error::EmptyInput { .. } => 5,
        Error::Io { .. } => 1,
    }
}

fn run(cli: &Cli) -> Tagged<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| ("config", Error::invalid_config(format!("thread pool: {e}"))))?;
    }
    let config = PipelineConfig::load(
        cli.config.as_deref(),
        cli.preset.into(),
        cli.seed,
        cli.out_dir.as_deref(),
    )
    .map_err(|e| ("config", e))?;

    match cli.command {
        Command::Synth => drop(stages::run_synth(&config).map_err(|e| ("synth", e))?),
        Command::Prototypes => drop(stages::run_prototypes(&config).map_err(|e| ("prototypes", e))?),
        Command::Discover => drop(stages::run_discover(&config).map_err(|e| ("discover", e))?),
        Command::Infer => drop(stages::run_infer(&config).map_err(|e| ("infer", e))?),
        Command::Map => drop(stages::run_map(&config).map_err(|e| ("map", e))?),
        Command::Eval => drop(stages::run_eval(&config).map_err(|e| ("eval", e))?),
        Command::Pipeline => drop(stages::run_pipeline(&config)?),
    };
    if matches!(cli.command, Command::Eval | Command::Pipeline) {
        if let Ok(table) = std::fs::read_to_string(config.out(artifacts::REPORT_TXT)) {
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((stage, err)) => {
            eprintln!("error[{stage}]: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
