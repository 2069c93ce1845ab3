use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use glyphshot::config::{config_reference, RunConfig};
use glyphshot::{pipeline, Error, ErrorClass};

/// Few-shot music symbol classification: crop extraction, self-supervised
/// feature learning and N-way-K-shot evaluation.
#[derive(Parser, Debug)]
#[command(name = "glyphshot", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set training.epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads for the parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scan page images and write candidate crops with a manifest.
    ExtractCrops(Common),
    /// Train the encoder with VICReg on the extracted crops.
    TrainEncoder {
        #[command(flatten)]
        common: Common,
        /// Continue from the existing checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Encode the labelled glyphs into a feature store.
    Encode(Common),
    /// Run the configured accuracy tables and augmentation series.
    Evaluate(Common),
    /// Compare evaluation results with the published reference values.
    Report(Common),
    /// Print the resolved configuration as TOML.
    ShowConfig(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::ExtractCrops(c)
            | Command::Encode(c)
            | Command::Evaluate(c)
            | Command::Report(c)
            | Command::ShowConfig(c) => c,
            Command::TrainEncoder { common, .. } => common,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Validation => 1,
        ErrorClass::Io => 2,
        ErrorClass::Numerical => 3,
    }
}

fn print(lines: &[String]) {
    for l in lines {
        println!("{l}");
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let common = cli.command.common();
    if let Some(n) = common.jobs {
        if n == 0 {
            return Err(Error::validation("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::validation(e.to_string()))?;
    }
    let config = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    log::info!("config hash {}", config.hash());
    match &cli.command {
        Command::ExtractCrops(_) => print(&pipeline::extract_crops_stage(&config)?.lines()),
        Command::TrainEncoder { resume, .. } => print(&pipeline::train_encoder_stage(&config, *resume)?.lines()),
        Command::Encode(_) => print(&pipeline::encode_stage(&config)?.lines()),
        Command::Evaluate(_) => {
            let summary = pipeline::evaluate_stage(&config)?;
            print(&summary.lines());
            if summary.failed_cells > 0 {
                return Err(Error::validation(format!(
                    "{} grid cells failed; see the run records in {}",
                    summary.failed_cells,
                    config.results_dir().display()
                )));
            }
        }
        Command::Report(_) => print!("{}", pipeline::report_stage(&config)?),
        Command::ShowConfig(_) => print!("{}", config.to_toml_string()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let keys = format!("Configuration keys and defaults:\n{}", config_reference());
    let mut command = Cli::command().after_long_help(keys.clone());
    for name in ["extract-crops", "train-encoder", "encode", "evaluate", "report", "show-config"] {
        command = command.mut_subcommand(name, |c| c.after_long_help(keys.clone()));
    }
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.command.common().verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
