use std::ffi::OsString;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::commands::{self, EVAL_METRICS_FILE};
use crate::config::{RunConfig, PRESETS};
use crate::error::CliError;
use crate::gradcheck_config::GradcheckSettings;
use crate::report::metrics_table;

/// Writes to stdout; a closed pipe is not an error for a report.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|()| out.flush());
}

#[derive(Debug, Parser)]
#[command(name = "ecga", version, about = "Train and run ensemble convolutional/recurrent/attention text classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, metrics, trace and config snapshot.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Classify lines read from standard input.
    Predict(PredictArgs),
    /// Compare tape gradients with finite differences on a miniature model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset to start from.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    pub preset: Option<String>,
    /// Override one field; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labelled file in the checkpoint's dataset schema; defaults to its test_path.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Config file layered over the checkpoint's config (schema fields).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => {
            let mut config = RunConfig::resolve(a.preset.as_deref(), a.config.as_deref(), &a.overrides)?;
            if let Some(seed) = a.seed {
                config.seed = seed;
            }
            if let Some(out) = a.out {
                config.output_dir = out.display().to_string();
            }
            let start = Instant::now();
            let outcome = commands::run_train(&config)?;
            let mut text = format!("evaluation: {}\n", outcome.evaluation);
            if let Some(cov) = outcome.embedding_coverage {
                text += &format!("embedding coverage: {:.2}%\n", 100.0 * cov);
            }
            text += &metrics_table(&outcome.metrics, &outcome.labels);
            text += &format!(
                "wrote {} in {:.1}s\n",
                outcome.output_dir.display(),
                start.elapsed().as_secs_f64()
            );
            emit(&text);
            Ok(())
        }
        Command::Eval(a) => {
            let mut checkpoint = Checkpoint::load(&a.checkpoint)?;
            checkpoint.config = checkpoint.config.layered(a.config.as_deref(), &a.overrides)?;
            if let Some(out) = a.out {
                checkpoint.config.output_dir = out.display().to_string();
            } else if checkpoint.config.output_dir.is_empty() {
                let dir = a
                    .checkpoint
                    .parent()
                    .filter(|p| !p.as_os_str().is_empty())
                    .unwrap_or(std::path::Path::new("."));
                checkpoint.config.output_dir = dir.display().to_string();
            }
            let data = match a.data {
                Some(p) => p.display().to_string(),
                None => checkpoint.config.test_path.clone(),
            };
            let metrics = commands::run_eval(&checkpoint, &data, &checkpoint.config.output_dir)?;
            let path = PathBuf::from(&checkpoint.config.output_dir).join(EVAL_METRICS_FILE);
            emit(&format!(
                "{}wrote {}\n",
                metrics_table(&metrics, checkpoint.model.labels()),
                path.display()
            ));
            Ok(())
        }
        Command::Predict(a) => {
            let checkpoint = Checkpoint::load(&a.checkpoint)?;
            let stdin = std::io::stdin().lock();
            let stdout = BufWriter::new(std::io::stdout().lock());
            commands::run_predict(&checkpoint, stdin, stdout)?;
            Ok(())
        }
        Command::Gradcheck(a) => {
            let mut settings = GradcheckSettings::resolve(a.config.as_deref(), &a.overrides)?;
            if let Some(seed) = a.seed {
                settings.seed = seed;
            }
            let config = settings.to_config()?;
            let start = Instant::now();
            let (report, text) = commands::run_gradcheck_report(&config)?;
            emit(&format!("{text}runtime {:.2}s\n", start.elapsed().as_secs_f64()));
            if !report.all_finite() {
                Err(CliError::Numeric("non-finite gradient error".into()))
            } else if !report.passed() {
                Err(CliError::Check(format!(
                    "gradient check failed: worst relative error {:.3e}",
                    report.worst()
                )))
            } else {
                Ok(())
            }
        }
    }
}
