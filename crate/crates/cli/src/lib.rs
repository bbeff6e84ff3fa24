//! Command-line front end: data preparation, pretraining, training, evaluation, scans and ablations.

pub mod commands;
pub mod config;
pub mod error;
pub mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use prefixsub_core::data::{DataSchema, SyntheticKind};
use prefixsub_core::eval::MetricKind;

use crate::commands::*;
use crate::config::RunConfig;
use crate::error::{CliError, EXIT_INPUT, EXIT_OK};
use crate::run::parse_suite;

#[derive(Debug, Parser)]
#[command(name = "prefixsub", version, about = "Prefix-tuning with simplex subspaces on a frozen toy encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a labelled corpus into a test set and K-shot train/validation replicates.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        /// `single:class:2`, `pair:class:2`, `pair:reg`, ...
        #[arg(long)]
        schema: DataSchema,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 10)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Task name recorded in the manifest; defaults to the input file stem.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        force: bool,
    },
    /// Masked-token pretraining of a base encoder.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Repeatable; each input needs a matching --schema.
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        #[arg(long, required = true)]
        schema: Vec<DataSchema>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train one replicate of a prepared directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        replicate: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on a split and print the metric.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        metric: Option<MetricKind>,
        /// Average over sampled simplex members instead of the centroid.
        #[arg(long)]
        stochastic: bool,
        #[arg(long, default_value_t = 10)]
        n_concat: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        schema: Option<DataSchema>,
        /// Evaluate a single vertex of a simplex checkpoint.
        #[arg(long)]
        vertex: Option<usize>,
    },
    /// Evaluate evenly spaced points on the segment between two vertices.
    Scan {
        #[arg(long)]
        model_line: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value_t = 11)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metric: Option<MetricKind>,
        #[arg(long)]
        schema: Option<DataSchema>,
        #[arg(long)]
        force: bool,
    },
    /// Train method variants on every prepared replicate and compare them with the full method.
    Ablate {
        /// Comma-separated variants, or `all`.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Train every replicate of every prepared directory under --data.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Write a synthetic corpus.
    Generate {
        #[arg(long)]
        kind: SyntheticKind,
        #[arg(long, default_value_t = 2000)]
        size: usize,
        #[arg(long, default_value_t = 20)]
        vocab: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn execute(cmd: Command) -> error::Result<()> {
    match cmd {
        Command::Prepare {
            input,
            schema,
            k,
            replicates,
            seed,
            out,
            task,
            force,
        } => {
            if !input.is_file() {
                return Err(CliError::Input(format!("{}: input file not found", input.display())));
            }
            prepare(&PrepareArgs {
                input,
                schema,
                k,
                replicates,
                seed,
                out,
                task,
                force,
            })?;
        }
        Command::Pretrain {
            config,
            input,
            schema,
            out,
            force,
        } => {
            if input.len() != schema.len() {
                return Err(CliError::Input(format!(
                    "{} --input but {} --schema values",
                    input.len(),
                    schema.len()
                )));
            }
            let cfg = RunConfig::load(&config)?;
            let pairs: Vec<_> = input.into_iter().zip(schema).collect();
            let losses = pretrain(&cfg, &pairs, &out, force)?;
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                println!("{first:.4} -> {last:.4}");
            }
        }
        Command::Train {
            config,
            data,
            replicate,
            out,
            force,
        } => {
            let cfg = RunConfig::load(&config)?;
            let r = train(&cfg, &data, replicate, &out, force)?;
            println!("{} {}", r.metric, r.test_metric);
        }
        Command::Eval {
            model,
            split,
            metric,
            stochastic,
            n_concat,
            seed,
            schema,
            vertex,
        } => {
            let v = eval(&EvalArgs {
                model,
                split,
                metric,
                stochastic,
                n_concat,
                seed,
                schema,
                vertex,
            })?;
            println!("{v}");
        }
        Command::Scan {
            model_line,
            split,
            points,
            out,
            metric,
            schema,
            force,
        } => {
            let (_, s) = scan(&ScanArgs {
                model_line,
                split,
                points,
                out,
                metric,
                schema,
                force,
            })?;
            println!("best alpha {} {} {}", s.best_alpha, s.metric, s.best_metric);
        }
        Command::Ablate {
            suite,
            data,
            out,
            config,
            workers,
            force,
        } => {
            let cfg = RunConfig::load(&config)?;
            let suite = parse_suite(&suite)?;
            let report = ablate(&cfg, &suite, &data, &out, workers.unwrap_or(cfg.workers), force)?;
            print!("{}", run::render_table(&report.rows));
        }
        Command::Sweep {
            config,
            data,
            out,
            workers,
            force,
        } => {
            let cfg = RunConfig::load(&config)?;
            let results = sweep(&cfg, &data, &out, workers.unwrap_or(cfg.workers), force)?;
            log::info!("{} runs written under {}", results.len(), out.display());
        }
        Command::Generate {
            kind,
            size,
            vocab,
            noise,
            seed,
            out,
            force,
        } => generate(&GenerateArgs {
            kind,
            size,
            vocab,
            noise,
            seed,
            out,
            force,
        })?,
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
