mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use kline_cli::config::{RunConfig, CONFIG_ENV};
use kline_core::Error;

use commands::{AuditArgs, ForecastArgs};

/// K-line foundation-model pipeline: clean data, train the tokenizer and the
/// autoregressive model, forecast, generate, evaluate and backtest.
#[derive(Parser)]
#[command(name = "kline", version)]
struct Cli {
    /// TOML run configuration. Falls back to $KLINE_CONFIG, then to defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; 1 selects the deterministic reference path.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean the input data and write the quality and segment reports.
    Clean {
        /// CSV file or directory overriding `paths.data`.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        frequency: Option<String>,
    },
    /// Train the tokenizer on cleaned windows.
    TrainTokenizer,
    /// Train the autoregressive model on tokenized sequences.
    TrainModel,
    /// Forecast the bars following the most recent clean history.
    Forecast {
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sample continuations of random real contexts.
    Generate {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score rolling forecasts and, optionally, generated data.
    Evaluate {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the top-k/drop-n backtest on model signals.
    Backtest {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the parameter breakdown for a factorized vocabulary.
    AuditParams {
        #[arg(long, default_value = "base")]
        preset: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        d_model: Option<usize>,
        /// Number of subtokens; repeat for several rows.
        #[arg(long)]
        splits: Vec<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the task named by `task` in the config.
    Run,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn load_config(path: Option<PathBuf>) -> Result<RunConfig> {
    let path = path.or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let cfg = match path {
        Some(p) => RunConfig::load(&p)?,
        None => {
            let cfg = RunConfig::default();
            cfg.check_paths()?;
            cfg
        }
    };
    Ok(cfg)
}

fn run_task(cfg: &RunConfig, task: &str) -> Result<()> {
    match task {
        "demo" => {
            for t in [
                "clean",
                "train-tokenizer",
                "train-model",
                "forecast",
                "generate",
                "evaluate",
                "backtest",
            ] {
                eprintln!("== {t}");
                run_task(cfg, t)?;
            }
        }
        "clean" => {
            commands::clean(cfg)?;
        }
        "train-tokenizer" => {
            commands::train_tokenizer_cmd(cfg)?;
        }
        "train-model" => {
            commands::train_model_cmd(cfg)?;
        }
        "forecast" => {
            commands::forecast_cmd(
                cfg,
                &ForecastArgs {
                    n_samples: None,
                    seed: None,
                    horizon: None,
                    output: None,
                },
            )?;
        }
        "generate" => {
            commands::generate_cmd(cfg, None, None)?;
        }
        "evaluate" => {
            commands::evaluate_cmd(cfg, None)?;
        }
        "backtest" => {
            commands::backtest_cmd(cfg, None)?;
        }
        "audit-params" => {
            commands::audit_params_cmd(&AuditArgs {
                preset: "base".into(),
                k: None,
                d_model: None,
                splits: Vec::new(),
                output: Some(cfg.report_path("audit_params.csv")),
            })?;
        }
        other => anyhow::bail!(Error::config("task", format!("unknown task {other:?}"))),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            anyhow::bail!(Error::config("--threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    if let Command::AuditParams {
        preset,
        k,
        d_model,
        splits,
        output,
    } = cli.command
    {
        commands::audit_params_cmd(&AuditArgs {
            preset,
            k,
            d_model,
            splits,
            output,
        })?;
        return Ok(());
    }
    let mut cfg = load_config(cli.config)?;
    match cli.command {
        Command::Clean { input, frequency } => {
            if let Some(i) = input {
                cfg.paths.data = i.to_string_lossy().into_owned();
            }
            if let Some(f) = frequency {
                cfg.data.frequency = f;
            }
            cfg.validate()?;
            cfg.check_paths()?;
            commands::clean(&cfg)?;
        }
        Command::TrainTokenizer => run_task(&cfg, "train-tokenizer")?,
        Command::TrainModel => run_task(&cfg, "train-model")?,
        Command::Forecast {
            n_samples,
            seed,
            horizon,
            output,
        } => {
            commands::forecast_cmd(
                &cfg,
                &ForecastArgs {
                    n_samples,
                    seed,
                    horizon,
                    output,
                },
            )?;
        }
        Command::Generate { seed, output } => {
            commands::generate_cmd(&cfg, seed, output)?;
        }
        Command::Evaluate { output } => {
            commands::evaluate_cmd(&cfg, output)?;
        }
        Command::Backtest { output } => {
            commands::backtest_cmd(&cfg, output)?;
        }
        Command::Run => {
            let task = cfg.task.clone();
            run_task(&cfg, &task)?;
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()),
        Command::AuditParams { .. } => unreachable!("handled above"),
    }
    Ok(())
}

/// 2 for configuration errors, 3 for data errors, 4 for numeric failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config { .. } => 2,
                Error::Data(_) | Error::Parse { .. } | Error::Checkpoint(_) | Error::Precondition(_) => 3,
                Error::NonFinite { .. } => 4,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
