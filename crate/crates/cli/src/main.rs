use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use lengen_cli::config::parse_lengths;
use lengen_cli::{
    cmd_eval, cmd_gen, cmd_report, cmd_sweep, run_experiment, CliError, ConfigError, EvalRequest, ExperimentConfig,
    Precision, SweepConfig,
};
use lengen_core::trainer::RunStatus;
use lengen_core::MetricRow;

#[derive(Parser)]
#[command(name = "lengen", version, about = "Train and analyze transformers on integer arithmetic")]
struct Cli {
    /// Master seed (overrides data.seed, or the evaluation seed for `eval`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Numeric precision.
    #[arg(long, global = true)]
    precision: Option<Precision>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dump the training epochs, priming/fine-tune sets and evaluation sets of a config.
    Gen {
        #[command(flatten)]
        source: ConfigSource,
        /// Number of training epochs to dump.
        #[arg(long, default_value_t = 1)]
        epochs: usize,
    },
    /// Train (or fine-tune) a model and write a run directory.
    Train {
        #[command(flatten)]
        source: ConfigSource,
        /// Print the resolved config and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate a checkpoint at several operand lengths.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Lengths such as `6-20` or `3,4,8`.
        #[arg(long)]
        lengths: String,
        /// Examples per length.
        #[arg(long, default_value_t = 10000)]
        n_test: usize,
        /// Also write failure.csv (carry buckets and wrong-digit histograms).
        #[arg(long)]
        failure_report: bool,
    },
    /// Re-derive failure.csv from a saved predictions.tsv.
    Report {
        #[arg(long)]
        predictions: PathBuf,
        /// Restrict to one operand length.
        #[arg(long)]
        length: Option<usize>,
    },
    /// Run a grid of configs over several seeds and aggregate.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Parallel runs (overrides the sweep file).
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(clap::Args)]
struct ConfigSource {
    /// Config file (flat dotted TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset applied before the config file's keys.
    #[arg(long)]
    preset: Option<String>,
    /// Override a key, e.g. `--set model.d_model=256`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn split_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("override {s:?} is not KEY=VALUE"))
}

fn build_config(cli: &Cli, source: &ConfigSource) -> Result<ExperimentConfig, Box<dyn std::error::Error>> {
    let mut cfg = ExperimentConfig::default();
    if let Some(p) = &source.preset {
        cfg.set("preset", p)?;
    }
    if let Some(path) = &source.config {
        cfg.apply_file(path)?;
    }
    let overrides = source.overrides.iter().map(|s| split_override(s)).collect::<Result<Vec<_>, _>>()?;
    cfg.apply(&overrides)?;
    if let Some(seed) = cli.seed {
        cfg.data.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    if let Some(p) = cli.precision {
        cfg.precision = p;
    }
    Ok(cfg)
}

fn describe(rows: &[MetricRow]) -> String {
    rows.iter().map(|r| format!("{}:{:.3}", r.length, r.exact_match)).collect::<Vec<_>>().join(" ")
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match &cli.command {
        Command::Gen { source, epochs } => {
            let cfg = build_config(&cli, source)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
            for p in cmd_gen(&cfg, *epochs, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Train { source, dry_run } => {
            let cfg = build_config(&cli, source)?;
            let resolved = cfg.resolve()?;
            if *dry_run {
                print!("{}", resolved.config.to_toml());
                println!("# run id {}, {} parameters", resolved.run_id(), resolved.model.parameter_count());
                return Ok(ExitCode::SUCCESS);
            }
            let start = Instant::now();
            let mut observer = |epoch: u64, loss: f64, rows: &[MetricRow]| {
                if !rows.is_empty() {
                    eprintln!(
                        "[{:>7.1}s] epoch {epoch:>6} loss {loss:.4}  {}",
                        start.elapsed().as_secs_f64(),
                        describe(rows)
                    );
                }
            };
            let out = run_experiment(&cfg, &mut observer)?;
            println!("{}", out.dir.display());
            if let RunStatus::Diverged { step, epoch, loss } = out.record.status {
                eprintln!("run diverged: loss {loss} at step {step} (epoch {epoch}); partial results written");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Eval { checkpoint, lengths, n_test, failure_report } => {
            let req = EvalRequest {
                checkpoint: checkpoint.clone(),
                lengths: parse_lengths(lengths)?,
                n_test: *n_test,
                seed: cli.seed.unwrap_or(0),
                out: cli.out.clone().unwrap_or_else(|| PathBuf::from("eval")),
                failure_report: *failure_report,
                precision: cli.precision.unwrap_or_default(),
            };
            let out = cmd_eval(&req)?;
            for r in &out.rows {
                println!("length {:>3}  exact {:.4}  malformed {:.4}", r.length, r.exact_match, r.malformed_rate);
            }
            if let Some(report) = &out.failure {
                if report.carry.is_none() {
                    eprintln!("carry buckets skipped: undefined for {} tasks", out.task.kind);
                }
            }
            println!("{}", out.metrics_path.display());
        }
        Command::Report { predictions, length } => {
            let out = cli.out.clone().unwrap_or_else(|| predictions.parent().map(PathBuf::from).unwrap_or_default());
            let (report, path) = cmd_report(predictions, *length, &out)?;
            if report.carry.is_none() {
                eprintln!("carry buckets skipped: task is not in the addition family");
            }
            println!("{}", path.display());
        }
        Command::Sweep { config, workers } => {
            let mut sweep = SweepConfig::load(config)?;
            if let Some(w) = workers {
                sweep.workers = (*w).max(1);
            }
            if let Some(out) = &cli.out {
                sweep.out = out.clone();
            }
            if let Some(p) = cli.precision {
                sweep.base.precision = p;
            }
            let out = cmd_sweep(&sweep, true)?;
            let failed = out.runs.iter().filter(|r| r.outcome.is_err()).count();
            println!("{}", out.aggregate_path.display());
            if failed > 0 {
                eprintln!("{failed} run(s) failed, see {}", out.failures_path.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            let e: &dyn std::error::Error = e.as_ref();
            eprintln!("error: {e}");
            let config_error = e.downcast_ref::<ConfigError>().is_some()
                || matches!(e.downcast_ref::<CliError>(), Some(CliError::Config(_)));
            if config_error {
                return ExitCode::from(64);
            }
            ExitCode::FAILURE
        }
    }
}
