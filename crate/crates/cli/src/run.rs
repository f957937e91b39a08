//! `train`, `eval`, `gen` and `report`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use lengen_core::analysis::{evaluate, failure_report, write_failure_csv, write_metrics_csv, FailureReport, MetricRow};
use lengen_core::engine::Scalar;
use lengen_core::model::{load_checkpoint_with_meta, Metadata};
use lengen_core::rng::{stream_rng, Stream};
use lengen_core::taskgen::{
    encode_example, make_eval_set, make_train_set, write_examples_tsv, Example, Procedure, TaskSpec, Vocab,
};
use lengen_core::trainer::{fine_tune, task_from_metadata, task_metadata, train, Observer, RunRecord, RunStatus};

use crate::config::{pairs_to_toml, ExperimentConfig, Precision, Resolved};
use crate::CliError;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// The evaluation set used for `length` under `seed`. Training runs use the same sets,
/// so `eval` on a final checkpoint reproduces the run's last metric rows.
pub fn eval_examples(task: &TaskSpec, length: usize, count: usize, n_train: usize, seed: u64) -> Vec<Example> {
    let mut rng = stream_rng(seed, Stream::Eval { step: 0, length: length as u64 });
    make_eval_set(task, length, count, n_train, &mut rng).examples
}

/// Result of a `train` invocation.
#[derive(Debug)]
pub struct RunOutput {
    pub run_id: String,
    pub dir: PathBuf,
    pub resolved: Resolved,
    pub record: RunRecord,
    /// Digest of the final parameters.
    pub digest: String,
}

impl RunOutput {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.toml")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoints").join("final.ckpt")
    }
}

fn write_manifest(dir: &Path, r: &Resolved, run_id: &str, extra: &[(&str, String)]) -> Result<(), CliError> {
    let mut pairs = r.config.pairs();
    pairs.push(("manifest.code_version".into(), env!("CARGO_PKG_VERSION").into()));
    pairs.push(("manifest.run_id".into(), run_id.into()));
    pairs.push(("manifest.parameters".into(), r.model.parameter_count().to_string()));
    if let Some(p) = &r.preset {
        pairs.push(("manifest.preset".into(), p.clone()));
    }
    pairs.extend(extra.iter().map(|(k, v)| (format!("manifest.{k}"), v.clone())));
    let path = dir.join("manifest.toml");
    fs::write(&path, pairs_to_toml(&pairs)).map_err(io_err(&path))
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<(), CliError> {
    let csv_err = |e: csv::Error| CliError::Csv { path: path.to_path_buf(), source: e };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["epoch", "mean_loss"]).map_err(csv_err)?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:?}")]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })
}

fn execute<T: Scalar>(
    r: &Resolved,
    schedule: &lengen_core::trainer::Schedule,
    observer: &mut Observer<'_>,
) -> Result<(RunRecord, String), CliError> {
    let (record, model) = match r.plan.procedure {
        Procedure::FineTune => {
            let path = r.config.train.init_checkpoint.as_deref().expect("validated: fine-tune has a checkpoint");
            let (model, meta) = load_checkpoint_with_meta::<T>(path)?;
            if !meta.is_empty() {
                let (stored, _) = task_from_metadata(&meta)?;
                if stored != r.task {
                    return Err(CliError::Geometry(format!(
                        "checkpoint was trained on {stored:?}, config describes {:?}",
                        r.task
                    )));
                }
            }
            fine_tune(model, &r.plan, &r.optim, schedule, observer)?
        }
        _ => train::<T>(&r.plan, &r.model, &r.optim, schedule, observer)?,
    };
    Ok((record, model.digest()))
}

/// Runs one experiment: validates, trains, and writes the run directory
/// (`manifest.toml`, `metrics.csv`, `losses.csv`, `checkpoints/`).
pub fn run_experiment(cfg: &ExperimentConfig, observer: &mut Observer<'_>) -> Result<RunOutput, CliError> {
    let resolved = cfg.resolve()?;
    let run_id = resolved.run_id();
    let dir = resolved.config.output.dir.join(&run_id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let started = unix_now();
    write_manifest(&dir, &resolved, &run_id, &[("status", "running".into()), ("started_unix", started.to_string())])?;

    let mut schedule = resolved.schedule.clone();
    schedule.checkpoint_dir = Some(dir.join("checkpoints"));
    let (record, digest) = match resolved.precision {
        Precision::F32 => execute::<f32>(&resolved, &schedule, observer)?,
        Precision::F64 => execute::<f64>(&resolved, &schedule, observer)?,
    };

    write_metrics_csv(&dir.join("metrics.csv"), &run_id, resolved.task.n_out(), &record.rows)?;
    write_losses(&dir.join("losses.csv"), &record.epoch_losses)?;
    let status = match record.status {
        RunStatus::Completed => "completed".to_string(),
        RunStatus::Diverged { step, epoch, loss } => format!("diverged: loss {loss} at step {step} (epoch {epoch})"),
    };
    let mut artifacts = vec!["metrics.csv".to_string(), "losses.csv".to_string()];
    if let Some(p) = &record.final_checkpoint {
        artifacts.push(p.strip_prefix(&dir).unwrap_or(p).display().to_string());
    }
    write_manifest(
        &dir,
        &resolved,
        &run_id,
        &[
            ("status", status),
            ("started_unix", started.to_string()),
            ("finished_unix", unix_now().to_string()),
            ("steps", record.steps.to_string()),
            ("wall_clock_secs", format!("{:.3}", record.wall_clock_secs)),
            ("final_digest", digest.clone()),
            ("artifacts", artifacts.join(",")),
        ],
    )?;
    Ok(RunOutput { run_id, dir, resolved, record, digest })
}

/// Loads a config file, applies `key=value` overrides and runs it.
pub fn cmd_train(
    config_path: &Path,
    overrides: &[(String, String)],
    observer: &mut Observer<'_>,
) -> Result<RunOutput, CliError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    cfg.apply(overrides)?;
    run_experiment(&cfg, observer)
}

/// Arguments of `eval`.
#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub lengths: Vec<usize>,
    pub n_test: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub failure_report: bool,
    pub precision: Precision,
}

#[derive(Debug)]
pub struct EvalOutput {
    pub run_id: String,
    pub task: TaskSpec,
    pub rows: Vec<MetricRow>,
    pub failure: Option<FailureReport>,
    pub metrics_path: PathBuf,
    pub predictions_path: PathBuf,
    pub failure_path: Option<PathBuf>,
}

fn prediction_header(meta: &Metadata) -> String {
    let fields: Vec<String> = meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("# {}\nlength\tx1\tx2\ttarget\tprediction\n", fields.join(" "))
}

fn eval_with<T: Scalar>(req: &EvalRequest) -> Result<EvalOutput, CliError> {
    let (model, meta) = load_checkpoint_with_meta::<T>(&req.checkpoint)?;
    let (task, n_train) = task_from_metadata(&meta)?;
    if model.config.n_out != task.n_out() {
        return Err(CliError::Geometry(format!(
            "checkpoint model emits {} tokens but its task needs {}",
            model.config.n_out,
            task.n_out()
        )));
    }
    if let Some(&n) = req.lengths.iter().find(|&&n| n == 0 || n > task.n_test) {
        return Err(CliError::Geometry(format!(
            "length {n} is outside the checkpoint's operand width 1..={}",
            task.n_test
        )));
    }
    if req.lengths.is_empty() || req.n_test == 0 {
        return Err(CliError::Geometry("need at least one length and a positive test size".into()));
    }
    fs::create_dir_all(&req.out).map_err(io_err(&req.out))?;
    let run_id = format!("eval-{}", &model.digest()[..12]);

    let pred_path = req.out.join("predictions.tsv");
    let file = fs::File::create(&pred_path).map_err(io_err(&pred_path))?;
    let mut pred_out = BufWriter::new(file);
    pred_out.write_all(prediction_header(&task_metadata(&task, n_train)).as_bytes()).map_err(io_err(&pred_path))?;

    let mut rows = Vec::new();
    let mut all_examples = Vec::new();
    let mut all_preds = Vec::new();
    for &n in &req.lengths {
        let examples = eval_examples(&task, n, req.n_test, n_train, req.seed);
        let ev = evaluate(&model, &task, &examples, n, 0, 0)?;
        let n_out = task.n_out();
        for ((ex, p), t) in examples.iter().zip(ev.preds.chunks(n_out)).zip(ev.targets.chunks(n_out)) {
            writeln!(pred_out, "{n}\t{}\t{}\t{}\t{}", ex.x1, ex.x2, Vocab::render(t), Vocab::render(p))
                .map_err(io_err(&pred_path))?;
        }
        rows.push(ev.row);
        all_preds.extend(ev.preds);
        all_examples.extend(examples);
    }
    pred_out.flush().map_err(io_err(&pred_path))?;

    let metrics_path = req.out.join("metrics.csv");
    write_metrics_csv(&metrics_path, &run_id, task.n_out(), &rows)?;
    let (failure, failure_path) = if req.failure_report {
        let report = failure_report(&all_examples, &all_preds, &task)?;
        let path = req.out.join("failure.csv");
        write_failure_csv(&path, &run_id, &report)?;
        (Some(report), Some(path))
    } else {
        (None, None)
    };
    Ok(EvalOutput { run_id, task, rows, failure, metrics_path, predictions_path: pred_path, failure_path })
}

/// Evaluates a checkpoint at several lengths on fresh sets drawn from `seed`.
pub fn cmd_eval(req: &EvalRequest) -> Result<EvalOutput, CliError> {
    match req.precision {
        Precision::F32 => eval_with::<f32>(req),
        Precision::F64 => eval_with::<f64>(req),
    }
}

/// Saved predictions: examples, predicted tokens and the task they belong to.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub task: TaskSpec,
    pub n_train: usize,
    pub lengths: Vec<usize>,
    pub examples: Vec<Example>,
    pub preds: Vec<u8>,
}

pub fn read_predictions(path: &Path) -> Result<Predictions, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |line: usize, msg: String| CliError::Parse { path: path.to_path_buf(), line, msg };
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .and_then(|(_, l)| l.strip_prefix("# "))
        .ok_or_else(|| bad(1, "missing `# task...` header".into()))?;
    let meta: Metadata = header
        .split_whitespace()
        .filter_map(|kv| kv.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let (task, n_train) = task_from_metadata(&meta)?;
    let mut out = Predictions { task, n_train, lengths: Vec::new(), examples: Vec::new(), preds: Vec::new() };
    for (i, line) in lines {
        if line.starts_with("length\t") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad(i + 1, format!("expected 5 fields, got {}", f.len())));
        }
        let length: usize = f[0].parse().map_err(|_| bad(i + 1, "bad length".into()))?;
        let x1 = f[1].parse().map_err(|e| bad(i + 1, format!("x1: {e}")))?;
        let x2 = f[2].parse().map_err(|e| bad(i + 1, format!("x2: {e}")))?;
        let ex = Example::new(&task, x1, x2);
        let target = Vocab::parse(f[3]).ok_or_else(|| bad(i + 1, "bad target tokens".into()))?;
        let pred = Vocab::parse(f[4]).ok_or_else(|| bad(i + 1, "bad prediction tokens".into()))?;
        let (_, expected) = encode_example(&ex, &task)?;
        if target != expected {
            return Err(bad(i + 1, "stored target disagrees with the recomputed label".into()));
        }
        if pred.len() != task.n_out() {
            return Err(bad(i + 1, format!("prediction has {} tokens, expected {}", pred.len(), task.n_out())));
        }
        out.lengths.push(length);
        out.examples.push(ex);
        out.preds.extend(pred);
    }
    Ok(out)
}

/// Re-derives a failure report from saved predictions, optionally for one length only.
pub fn cmd_report(predictions: &Path, length: Option<usize>, out: &Path) -> Result<(FailureReport, PathBuf), CliError> {
    let p = read_predictions(predictions)?;
    let n_out = p.task.n_out();
    let keep: Vec<usize> = (0..p.examples.len()).filter(|&i| length.is_none_or(|n| p.lengths[i] == n)).collect();
    let examples: Vec<Example> = keep.iter().map(|&i| p.examples[i].clone()).collect();
    let preds: Vec<u8> = keep.iter().flat_map(|&i| p.preds[i * n_out..(i + 1) * n_out].iter().copied()).collect();
    let report = failure_report(&examples, &preds, &p.task)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join("failure.csv");
    let run_id = predictions
        .parent()
        .and_then(|d| d.file_name())
        .map_or_else(|| "report".to_string(), |d| d.to_string_lossy().into_owned());
    write_failure_csv(&path, &run_id, &report)?;
    Ok((report, path))
}

/// Writes the datasets a config would train and evaluate on.
pub fn cmd_gen(cfg: &ExperimentConfig, epochs: usize, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let r = cfg.resolve()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let set = make_train_set(&r.plan)?;
    let mut written = Vec::new();
    let mut dump = |name: String, examples: &[Example]| -> Result<(), CliError> {
        let path = out.join(name);
        write_examples_tsv(&path, examples)?;
        written.push(path);
        Ok(())
    };
    if r.plan.procedure == Procedure::FineTune {
        dump("fine.tsv".into(), &set.fine)?;
    } else {
        for e in 1..=epochs as u64 {
            let ex: Vec<Example> = set.epoch(e).into_iter().map(|x| x.0).collect();
            dump(format!("train-epoch-{e}.tsv"), &ex)?;
        }
        if let Some(p) = &set.priming {
            dump("priming.tsv".into(), &p.fixed_examples)?;
        }
    }
    for &n in &r.schedule.eval_lengths {
        dump(format!("eval-{n}.tsv"), &eval_examples(&r.task, n, r.schedule.eval_count, r.plan.n_train, r.plan.seed))?;
    }
    Ok(written)
}
