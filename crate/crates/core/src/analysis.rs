//! Evaluation metrics, length profiles, failure breakdowns and their CSV forms.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::digitcore::carry_profile;
use crate::engine::Scalar;
use crate::model::{ModelError, ModelParams};
use crate::rng::{stream_rng, Stream};
use crate::taskgen::{
    decode_output, encode_example, make_eval_set, Decoded, Example, TaskError, TaskKind, TaskSpec, TokenId,
};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("carry analysis is undefined for {0} (addition-family tasks only)")]
    CarryUndefined(TaskKind),
    #[error("prediction/target shape mismatch: {preds} vs {targets} tokens")]
    ShapeMismatch { preds: usize, targets: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: record {record}: {msg}")]
    Parse { path: PathBuf, record: usize, msg: String },
}

/// Scores of one model on one evaluation length.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: u64,
    pub length: usize,
    pub exact_match: f64,
    pub malformed_rate: f64,
    /// Index 0 is the leftmost output position.
    pub per_position: Vec<f64>,
    pub sample_count: usize,
}

fn check_shapes(preds: &[TokenId], targets: &[TokenId], n_out: usize) -> Result<(), AnalysisError> {
    if preds.len() != targets.len() || n_out == 0 || !preds.len().is_multiple_of(n_out) {
        return Err(AnalysisError::ShapeMismatch { preds: preds.len(), targets: targets.len() });
    }
    Ok(())
}

/// Fraction of rows whose `n_out` tokens all match, padding included.
pub fn exact_match(preds: &[TokenId], targets: &[TokenId], n_out: usize) -> Result<f64, AnalysisError> {
    check_shapes(preds, targets, n_out)?;
    let rows = preds.len() / n_out;
    if rows == 0 {
        return Ok(0.0);
    }
    let hits = preds.chunks(n_out).zip(targets.chunks(n_out)).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / rows as f64)
}

pub fn per_position_accuracy(preds: &[TokenId], targets: &[TokenId], n_out: usize) -> Result<Vec<f64>, AnalysisError> {
    check_shapes(preds, targets, n_out)?;
    let rows = preds.len() / n_out;
    let mut hits = vec![0usize; n_out];
    for (p, t) in preds.chunks(n_out).zip(targets.chunks(n_out)) {
        for (i, h) in hits.iter_mut().enumerate() {
            *h += usize::from(p[i] == t[i]);
        }
    }
    Ok(hits.into_iter().map(|h| if rows == 0 { 0.0 } else { h as f64 / rows as f64 }).collect())
}

pub fn malformed_rate(preds: &[TokenId], task: &TaskSpec) -> f64 {
    let n_out = task.n_out();
    let rows = preds.len() / n_out;
    if rows == 0 {
        return 0.0;
    }
    let bad = preds.chunks(n_out).filter(|p| decode_output(p, task) == Decoded::Malformed).count();
    bad as f64 / rows as f64
}

pub fn score(
    preds: &[TokenId],
    targets: &[TokenId],
    task: &TaskSpec,
    length: usize,
    step: u64,
    epoch: u64,
) -> Result<MetricRow, AnalysisError> {
    let n_out = task.n_out();
    Ok(MetricRow {
        step,
        epoch,
        length,
        exact_match: exact_match(preds, targets, n_out)?,
        malformed_rate: malformed_rate(preds, task),
        per_position: per_position_accuracy(preds, targets, n_out)?,
        sample_count: preds.len() / n_out,
    })
}

/// Input ids and target ids of a batch of examples, back to back.
pub fn encode_batch(examples: &[Example], task: &TaskSpec) -> Result<(Vec<TokenId>, Vec<TokenId>), TaskError> {
    let mut ids = Vec::with_capacity(examples.len() * task.input_len());
    let mut targets = Vec::with_capacity(examples.len() * task.n_out());
    for ex in examples {
        let (i, t) = encode_example(ex, task)?;
        ids.extend(i);
        targets.extend(t);
    }
    Ok((ids, targets))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub row: MetricRow,
    pub preds: Vec<TokenId>,
    pub targets: Vec<TokenId>,
}

pub const EVAL_CHUNK: usize = 256;

/// Predicts and scores a set of examples.
pub fn evaluate<T: Scalar>(
    model: &ModelParams<T>,
    task: &TaskSpec,
    examples: &[Example],
    length: usize,
    step: u64,
    epoch: u64,
) -> Result<Evaluation, AnalysisError> {
    let (ids, targets) = encode_batch(examples, task)?;
    let preds = if examples.is_empty() { Vec::new() } else { model.predict(&ids, examples.len(), EVAL_CHUNK)? };
    let row = score(&preds, &targets, task, length, step, epoch)?;
    Ok(Evaluation { row, preds, targets })
}

/// One row per length, each on a fresh set drawn from the `Eval { step, length }` stream of `seed`.
pub fn length_profile<T: Scalar>(
    model: &ModelParams<T>,
    task: &TaskSpec,
    lengths: &[usize],
    n_test: usize,
    n_train: usize,
    seed: u64,
    step: u64,
) -> Result<Vec<MetricRow>, AnalysisError> {
    lengths
        .iter()
        .map(|&n| {
            let mut rng = stream_rng(seed, Stream::Eval { step, length: n as u64 });
            let set = make_eval_set(task, n, n_test, n_train, &mut rng);
            Ok(evaluate(model, task, &set.examples, n, step, 0)?.row)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Bucket {
    pub count: usize,
    pub correct: usize,
}

impl Bucket {
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

/// Accuracy by total carries and by longest carry chain.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CarryBuckets {
    pub nc: BTreeMap<usize, Bucket>,
    pub mc: BTreeMap<usize, Bucket>,
}

pub fn carry_buckets(examples: &[Example], correct: &[bool], task: &TaskSpec) -> Result<CarryBuckets, AnalysisError> {
    if !task.kind.is_add_family() {
        return Err(AnalysisError::CarryUndefined(task.kind));
    }
    assert_eq!(examples.len(), correct.len(), "one correctness flag per example");
    let mut out = CarryBuckets::default();
    for (ex, &ok) in examples.iter().zip(correct) {
        let prof = carry_profile(&ex.x1, &ex.x2);
        for (map, key) in [(&mut out.nc, prof.nc), (&mut out.mc, prof.mc)] {
            let b = map.entry(key).or_default();
            b.count += 1;
            b.correct += usize::from(ok);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureReport {
    pub n_examples: usize,
    /// `None` for tasks where carries are undefined.
    pub carry: Option<CarryBuckets>,
    /// Number of wrong positions → number of wrong predictions with that many.
    pub wrong_digit_counts: BTreeMap<usize, usize>,
    /// 1-based position → number of single-error predictions wrong there.
    pub single_error_positions: BTreeMap<usize, usize>,
}

fn normalized(counts: &BTreeMap<usize, usize>) -> BTreeMap<usize, f64> {
    let total: usize = counts.values().sum();
    counts.iter().map(|(&k, &c)| (k, c as f64 / total as f64)).collect()
}

impl FailureReport {
    pub fn wrong_digit_hist(&self) -> BTreeMap<usize, f64> {
        normalized(&self.wrong_digit_counts)
    }

    pub fn single_error_position_hist(&self) -> BTreeMap<usize, f64> {
        normalized(&self.single_error_positions)
    }
}

/// Positionwise comparison over all `n_out` tokens; carry buckets only for addition-family tasks.
pub fn failure_report(
    examples: &[Example],
    preds: &[TokenId],
    task: &TaskSpec,
) -> Result<FailureReport, AnalysisError> {
    let n_out = task.n_out();
    let (_, targets) = encode_batch(examples, task)?;
    check_shapes(preds, &targets, n_out)?;
    let mut correct = Vec::with_capacity(examples.len());
    let mut wrong_digit_counts = BTreeMap::new();
    let mut single_error_positions = BTreeMap::new();
    for (p, t) in preds.chunks(n_out).zip(targets.chunks(n_out)) {
        let wrong: Vec<usize> = (0..n_out).filter(|&i| p[i] != t[i]).collect();
        correct.push(wrong.is_empty());
        if !wrong.is_empty() {
            *wrong_digit_counts.entry(wrong.len()).or_insert(0) += 1;
        }
        if wrong.len() == 1 {
            *single_error_positions.entry(wrong[0] + 1).or_insert(0) += 1;
        }
    }
    let carry = match carry_buckets(examples, &correct, task) {
        Ok(c) => Some(c),
        Err(AnalysisError::CarryUndefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(FailureReport { n_examples: examples.len(), carry, wrong_digit_counts, single_error_positions })
}

// ---- CSV ---------------------------------------------------------------------------------

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> AnalysisError + '_ {
    move |source| AnalysisError::Csv { path: path.to_path_buf(), source }
}

fn ensure_parent(path: &Path) -> Result<(), AnalysisError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| csv_err(path)(e.into())),
        _ => Ok(()),
    }
}

pub fn metrics_header(n_out: usize) -> Vec<String> {
    let mut h: Vec<String> =
        ["run_id", "step", "epoch", "length", "exact_match", "malformed_rate"].iter().map(|s| s.to_string()).collect();
    h.extend((1..=n_out).map(|i| format!("pos_{i}")));
    h.push("sample_count".into());
    h
}

/// Writes `metrics.csv`: header, then one record per row. Every row must have `n_out` positions.
pub fn write_metrics_csv(path: &Path, run_id: &str, n_out: usize, rows: &[MetricRow]) -> Result<(), AnalysisError> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(metrics_header(n_out)).map_err(csv_err(path))?;
    for (i, r) in rows.iter().enumerate() {
        if r.per_position.len() != n_out {
            return Err(AnalysisError::Parse {
                path: path.to_path_buf(),
                record: i + 1,
                msg: format!("row has {} positions, header has {n_out}", r.per_position.len()),
            });
        }
        let mut rec = vec![
            run_id.to_string(),
            r.step.to_string(),
            r.epoch.to_string(),
            r.length.to_string(),
            r.exact_match.to_string(),
            r.malformed_rate.to_string(),
        ];
        rec.extend(r.per_position.iter().map(f64::to_string));
        rec.push(r.sample_count.to_string());
        w.write_record(rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| csv_err(path)(e.into()))
}

fn field<V: std::str::FromStr>(
    rec: &csv::StringRecord,
    i: usize,
    path: &Path,
    record: usize,
) -> Result<V, AnalysisError> {
    rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| AnalysisError::Parse {
        path: path.to_path_buf(),
        record,
        msg: format!("bad or missing field {i}"),
    })
}

/// Reads `metrics.csv` back as (run_id, row) pairs.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<(String, MetricRow)>, AnalysisError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    let n_out = header.iter().filter(|h| h.starts_with("pos_")).count();
    if header.len() != n_out + 7 || header.get(0) != Some("run_id") {
        return Err(AnalysisError::Parse { path: path.to_path_buf(), record: 0, msg: "unexpected header".into() });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let n = i + 1;
        let row = MetricRow {
            step: field(&rec, 1, path, n)?,
            epoch: field(&rec, 2, path, n)?,
            length: field(&rec, 3, path, n)?,
            exact_match: field(&rec, 4, path, n)?,
            malformed_rate: field(&rec, 5, path, n)?,
            per_position: (0..n_out).map(|k| field(&rec, 6 + k, path, n)).collect::<Result<_, _>>()?,
            sample_count: field(&rec, 6 + n_out, path, n)?,
        };
        out.push((rec[0].to_string(), row));
    }
    Ok(out)
}

/// One line of `failure.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureRecord {
    pub bucket_kind: String,
    pub bucket_value: usize,
    pub count: usize,
    pub accuracy_or_freq: f64,
}

impl FailureReport {
    /// Carry buckets carry accuracies; error histograms carry frequencies.
    pub fn records(&self) -> Vec<FailureRecord> {
        let mut out = Vec::new();
        if let Some(c) = &self.carry {
            for (kind, map) in [("nc", &c.nc), ("mc", &c.mc)] {
                out.extend(map.iter().map(|(&v, b)| FailureRecord {
                    bucket_kind: kind.into(),
                    bucket_value: v,
                    count: b.count,
                    accuracy_or_freq: b.accuracy(),
                }));
            }
        }
        for (kind, counts, hist) in [
            ("err_count", &self.wrong_digit_counts, self.wrong_digit_hist()),
            ("err_pos", &self.single_error_positions, self.single_error_position_hist()),
        ] {
            out.extend(counts.iter().map(|(&v, &n)| FailureRecord {
                bucket_kind: kind.into(),
                bucket_value: v,
                count: n,
                accuracy_or_freq: hist[&v],
            }));
        }
        out
    }
}

pub const FAILURE_HEADER: [&str; 5] = ["run_id", "bucket_kind", "bucket_value", "count", "accuracy_or_freq"];

pub fn write_failure_csv(path: &Path, run_id: &str, report: &FailureReport) -> Result<(), AnalysisError> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(FAILURE_HEADER).map_err(csv_err(path))?;
    for r in report.records() {
        w.write_record([
            run_id.to_string(),
            r.bucket_kind,
            r.bucket_value.to_string(),
            r.count.to_string(),
            r.accuracy_or_freq.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| csv_err(path)(e.into()))
}

pub fn read_failure_csv(path: &Path) -> Result<Vec<(String, FailureRecord)>, AnalysisError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let n = i + 1;
        out.push((
            rec[0].to_string(),
            FailureRecord {
                bucket_kind: field(&rec, 1, path, n)?,
                bucket_value: field(&rec, 2, path, n)?,
                count: field(&rec, 3, path, n)?,
                accuracy_or_freq: field(&rec, 4, path, n)?,
            },
        ));
    }
    Ok(out)
}
