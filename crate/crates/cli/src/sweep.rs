//! Grid sweeps over config keys, averaged over seeds.
//!
//! A sweep file looks like
//!
//! ```toml
//! base = "addition.toml"        # optional, relative to the sweep file
//! seeds = [1, 2, 3]
//! workers = 2
//! threshold = 0.75
//!
//! [set]                         # fixed overrides for every run
//! "train.epochs" = 50
//!
//! [axes]
//! "model.d_model" = [64, 128]
//!
//! [search]                      # optional minimal-value search per cell
//! key = "train.epsilon"
//! lo = 0.0
//! hi = 0.05
//! step = 0.005
//! length = 35
//! success = 0.9
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use lengen_core::analysis::read_metrics_csv;
use lengen_core::trainer::quiet;

use crate::config::{flatten_toml, ConfigError, ExperimentConfig};
use crate::run::run_experiment;
use crate::CliError;

/// Minimal-value search over one numeric key.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpec {
    pub key: String,
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
    /// Evaluation length whose accuracy decides success.
    pub length: usize,
    /// Mean accuracy counted as success.
    pub success: f64,
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub axes: Vec<(String, Vec<String>)>,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub threshold: f64,
    pub out: PathBuf,
    pub search: Option<SearchSpec>,
}

fn sweep_err(msg: impl Into<String>) -> CliError {
    CliError::Sweep(msg.into())
}

fn scalar_string(v: &toml::Value) -> Result<String, CliError> {
    match v {
        toml::Value::String(s) => Ok(s.clone()),
        toml::Value::Integer(i) => Ok(i.to_string()),
        toml::Value::Float(f) => Ok(f.to_string()),
        toml::Value::Boolean(b) => Ok(b.to_string()),
        other => Err(sweep_err(format!("axis values must be scalars, got {other}"))),
    }
}

fn axis_values(prefix: &str, t: &toml::Table, out: &mut Vec<(String, Vec<String>)>) -> Result<(), CliError> {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(inner) => axis_values(&key, inner, out)?,
            toml::Value::Array(items) => {
                out.push((key, items.iter().map(scalar_string).collect::<Result<_, _>>()?));
            }
            other => out.push((key, vec![scalar_string(other)?])),
        }
    }
    Ok(())
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, dir).map_err(|e| match e {
            CliError::Config(ConfigError::Toml { source, .. }) => {
                CliError::Config(ConfigError::Toml { path: path.to_path_buf(), source })
            }
            other => other,
        })
    }

    /// Parses a sweep description; `base` paths resolve against `dir`.
    pub fn from_toml_str(text: &str, dir: &Path) -> Result<Self, CliError> {
        let table: toml::Table = text
            .parse()
            .map_err(|source| CliError::Config(ConfigError::Toml { path: PathBuf::from("<sweep>"), source }))?;
        let mut base = match table.get("base") {
            Some(toml::Value::String(p)) => ExperimentConfig::load(&dir.join(p))?,
            Some(_) => return Err(sweep_err("base must be a path string")),
            None => ExperimentConfig::default(),
        };
        if let Some(toml::Value::String(p)) = table.get("preset") {
            base.set("preset", p)?;
        }
        if let Some(t) = table.get("set") {
            let t = t.as_table().ok_or_else(|| sweep_err("[set] must be a table"))?;
            base.apply(&flatten_toml(t)?)?;
        }
        let mut axes = Vec::new();
        if let Some(t) = table.get("axes") {
            axis_values("", t.as_table().ok_or_else(|| sweep_err("[axes] must be a table"))?, &mut axes)?;
        }
        let mut seeds = vec![base.data.seed];
        if let Some(idx) = axes.iter().position(|(k, _)| k == "seeds" || k == "data.seed") {
            let (_, vals) = axes.remove(idx);
            seeds = vals.iter().map(|v| v.parse()).collect::<Result<_, _>>().map_err(|_| sweep_err("bad seed"))?;
        }
        if let Some(v) = table.get("seeds") {
            let arr = v.as_array().ok_or_else(|| sweep_err("seeds must be an array"))?;
            seeds = arr
                .iter()
                .map(|x| x.as_integer().and_then(|i| u64::try_from(i).ok()))
                .collect::<Option<_>>()
                .ok_or_else(|| sweep_err("seeds must be non-negative integers"))?;
        }
        if seeds.is_empty() {
            return Err(sweep_err("at least one seed is required"));
        }
        for (k, vals) in &axes {
            if vals.is_empty() {
                return Err(sweep_err(format!("axis {k} has no values")));
            }
            // every value must be accepted by the same setter the runs will use
            for v in vals {
                base.clone().set(k, v)?;
            }
        }
        let int = |k: &str, d: usize| -> Result<usize, CliError> {
            match table.get(k) {
                None => Ok(d),
                Some(v) => v
                    .as_integer()
                    .and_then(|i| usize::try_from(i).ok())
                    .ok_or_else(|| sweep_err(format!("{k} must be a non-negative integer"))),
            }
        };
        let float = |t: &toml::Table, k: &str, d: Option<f64>| -> Result<f64, CliError> {
            match t.get(k) {
                None => d.ok_or_else(|| sweep_err(format!("missing {k}"))),
                Some(v) => v
                    .as_float()
                    .or_else(|| v.as_integer().map(|i| i as f64))
                    .ok_or_else(|| sweep_err(format!("{k} must be a number"))),
            }
        };
        let workers = int("workers", 1)?.max(1);
        let threshold = float(&table, "threshold", Some(0.75))?;
        let out = match table.get("out") {
            Some(toml::Value::String(p)) => PathBuf::from(p),
            _ => base.output.dir.clone(),
        };
        let search = match table.get("search") {
            None => None,
            Some(v) => {
                let t = v.as_table().ok_or_else(|| sweep_err("[search] must be a table"))?;
                let key = t.get("key").and_then(|k| k.as_str()).unwrap_or("train.epsilon").to_string();
                let spec = SearchSpec {
                    key,
                    lo: float(t, "lo", None)?,
                    hi: float(t, "hi", None)?,
                    step: float(t, "step", None)?,
                    length: t
                        .get("length")
                        .and_then(|x| x.as_integer())
                        .and_then(|i| usize::try_from(i).ok())
                        .ok_or_else(|| sweep_err("search.length must be a positive integer"))?,
                    success: float(t, "success", Some(0.9))?,
                };
                if !(spec.step > 0.0 && spec.lo <= spec.hi) {
                    return Err(sweep_err("search needs lo <= hi and step > 0"));
                }
                Some(spec)
            }
        };
        Ok(SweepConfig { base, axes, seeds, workers, threshold, out, search })
    }

    /// Cross product of the axes, first axis varying slowest.
    pub fn cells(&self) -> Vec<Vec<(String, String)>> {
        let mut cells = vec![Vec::new()];
        for (k, vals) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    vals.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((k.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

/// Largest evaluated length whose accuracy reaches `threshold`.
pub fn largest_length_at(points: &[(usize, f64)], threshold: f64) -> Option<usize> {
    points.iter().filter(|(_, a)| *a >= threshold).map(|(n, _)| *n).max()
}

/// Evenly spaced values from `lo` to `hi` inclusive.
pub fn search_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

/// Smallest grid value for which a monotone predicate holds, by bisection.
///
/// Returns `None` if the predicate fails at the largest value.
pub fn bisect_grid<E>(grid: &[f64], mut ok: impl FnMut(f64) -> Result<bool, E>) -> Result<Option<f64>, E> {
    let Some(&last) = grid.last() else { return Ok(None) };
    if !ok(last)? {
        return Ok(None);
    }
    // invariant: grid[hi] succeeds, everything at or below lo fails (lo = -1 is virtual)
    let (mut lo, mut hi) = (-1isize, grid.len() as isize - 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if ok(grid[mid as usize])? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(grid[hi as usize]))
}

/// Runs `f` over `jobs` on at most `workers` threads, preserving job order.
pub fn run_bounded<J: Sync, R: Send>(jobs: &[J], workers: usize, f: impl Fn(&J) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("workers joined").into_iter().map(|r| r.expect("every job ran")).collect()
}

/// One run of a sweep.
#[derive(Debug, Clone)]
pub struct RunJob {
    pub cell: usize,
    pub seed: u64,
    pub assignments: Vec<(String, String)>,
    pub run_id: String,
}

/// Outcome of one run: final accuracy per length, or the error text.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub job: RunJob,
    pub outcome: Result<(PathBuf, BTreeMap<usize, f64>), String>,
}

/// Final-evaluation accuracy per length, read back from a run's metrics file.
pub fn final_accuracy(metrics: &Path) -> Result<BTreeMap<usize, f64>, CliError> {
    let rows = read_metrics_csv(metrics)?;
    let last = rows.iter().map(|(_, r)| r.step).max().unwrap_or(0);
    Ok(rows.iter().filter(|(_, r)| r.step == last).map(|(_, r)| (r.length, r.exact_match)).collect())
}

fn execute_job(base: &ExperimentConfig, runs_dir: &Path, job: &RunJob, progress: bool) -> RunResult {
    let attempt = || -> Result<(PathBuf, BTreeMap<usize, f64>), CliError> {
        let mut cfg = base.clone();
        cfg.apply(&job.assignments)?;
        cfg.set("data.seed", &job.seed.to_string())?;
        cfg.output.dir = runs_dir.to_path_buf();
        cfg.output.run_id = Some(job.run_id.clone());
        let out = run_experiment(&cfg, &mut quiet())?;
        if let lengen_core::trainer::RunStatus::Diverged { step, loss, .. } = out.record.status {
            return Err(CliError::Sweep(format!("diverged at step {step} (loss {loss})")));
        }
        let acc = final_accuracy(&out.metrics_path())?;
        Ok((out.metrics_path(), acc))
    };
    let outcome = match catch_unwind(AssertUnwindSafe(attempt)) {
        Ok(r) => r.map_err(|e| e.to_string()),
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    if progress {
        match &outcome {
            Ok(_) => eprintln!("finished {}", job.run_id),
            Err(e) => eprintln!("failed {}: {e}", job.run_id),
        }
    }
    RunResult { job: job.clone(), outcome }
}

/// Mean accuracy per length over the successful runs of one cell.
pub fn cell_means(results: &[&RunResult]) -> BTreeMap<usize, (f64, usize)> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in results {
        if let Ok((_, acc)) = &r.outcome {
            for (&n, &a) in acc {
                let e = sums.entry(n).or_insert((0.0, 0));
                e.0 += a;
                e.1 += 1;
            }
        }
    }
    sums.into_iter().map(|(n, (s, c))| (n, (s / c as f64, c))).collect()
}

#[derive(Debug, Clone)]
pub struct CellSummary {
    pub cell: usize,
    pub assignments: Vec<(String, String)>,
    /// length -> (mean exact match, number of seeds averaged)
    pub means: BTreeMap<usize, (f64, usize)>,
    pub largest_length: Option<usize>,
    /// Minimal searched value reaching the success criterion.
    pub search: Option<Option<f64>>,
}

#[derive(Debug)]
pub struct SweepOutput {
    pub cells: Vec<CellSummary>,
    pub runs: Vec<RunResult>,
    pub aggregate_path: PathBuf,
    pub thresholds_path: PathBuf,
    pub failures_path: PathBuf,
    pub search_path: Option<PathBuf>,
}

fn slug(v: &str) -> String {
    v.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let err = |source: csv::Error| CliError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

/// Runs every (cell, seed) pair, then aggregates.
///
/// Writes `aggregate.csv`, `thresholds.csv`, `failures.csv` and, with a search block,
/// `search.csv` under `out`; member runs live in `out/runs/`.
pub fn cmd_sweep(sweep: &SweepConfig, progress: bool) -> Result<SweepOutput, CliError> {
    let runs_dir = sweep.out.join("runs");
    fs::create_dir_all(&runs_dir).map_err(|source| CliError::Io { path: runs_dir.clone(), source })?;
    let cells = sweep.cells();
    let jobs: Vec<RunJob> = cells
        .iter()
        .enumerate()
        .flat_map(|(ci, a)| {
            sweep.seeds.iter().map(move |&seed| RunJob {
                cell: ci,
                seed,
                assignments: a.clone(),
                run_id: format!("cell{ci}-seed{seed}"),
            })
        })
        .collect();
    let mut runs = run_bounded(&jobs, sweep.workers, |j| execute_job(&sweep.base, &runs_dir, j, progress));

    let mut summaries = Vec::new();
    for (ci, a) in cells.iter().enumerate() {
        let members: Vec<&RunResult> = runs.iter().filter(|r| r.job.cell == ci).collect();
        let means = cell_means(&members);
        let points: Vec<(usize, f64)> = means.iter().map(|(&n, &(m, _))| (n, m)).collect();
        summaries.push(CellSummary {
            cell: ci,
            assignments: a.clone(),
            largest_length: largest_length_at(&points, sweep.threshold),
            means,
            search: None,
        });
    }

    let mut search_path = None;
    if let Some(spec) = &sweep.search {
        let grid = search_grid(spec.lo, spec.hi, spec.step);
        for s in summaries.iter_mut() {
            let mut probe = |value: f64| -> Result<bool, CliError> {
                let mut assignments = s.assignments.clone();
                assignments.push((spec.key.clone(), value.to_string()));
                let probe_jobs: Vec<RunJob> = sweep
                    .seeds
                    .iter()
                    .map(|&seed| RunJob {
                        cell: s.cell,
                        seed,
                        assignments: assignments.clone(),
                        run_id: format!("cell{}-search-{}-seed{seed}", s.cell, slug(&value.to_string())),
                    })
                    .collect();
                let results =
                    run_bounded(&probe_jobs, sweep.workers, |j| execute_job(&sweep.base, &runs_dir, j, progress));
                let refs: Vec<&RunResult> = results.iter().collect();
                let mean = cell_means(&refs).get(&spec.length).map_or(0.0, |m| m.0);
                runs.extend(results);
                Ok(mean >= spec.success)
            };
            s.search = Some(bisect_grid(&grid, &mut probe)?);
        }
        let path = sweep.out.join("search.csv");
        let mut header = vec!["cell".to_string()];
        header.extend(sweep.axes.iter().map(|(k, _)| k.clone()));
        header.push(format!("min_{}", spec.key));
        let rows: Vec<Vec<String>> = summaries
            .iter()
            .map(|s| {
                let mut r = vec![s.cell.to_string()];
                r.extend(s.assignments.iter().map(|(_, v)| v.clone()));
                r.push(s.search.flatten().map_or_else(String::new, |v| v.to_string()));
                r
            })
            .collect();
        write_csv(&path, &header, &rows)?;
        search_path = Some(path);
    }

    let axis_keys: Vec<String> = sweep.axes.iter().map(|(k, _)| k.clone()).collect();
    let mut header = vec!["cell".to_string()];
    header.extend(axis_keys.iter().cloned());
    let aggregate_path = sweep.out.join("aggregate.csv");
    let mut agg_header = header.clone();
    agg_header.extend(["length", "mean_exact_match", "seeds"].map(String::from));
    let mut rows = Vec::new();
    for s in &summaries {
        for (&n, &(m, c)) in &s.means {
            let mut r = vec![s.cell.to_string()];
            r.extend(s.assignments.iter().map(|(_, v)| v.clone()));
            r.extend([n.to_string(), format!("{m:?}"), c.to_string()]);
            rows.push(r);
        }
    }
    write_csv(&aggregate_path, &agg_header, &rows)?;

    let thresholds_path = sweep.out.join("thresholds.csv");
    let mut th_header = header.clone();
    th_header.push(format!("largest_length_at_{}", sweep.threshold));
    let rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            let mut r = vec![s.cell.to_string()];
            r.extend(s.assignments.iter().map(|(_, v)| v.clone()));
            r.push(s.largest_length.map_or_else(String::new, |n| n.to_string()));
            r
        })
        .collect();
    write_csv(&thresholds_path, &th_header, &rows)?;

    let failures_path = sweep.out.join("failures.csv");
    let rows: Vec<Vec<String>> = runs
        .iter()
        .filter_map(|r| {
            r.outcome
                .as_ref()
                .err()
                .map(|e| vec![r.job.run_id.clone(), r.job.cell.to_string(), r.job.seed.to_string(), e.clone()])
        })
        .collect();
    write_csv(&failures_path, &["run_id", "cell", "seed", "error"].map(String::from), &rows)?;

    Ok(SweepOutput { cells: summaries, runs, aggregate_path, thresholds_path, failures_path, search_path })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_on_monotone_table_finds_the_crossing() {
        let table: Vec<(usize, f64)> = (6..=20).map(|n| (n, 1.0 - (n as f64 - 6.0) * 0.05)).collect();
        // accuracy 0.75 exactly at n = 11, below afterwards
        assert_eq!(largest_length_at(&table, 0.75), Some(11));
        assert_eq!(largest_length_at(&table, 1.01), None);
        assert_eq!(largest_length_at(&table, 0.0), Some(20));
    }

    #[test]
    fn bisection_finds_minimal_value_within_one_step() {
        let grid = search_grid(0.0, 0.05, 0.0025);
        assert_eq!(grid.len(), 21);
        for true_threshold in [0.0, 0.0031, 0.0125, 0.02, 0.0499, 0.05] {
            let mut calls = 0;
            let found = bisect_grid(&grid, |eps| {
                calls += 1;
                Ok::<_, ()>(eps >= true_threshold - 1e-12)
            })
            .unwrap()
            .unwrap();
            assert!(
                found >= true_threshold - 1e-12 && found - true_threshold < 0.0025 + 1e-12,
                "{true_threshold} -> {found}"
            );
            assert!(calls <= 7, "{calls} probes");
        }
        assert_eq!(bisect_grid(&grid, |eps| Ok::<_, ()>(eps > 1.0)).unwrap(), None);
        assert_eq!(bisect_grid(&[], |_| Ok::<_, ()>(true)).unwrap(), None);
    }

    #[test]
    fn cells_are_the_cross_product() {
        let s = SweepConfig::from_toml_str(
            "seeds = [1, 2, 3]\n[axes]\n\"model.d_model\" = [64, 128]\n\"model.pe_kind\" = [\"ape\", \"rpe_k\"]\n",
            Path::new("."),
        )
        .unwrap();
        assert_eq!(s.cells().len(), 4);
        assert_eq!(s.seeds, vec![1, 2, 3]);
        assert_eq!(s.cells()[1], vec![("model.d_model".into(), "64".into()), ("model.pe_kind".into(), "rpe_k".into())]);
    }

    #[test]
    fn seeds_may_be_an_axis() {
        let s =
            SweepConfig::from_toml_str("[axes]\nseeds = [1, 2, 3]\n\"model.d_model\" = [64, 128]\n", Path::new("."))
                .unwrap();
        assert_eq!(s.cells().len(), 2);
        assert_eq!(s.seeds.len() * s.cells().len(), 6);
    }

    #[test]
    fn bad_axis_values_are_rejected_up_front() {
        let e = SweepConfig::from_toml_str("[axes]\n\"train.lr\" = [\"fast\"]\n", Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("train.lr"), "{e}");
        assert!(SweepConfig::from_toml_str("[axes]\n\"model.nope\" = [1]\n", Path::new(".")).is_err());
    }

    #[test]
    fn bounded_runner_keeps_order() {
        let jobs: Vec<u64> = (0..17).collect();
        let out = run_bounded(&jobs, 4, |&j| j * j);
        assert_eq!(out, jobs.iter().map(|j| j * j).collect::<Vec<_>>());
        assert!(run_bounded(&Vec::<u64>::new(), 3, |&j| j).is_empty());
    }
}
