use std::fs;
use std::path::Path;
use std::process::Command;

use lengen_cli::config::flatten_toml;
use lengen_cli::run::read_predictions;
use lengen_cli::sweep::final_accuracy;
use lengen_cli::{
    cmd_eval, cmd_gen, cmd_report, cmd_sweep, run_experiment, EvalRequest, ExperimentConfig, Precision, SweepConfig,
};
use lengen_core::analysis::{read_failure_csv, read_metrics_csv};
use lengen_core::taskgen::{multiset_hash, read_examples_tsv};
use lengen_core::trainer::quiet;

fn tiny(out: &Path, extra: &str) -> ExperimentConfig {
    let text = format!(
        "task.kind = \"add\"\ntask.n_train = 2\ntask.n_test = [3]\n\
         data.train_size = 48\ndata.test_size = 20\ndata.seed = 5\n\
         model.depth = 1\nmodel.d_model = 16\nmodel.heads = 2\nmodel.shared_layers = false\n\
         train.epochs = 3\ntrain.eval_every = 2\ntrain.lr = 0.001\nprecision = \"f64\"\n\
         output.dir = \"{}\"\n",
        out.display()
    );
    let mut cfg = ExperimentConfig::from_toml_str(&text).unwrap();
    let table: toml::Table = extra.parse().unwrap();
    cfg.apply(&flatten_toml(&table).unwrap()).unwrap();
    cfg
}

#[test]
fn train_writes_a_replayable_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_experiment(&tiny(tmp.path(), ""), &mut quiet()).unwrap();
    for f in ["manifest.toml", "metrics.csv", "losses.csv", "checkpoints/final.ckpt"] {
        assert!(out.dir.join(f).exists(), "{f} missing");
    }
    let manifest = fs::read_to_string(out.manifest_path()).unwrap();
    assert!(manifest.contains("manifest.status = \"completed\""), "{manifest}");
    assert!(manifest.contains("manifest.code_version"));
    let losses = fs::read_to_string(out.dir.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 3);

    // replay from the manifest alone into another directory
    let mut replay = ExperimentConfig::load(&out.manifest_path()).unwrap();
    let other = tempfile::tempdir().unwrap();
    replay.output.dir = other.path().to_path_buf();
    let again = run_experiment(&replay, &mut quiet()).unwrap();
    assert_eq!(again.run_id, out.run_id);
    assert_eq!(fs::read(again.metrics_path()).unwrap(), fs::read(out.metrics_path()).unwrap());
    assert_eq!(again.digest, out.digest);
}

#[test]
fn metrics_cover_every_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_experiment(&tiny(tmp.path(), ""), &mut quiet()).unwrap();
    let rows = read_metrics_csv(&out.metrics_path()).unwrap();
    // evaluations at epochs 0, 2, 3 for lengths 2 and 3
    let mut epochs: Vec<(u64, usize)> = rows.iter().map(|(_, r)| (r.epoch, r.length)).collect();
    epochs.sort_unstable();
    assert_eq!(epochs, vec![(0, 2), (0, 3), (2, 2), (2, 3), (3, 2), (3, 3)]);
    assert!(rows.iter().all(|(id, r)| id == &out.run_id && r.per_position.len() == 4 && r.sample_count == 20));
}

#[test]
fn eval_of_final_checkpoint_reproduces_last_training_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_experiment(&tiny(tmp.path(), ""), &mut quiet()).unwrap();
    let req = EvalRequest {
        checkpoint: out.final_checkpoint(),
        lengths: vec![2, 3],
        n_test: 20,
        seed: 5,
        out: tmp.path().join("eval"),
        failure_report: true,
        precision: Precision::F64,
    };
    let ev = cmd_eval(&req).unwrap();
    let last: Vec<_> = out.record.rows.iter().filter(|r| r.epoch == 3).collect();
    assert_eq!(ev.rows.len(), 2);
    for (a, b) in ev.rows.iter().zip(last) {
        assert_eq!((a.length, a.exact_match, &a.per_position), (b.length, b.exact_match, &b.per_position));
    }
    let report = ev.failure.unwrap();
    assert!(report.carry.is_some());
    assert_eq!(report.n_examples, 40);
}

#[test]
fn eval_is_deterministic_and_report_rederives_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_experiment(&tiny(tmp.path(), ""), &mut quiet()).unwrap();
    let mut req = EvalRequest {
        checkpoint: out.final_checkpoint(),
        lengths: vec![1, 2, 3],
        n_test: 30,
        seed: 11,
        out: tmp.path().join("a"),
        failure_report: true,
        precision: Precision::F32,
    };
    let a = cmd_eval(&req).unwrap();
    req.out = tmp.path().join("b");
    let b = cmd_eval(&req).unwrap();
    assert_eq!(fs::read(&a.metrics_path).unwrap(), fs::read(&b.metrics_path).unwrap());
    assert_eq!(
        fs::read(a.failure_path.as_ref().unwrap()).unwrap(),
        fs::read(b.failure_path.as_ref().unwrap()).unwrap()
    );

    let preds = read_predictions(&a.predictions_path).unwrap();
    assert_eq!(preds.examples.len(), 90);
    let (report, path) = cmd_report(&a.predictions_path, None, &tmp.path().join("r")).unwrap();
    assert_eq!(Some(report), a.failure);
    let original: Vec<_> =
        read_failure_csv(a.failure_path.as_ref().unwrap()).unwrap().into_iter().map(|x| x.1).collect();
    let rederived: Vec<_> = read_failure_csv(&path).unwrap().into_iter().map(|x| x.1).collect();
    assert_eq!(original, rederived);

    let (only3, _) = cmd_report(&a.predictions_path, Some(3), &tmp.path().join("r3")).unwrap();
    assert_eq!(only3.n_examples, 30);
}

#[test]
fn eval_over_fifteen_lengths_gives_fifteen_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "task.n_test = \"6-20\"\ntrain.epochs = 1\ndata.test_size = 4\n");
    let out = run_experiment(&cfg, &mut quiet()).unwrap();
    let req = EvalRequest {
        checkpoint: out.final_checkpoint(),
        lengths: (6..=20).collect(),
        n_test: 10,
        seed: 0,
        out: tmp.path().join("eval"),
        failure_report: false,
        precision: Precision::F32,
    };
    let ev = cmd_eval(&req).unwrap();
    assert_eq!(ev.rows.len(), 15);
    assert_eq!(read_metrics_csv(&ev.metrics_path).unwrap().len(), 15);
    assert!(ev.failure_path.is_none());

    let too_long = EvalRequest { lengths: vec![21], ..req };
    assert!(cmd_eval(&too_long).unwrap_err().to_string().contains("geometry"));
}

#[test]
fn failure_report_on_multiplication_skips_carries_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "task.kind = \"mul\"\ntask.n2_max = 2\ntrain.epochs = 1\n");
    let out = run_experiment(&cfg, &mut quiet()).unwrap();
    let req = EvalRequest {
        checkpoint: out.final_checkpoint(),
        lengths: vec![3],
        n_test: 25,
        seed: 1,
        out: tmp.path().join("eval"),
        failure_report: true,
        precision: Precision::F32,
    };
    let ev = cmd_eval(&req).unwrap();
    let report = ev.failure.unwrap();
    assert!(report.carry.is_none());
    let records = read_failure_csv(ev.failure_path.as_ref().unwrap()).unwrap();
    assert!(records.iter().all(|(_, r)| r.bucket_kind != "nc" && r.bucket_kind != "mc"));
    if ev.rows[0].exact_match < 1.0 {
        assert!(records.iter().any(|(_, r)| r.bucket_kind == "err_count"));
    }
}

#[test]
fn fine_tune_runs_from_a_checkpoint_and_tracks_both_lengths() {
    let tmp = tempfile::tempdir().unwrap();
    let base = run_experiment(&tiny(tmp.path(), ""), &mut quiet()).unwrap();
    let extra = format!(
        "train.procedure = \"fine_tune\"\ntrain.fine_length = 3\ntrain.fine_size = 16\ntrain.init_checkpoint = \"{}\"\n",
        base.final_checkpoint().display()
    );
    let out = run_experiment(&tiny(tmp.path(), &extra), &mut quiet()).unwrap();
    let rows = read_metrics_csv(&out.metrics_path()).unwrap();
    for epoch in [0, 2, 3] {
        let lengths: Vec<usize> = rows.iter().filter(|(_, r)| r.epoch == epoch).map(|(_, r)| r.length).collect();
        assert_eq!(lengths, vec![2, 3], "epoch {epoch}");
    }
    // step-0 rows of the fine-tune equal the base model's final rows
    let base_last: Vec<f64> = base.record.rows.iter().filter(|r| r.epoch == 3).map(|r| r.exact_match).collect();
    let ft_first: Vec<f64> = out.record.rows.iter().filter(|r| r.step == 0).map(|r| r.exact_match).collect();
    assert_eq!(base_last, ft_first);

    // a checkpoint from a different geometry is rejected
    let wrong = run_experiment(&tiny(tmp.path(), "task.n_test = [4]\ntrain.epochs = 1\n"), &mut quiet()).unwrap();
    let extra = format!(
        "train.procedure = \"fine_tune\"\ntrain.fine_length = 3\ntrain.init_checkpoint = \"{}\"\n",
        wrong.final_checkpoint().display()
    );
    assert!(run_experiment(&tiny(tmp.path(), &extra), &mut quiet()).is_err());
}

#[test]
fn gen_dumps_priming_set_and_epochs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(
        tmp.path(),
        "task.kind = \"mul\"\ntask.n_train = 3\ntask.n_test = [6]\ntask.n2_max = 2\ndata.train_size = 5000\n\
         train.procedure = \"priming\"\ntrain.epsilon = 0.01\ntrain.priming = \"single:6\"\n",
    );
    let files = cmd_gen(&cfg, 2, &tmp.path().join("data")).unwrap();
    let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["train-epoch-1.tsv", "train-epoch-2.tsv", "priming.tsv", "eval-3.tsv", "eval-6.tsv"]);
    let priming = read_examples_tsv(&tmp.path().join("data/priming.tsv")).unwrap();
    assert_eq!(priming.len(), 50);
    assert!(priming.iter().all(|e| e.x1.len() == 6));
    let e1 = read_examples_tsv(&files[0]).unwrap();
    let e2 = read_examples_tsv(&files[1]).unwrap();
    assert_eq!((e1.len(), e2.len()), (5000, 5000));
    let long = |v: &[lengen_core::Example]| v.iter().filter(|e| e.x1.len() == 6).cloned().collect::<Vec<_>>();
    assert_eq!(multiset_hash(&long(&e1)), multiset_hash(&priming));
    assert_eq!(multiset_hash(&long(&e2)), multiset_hash(&priming));
}

#[test]
fn sweep_runs_cross_product_and_averages_member_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path().join("base.toml");
    fs::write(&base, tiny(tmp.path(), "train.epochs = 2\n").to_toml()).unwrap();
    let sweep_file = tmp.path().join("sweep.toml");
    fs::write(
        &sweep_file,
        format!(
            "base = \"base.toml\"\nworkers = 2\nout = \"{}\"\n[axes]\nseeds = [1, 2, 3]\n\"model.d_model\" = [8, 16]\n",
            tmp.path().join("sweep").display()
        ),
    )
    .unwrap();
    let sweep = SweepConfig::load(&sweep_file).unwrap();
    let out = cmd_sweep(&sweep, false).unwrap();
    assert_eq!(out.runs.len(), 6);
    assert_eq!(out.cells.len(), 2);
    assert!(out.runs.iter().all(|r| r.outcome.is_ok()));
    for cell in &out.cells {
        let members: Vec<_> = out.runs.iter().filter(|r| r.job.cell == cell.cell).collect();
        assert_eq!(members.len(), 3);
        for (&n, &(mean, count)) in &cell.means {
            let vals: Vec<f64> =
                members.iter().map(|r| final_accuracy(&r.outcome.as_ref().unwrap().0).unwrap()[&n]).collect();
            assert_eq!(count, 3);
            assert!((mean - vals.iter().sum::<f64>() / 3.0).abs() < 1e-15);
        }
    }
    let agg = fs::read_to_string(&out.aggregate_path).unwrap();
    assert_eq!(agg.lines().count(), 1 + 2 * 2);
    assert!(fs::read_to_string(&out.thresholds_path).unwrap().starts_with("cell,model.d_model,"));
}

#[test]
fn sweep_records_failing_cells_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path().join("base.toml");
    fs::write(&base, tiny(tmp.path(), "train.epochs = 1\n").to_toml()).unwrap();
    let sweep_file = tmp.path().join("sweep.toml");
    // d_model 9 is not divisible by 2 heads: that cell fails validation
    fs::write(
        &sweep_file,
        format!(
            "base = \"base.toml\"\nout = \"{}\"\n[axes]\n\"model.d_model\" = [9, 8]\n",
            tmp.path().join("s").display()
        ),
    )
    .unwrap();
    let out = cmd_sweep(&SweepConfig::load(&sweep_file).unwrap(), false).unwrap();
    assert!(out.runs[0].outcome.as_ref().unwrap_err().contains("model.d_model"));
    assert!(out.runs[1].outcome.is_ok());
    let failures = fs::read_to_string(&out.failures_path).unwrap();
    assert_eq!(failures.lines().count(), 2);
}

fn lengen() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lengen"))
}

#[test]
fn binary_reports_invalid_epsilon_by_key() {
    let out = lengen()
        .args(["train", "--preset", "mul-priming-50", "--set", "train.epsilon=1.5", "--dry-run"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(64));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.epsilon"), "{err}");
}

#[test]
fn binary_dry_run_prints_resolved_preset() {
    let out = lengen().args(["train", "--preset", "mul-priming-50", "--seed", "7", "--dry-run"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["train.epsilon = 0.01", "train.priming = \"single:35\"", "task.n2_max = 3", "data.seed = 7"] {
        assert!(text.contains(needle), "{needle} missing from\n{text}");
    }
}

#[test]
fn binary_train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("cfg.toml");
    fs::write(&cfg_path, tiny(tmp.path(), "train.epochs = 1\n").to_toml()).unwrap();
    let runs = tmp.path().join("runs");
    let out = lengen().args(["train", "--config"]).arg(&cfg_path).arg("--out").arg(&runs).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = String::from_utf8_lossy(&out.stdout).trim().to_string();
    let ckpt = Path::new(&dir).join("checkpoints/final.ckpt");
    let out = lengen()
        .args(["eval", "--lengths", "1-3", "--n-test", "5", "--failure-report", "--checkpoint"])
        .arg(&ckpt)
        .arg("--out")
        .arg(tmp.path().join("ev"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("ev/failure.csv").exists());
    assert_eq!(String::from_utf8_lossy(&out.stdout).matches("length").count(), 3);
}
