//! End-to-end tests driving the compiled binary against a miniature
//! synthetic dataset.

use ressl_core::config::ExperimentConfig;
use ressl_core::data::{
    manifest_path, packed_path, sha256_file, DatasetManifest, DatasetName, NormStats,
    PackedWriter, Split,
};
use ressl_core::eval::read_embeddings;
use ressl_core::model::ProjectionHeadSpec;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ressl"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_str(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_str(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = stderr_str(out);
    let line = text
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .unwrap_or_else(|| panic!("no JSON line on stderr, got: {text}"));
    serde_json::from_str(line).unwrap_or_else(|e| panic!("bad stderr JSON ({e}): {line}"))
}

fn write_toy_dataset(dir: &Path, train_n: u32, test_n: u32) {
    let stats = NormStats {
        mean: [0.5, 0.5, 0.5],
        std: [0.25, 0.25, 0.25],
    };
    std::fs::create_dir_all(dir).unwrap();
    for (split, n) in [(Split::Train, train_n), (Split::Test, test_n)] {
        let path = packed_path(dir, DatasetName::Cifar10, split);
        let mut w = PackedWriter::create(&path, n, 16, 16).unwrap();
        let mut histogram = vec![0u64; 10];
        for i in 0..n {
            let label = (i % 2) as i32;
            let px: Vec<u8> = (0..16 * 16 * 3)
                .map(|j| (40 + 120 * label as usize + (i as usize * 31 + j * 7) % 40) as u8)
                .collect();
            w.write_record(i, label, &px).unwrap();
            histogram[label as usize] += 1;
        }
        w.finish().unwrap();
        DatasetManifest {
            format_version: 1,
            name: DatasetName::Cifar10,
            split,
            count: u64::from(n),
            image_height: 16,
            image_width: 16,
            num_classes: 10,
            class_histogram: histogram,
            unlabeled_count: 0,
            packed_sha256: sha256_file(&path).unwrap(),
            stats,
        }
        .save(&manifest_path(dir, DatasetName::Cifar10, split))
        .unwrap();
    }
}

fn toy_config(data_dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults_for(DatasetName::Cifar10, data_dir.into());
    cfg.batch_size = 4;
    cfg.bn_groups = 2;
    cfg.epochs = 2;
    cfg.warmup_epochs = 1;
    cfg.queue_capacity = Some(8);
    cfg.view_side = Some(16);
    cfg.head = ProjectionHeadSpec {
        hidden_dim: 32,
        output_dim: 16,
    };
    cfg
}

/// Writes the dataset and config once, returns (config path, data dir).
fn smoke_fixture(root: &Path) -> (PathBuf, PathBuf) {
    let data_dir = root.join("data");
    write_toy_dataset(&data_dir, 8, 4);
    let cfg = toy_config(&data_dir);
    let cfg_path = root.join("smoke.toml");
    cfg.save_toml(&cfg_path).unwrap();
    (cfg_path, data_dir)
}

fn pretrain_smoke(root: &Path, out_name: &str) -> PathBuf {
    let (cfg_path, _) = smoke_fixture(root);
    let out = root.join(out_name);
    let res = run(&[
        "pretrain",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "pretrain failed: {}",
        stderr_str(&res)
    );
    out
}

#[test]
fn missing_subcommand_and_unknown_flags_exit_2() {
    let none = bin().output().unwrap();
    assert_eq!(none.status.code(), Some(2));
    let unknown = run(&["pretrain", "--definitely-not-a-flag"]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn missing_config_is_a_usage_error_with_json() {
    let res = run(&["pretrain", "--out", "/tmp/nowhere"]);
    assert_eq!(res.status.code(), Some(2));
    let err = stderr_json(&res);
    assert_eq!(err["error"], "usage");
    assert!(err["message"].as_str().unwrap().contains("--config"));
}

#[test]
fn inverted_temperatures_are_refused_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg_path, _) = smoke_fixture(dir.path());
    let res = run(&[
        "pretrain",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "--tau-t",
        "0.2",
        "--tau-s",
        "0.1",
    ]);
    assert_eq!(res.status.code(), Some(2), "stderr: {}", stderr_str(&res));
    let err = stderr_json(&res);
    assert_eq!(err["error"], "usage");
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("0.2"), "message should name the value: {msg}");
}

#[test]
fn pretrain_twice_yields_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = pretrain_smoke(dir.path(), "run-a");
    let out_b = pretrain_smoke(dir.path(), "run-b");
    let a = std::fs::read(out_a.join("metrics.jsonl")).unwrap();
    let b = std::fs::read(out_b.join("metrics.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_a.join("train_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["completed_epochs"], 2);
    assert_eq!(report["global_step"], 4);
}

#[test]
fn resume_of_a_finished_run_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain_smoke(dir.path(), "run");
    let before = std::fs::read(out.join("metrics.jsonl")).unwrap();
    let res = bin()
        .args([
            "pretrain",
            "--config",
            dir.path().join("smoke.toml").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--resume",
        ])
        .output()
        .unwrap();
    assert!(res.status.success(), "stderr: {}", stderr_str(&res));
    let after = std::fs::read(out.join("metrics.jsonl")).unwrap();
    assert_eq!(before, after, "resume of a finished run must not change metrics");
}

#[test]
fn linear_eval_on_a_missing_checkpoint_names_the_path() {
    let res = run(&["linear-eval", "--checkpoint", "/no/such/checkpoint.ckpt"]);
    assert_eq!(res.status.code(), Some(1));
    let err = stderr_json(&res);
    assert!(
        err["message"]
            .as_str()
            .unwrap()
            .contains("/no/such/checkpoint.ckpt"),
        "got {err}"
    );
}

#[test]
fn knn_linear_eval_and_export_work_on_a_smoke_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain_smoke(dir.path(), "run");
    let ckpt = out.join("checkpoint-000002.ckpt");
    assert!(ckpt.exists());

    let knn = run(&["knn", "--checkpoint", ckpt.to_str().unwrap(), "--k", "8"]);
    assert!(knn.status.success(), "stderr: {}", stderr_str(&knn));
    let knn_json: serde_json::Value = serde_json::from_str(&stdout_str(&knn)).unwrap();
    let top1 = knn_json["top1"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&top1), "top1 {top1}");

    let eval_out = dir.path().join("eval");
    let lin = run(&[
        "linear-eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--epochs",
        "4",
        "--batch-size",
        "4",
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert!(lin.status.success(), "stderr: {}", stderr_str(&lin));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_out.join("eval_report.json")).unwrap())
            .unwrap();
    let lin_top1 = report["top1"].as_f64().unwrap();
    let lin_top5 = report["top5"].as_f64().unwrap();
    assert!(lin_top1 <= lin_top5);
    assert_eq!(report["per_class_accuracy"].as_array().unwrap().len(), 10);

    let exp = run(&[
        "export-embeddings",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--split",
        "test",
        "--out",
        dir.path().join("emb").to_str().unwrap(),
    ]);
    assert!(exp.status.success(), "stderr: {}", stderr_str(&exp));
    let exp_json: serde_json::Value = serde_json::from_str(&stdout_str(&exp)).unwrap();
    assert_eq!(exp_json["count"], 4);
    let (ids, labels, features) =
        read_embeddings(Path::new(exp_json["path"].as_str().unwrap())).unwrap();
    assert_eq!(ids.len(), 4);
    assert_eq!(labels.len(), 4);
    assert_eq!(features.dim().0, 4);
}

#[test]
fn sweep_orders_rows_records_hashes_and_feeds_the_bar_plot() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    write_toy_dataset(&data_dir, 8, 4);
    let mut base = toy_config(&data_dir);
    base.epochs = 1;
    base.warmup_epochs = 1;

    // Values deliberately out of order: aggregation must sort ascending.
    let spec_text = format!(
        "axis = \"tau_t\"\nvalues = [0.1, 0.04]\nbudget_epochs = 1\neval = \"knn\"\n\n[base]\n{}",
        toml::to_string(&base)
            .unwrap()
            .replace("[head]", "[base.head]")
    );
    let spec_path = dir.path().join("sweep.toml");
    std::fs::write(&spec_path, &spec_text).unwrap();

    let sweep_dir = dir.path().join("sweep");
    let res = run(&[
        "sweep",
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        sweep_dir.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "stderr: {}", stderr_str(&res));

    let csv = std::fs::read_to_string(sweep_dir.join("results.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).filter(|l| !l.is_empty()).collect();
    assert_eq!(rows.len(), 2, "csv: {csv}");
    assert!(rows[0].starts_with("tau_t,0.04,"), "csv: {csv}");
    assert!(rows[1].starts_with("tau_t,0.1,"), "csv: {csv}");
    for row in &rows {
        let hash = row.split(',').nth(4).unwrap();
        assert_eq!(hash.len(), 16, "config hash per row: {row}");
        assert!(row.split(',').nth(3) == Some("ok"), "row should pass: {row}");
    }
    assert!(sweep_dir.join("results.txt").exists());

    // Rerunning the sweep reuses the recorded rows (directories are
    // resumable) and reproduces the same CSV.
    let again = run(&[
        "sweep",
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        sweep_dir.to_str().unwrap(),
    ]);
    assert!(again.status.success());
    assert_eq!(
        std::fs::read_to_string(sweep_dir.join("results.csv")).unwrap(),
        csv
    );

    let plot = run(&[
        "plot",
        "--kind",
        "sweep_bar",
        "--input",
        sweep_dir.join("results.csv").to_str().unwrap(),
        "--out",
        dir.path().join("plots").to_str().unwrap(),
    ]);
    assert!(plot.status.success(), "stderr: {}", stderr_str(&plot));
    let bar_csv = std::fs::read_to_string(dir.path().join("plots/sweep_bar.csv")).unwrap();
    assert_eq!(bar_csv.lines().count(), 3, "header + one line per row");
    let svg = std::fs::read_to_string(dir.path().join("plots/sweep_bar.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.contains("0.04"));
}

#[test]
fn curve_plots_are_deterministic_and_reject_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain_smoke(dir.path(), "run");
    let metrics = out.join("metrics.jsonl");
    for kind in ["lr_curve", "loss_curve", "entropy_curve"] {
        let plots = dir.path().join(format!("plots-{kind}"));
        let first = run(&[
            "plot",
            "--kind",
            kind,
            "--input",
            metrics.to_str().unwrap(),
            "--out",
            plots.to_str().unwrap(),
        ]);
        assert!(first.status.success(), "stderr: {}", stderr_str(&first));
        let svg1 = std::fs::read(plots.join(format!("{kind}.svg"))).unwrap();
        let csv1 = std::fs::read(plots.join(format!("{kind}.csv"))).unwrap();
        assert_eq!(
            String::from_utf8_lossy(&csv1).lines().count(),
            5,
            "header + 4 steps"
        );
        let second = run(&[
            "plot",
            "--kind",
            kind,
            "--input",
            metrics.to_str().unwrap(),
            "--out",
            plots.to_str().unwrap(),
        ]);
        assert!(second.status.success());
        assert_eq!(svg1, std::fs::read(plots.join(format!("{kind}.svg"))).unwrap());
        assert_eq!(csv1, std::fs::read(plots.join(format!("{kind}.csv"))).unwrap());
    }

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let res = run(&[
        "plot",
        "--kind",
        "loss_curve",
        "--input",
        empty.to_str().unwrap(),
        "--out",
        dir.path().join("plots-empty").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
}
