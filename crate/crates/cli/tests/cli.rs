use std::path::Path;
use std::process::{Command, Output};
use tasd_cli::artifacts::{summary_csv, SUMMARY_HEADER};
use tasd_cli::commands::ABLATION_HEADER;

const SMALL: &[&str] = &[
    "--set",
    "resolution=16",
    "--set",
    "benchmark.train_count=24",
    "--set",
    "benchmark.val_count=4",
    "--set",
    "benchmark.test_count=4",
    "--set",
    "dict.k=8",
    "--set",
    "dict.epochs=3",
    "--set",
    "train.epochs=1",
    "--set",
    "model.base_width=2",
    "--set",
    "model.reg_hidden=8",
];

fn tasd(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tasd"))
        .args(args)
        .arg("--out")
        .arg(root)
        .args(SMALL)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn pipeline(root: &Path) {
    ok(tasd(root, &["synth-data"]));
    ok(tasd(root, &["learn-dict"]));
    ok(tasd(root, &["train"]));
}

#[test]
fn missing_artifacts_are_named_with_exit_code_five() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["learn-dict", "train", "evaluate"] {
        let out = tasd(dir.path(), &[cmd]);
        assert_eq!(out.status.code(), Some(5), "{cmd}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(&dir.path().display().to_string()), "{cmd}: {err}");
    }
    ok(tasd(dir.path(), &["synth-data"]));
    let out = tasd(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dictionary.bin"));
}

#[test]
fn config_and_io_failures_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = tasd(dir.path(), &["synth-data", "--set", "dict.bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = tasd(dir.path(), &["synth-data", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(out.status.code(), Some(3));
    pipeline(dir.path());
    std::fs::write(dir.path().join("model/checkpoint.bin"), b"SGNT garbage").unwrap();
    let out = tasd(dir.path(), &["evaluate"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let out = tasd(dir.path(), &["evaluate", "--tta", "sideways"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_is_idempotent_and_leaves_checkpoint_alone() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let ckpt = std::fs::read(dir.path().join("model/checkpoint.bin")).unwrap();
    let read = |f: &str| std::fs::read(dir.path().join("eval-none").join(f)).unwrap();
    ok(tasd(dir.path(), &["evaluate", "--tta", "none"]));
    let first = (read("report.json"), read("summary.csv"), read("provenance.json"));
    ok(tasd(dir.path(), &["evaluate", "--tta", "none"]));
    assert_eq!(first, (read("report.json"), read("summary.csv"), read("provenance.json")));
    assert_eq!(std::fs::read(dir.path().join("model/checkpoint.bin")).unwrap(), ckpt);

    let csv = String::from_utf8(first.1).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], SUMMARY_HEADER);
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines[4].starts_with("Avg,12,"));
    let report: tasd_core::metrics::MetricReport = serde_json::from_slice(&first.0).unwrap();
    assert_eq!(summary_csv(&report), csv);
}

#[test]
fn every_mode_writes_a_complete_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    for mode in ["none", "dual", "seg_only", "coef_only"] {
        let stdout = ok(tasd(dir.path(), &["evaluate", "--tta", mode]));
        assert!(stdout.contains(&format!("mode {mode}")));
        let run = dir.path().join(format!("eval-{mode}"));
        for f in ["report.json", "summary.csv", "source_val.json", "log.jsonl", "config.toml", "provenance.json"] {
            assert!(run.join(f).exists(), "{mode}: {f}");
        }
        let log = std::fs::read_to_string(run.join("log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 12);
    }
    let prov: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("eval-dual/provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["command"], "evaluate --tta=dual");
    assert_eq!(prov["inputs"].as_array().unwrap().len(), 3);
    assert!(prov["seeds"]["tta"].is_u64());
}

#[test]
fn rerunning_from_a_recorded_config_reproduces_results() {
    let a = tempfile::tempdir().unwrap();
    pipeline(a.path());
    ok(tasd(a.path(), &["evaluate", "--tta", "dual"]));
    let recorded = a.path().join("eval-dual/config.toml");
    let b = tempfile::tempdir().unwrap();
    for cmd in [&["synth-data"][..], &["learn-dict"], &["train"], &["evaluate", "--tta", "dual"]] {
        let out = Command::new(env!("CARGO_BIN_EXE_tasd"))
            .args(cmd)
            .arg("--config")
            .arg(&recorded)
            .env("TASD_OUTPUT_ROOT", b.path())
            .output()
            .unwrap();
        ok(out);
    }
    for f in ["eval-dual/report.json", "model/checkpoint.bin", "dictionary/codes.bin"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn ablate_k_emits_one_row_per_size() {
    let dir = tempfile::tempdir().unwrap();
    ok(tasd(dir.path(), &["synth-data"]));
    let stdout = ok(tasd(dir.path(), &["ablate-k", "--ks", "2,3,4,6"]));
    assert!(stdout.contains(ABLATION_HEADER));
    let table = std::fs::read_to_string(dir.path().join("ablate-k/table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for (row, k) in rows.iter().zip(["2", "3", "4", "6"]) {
        assert_eq!(row.split(',').next(), Some(k));
        assert_eq!(row.split(',').count(), 5);
    }
    assert!(dir.path().join("ablate-k/k6/model/checkpoint.bin").exists());
}
