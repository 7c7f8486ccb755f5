//! The `treesynth` binary end to end with mock providers.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use treesynth::dataset::Dataset;
use treesynth::tree::SpaceTree;

const CONFIG: &str = r#"[task]
description = "grade-school math word problems"

[partition]
max_depth = 2
pivot_count = 3
samples_per_leaf = 2
rng_seed = 5

[provider]
kind = "mock-subspace"
mock_branching = 3
"#;

struct Fixture {
    _root: tempfile::TempDir,
    config: PathBuf,
    run: PathBuf,
}

fn fixture() -> Fixture {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("treesynth.toml");
    std::fs::write(&config, CONFIG).unwrap();
    let run = root.path().join("run");
    Fixture { config, run, _root: root }
}

fn treesynth(f: &Fixture, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_treesynth"))
        .arg("--config")
        .arg(&f.config)
        .arg("--run-dir")
        .arg(&f.run)
        .args(args)
        .output()
        .unwrap()
}

fn ok(f: &Fixture, args: &[&str]) -> String {
    let out = treesynth(f, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn interrupted_partition_resumes_to_the_same_tree() {
    let whole = fixture();
    ok(&whole, &["partition"]);
    let expected = std::fs::read_to_string(whole.run.join("tree.json")).unwrap();

    let cut = fixture();
    let stdout = ok(&cut, &["partition", "--stop-after", "2"]);
    assert!(stdout.contains("interrupted"));
    let manifest = read_json(&cut.run.join("run.json"));
    assert_eq!(manifest["stages"]["partition"]["status"], "interrupted");
    assert!(!treesynth(&cut, &["synthesize"]).status.success());
    ok(&cut, &["resume"]);
    assert_eq!(std::fs::read_to_string(cut.run.join("tree.json")).unwrap(), expected);
}

#[test]
fn resume_without_checkpoint_fails() {
    let f = fixture();
    let out = treesynth(&f, &["resume"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no checkpoint"));
}

#[test]
fn full_pipeline_with_answers_baseline_and_comparison() {
    let f = fixture();
    let stdout = ok(&f, &["partition"]);
    assert!(stdout.contains("9 leaves"), "{stdout}");
    ok(&f, &["synthesize"]);
    let dataset = Dataset::read(&f.run.join("dataset.jsonl")).unwrap();
    assert_eq!(dataset.len(), 18);
    let tree = SpaceTree::from_json(&std::fs::read_to_string(f.run.join("tree.json")).unwrap()).unwrap();
    assert_eq!(dataset.tree_fingerprint.as_deref(), Some(tree.fingerprint().as_str()));

    ok(&f, &["answer"]);
    let answered = Dataset::read(&f.run.join("answered.jsonl")).unwrap();
    assert!(answered.flags.answered);
    assert!(answered.records.iter().all(|r| r.answer.is_some()));
    // a second pass has nothing left to do
    let before = read_json(&f.run.join("run.json"))["stages"]["answer"]["usage"]["generate_calls"].clone();
    assert_eq!(before, 18);
    ok(&f, &["answer"]);
    let after = read_json(&f.run.join("run.json"))["stages"]["answer"]["usage"]["generate_calls"].clone();
    assert_eq!(after, 0);

    ok(&f, &["dedup", "--threshold", "0.7"]);
    ok(&f, &["baseline"]);
    let baseline = Dataset::read(&f.run.join("baseline.jsonl")).unwrap();
    assert_eq!(baseline.len(), 18);

    let ours = format!("tree={}", f.run.join("dataset.jsonl").display());
    let theirs = format!("temperature={}", f.run.join("baseline.jsonl").display());
    let stdout = ok(&f, &["diversity", &ours, &theirs]);
    assert!(stdout.lines().next().unwrap().contains("tree"), "{stdout}");
    let report = read_json(&f.run.join("diversity.json"));
    assert_eq!(report["ranking"][0]["name"], "tree");
    assert_eq!(report["ranking"][0]["rank"], 1);

    let status = ok(&f, &["status"]);
    assert!(!status.contains("unrecorded file"), "{status}");
}

#[test]
fn tampered_dataset_is_refused() {
    let f = fixture();
    ok(&f, &["partition"]);
    ok(&f, &["synthesize"]);
    let path = f.run.join("dataset.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replacen("\"instruction\":\"", "\"instruction\":\"edited ", 1)).unwrap();
    let out = treesynth(&f, &["dedup"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));
}

#[test]
fn bad_config_is_reported() {
    let f = fixture();
    std::fs::write(&f.config, "[task]\ndescription = \"x\"\n[partition]\npivot_count = 1\n").unwrap();
    let out = treesynth(&f, &["partition"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("pivot"));
}

#[test]
fn stray_files_are_flagged() {
    let f = fixture();
    ok(&f, &["partition"]);
    std::fs::write(f.run.join("leftover.jsonl.tmp"), "").unwrap();
    let status = ok(&f, &["status"]);
    assert!(status.contains("unrecorded file: leftover.jsonl.tmp"));
}
