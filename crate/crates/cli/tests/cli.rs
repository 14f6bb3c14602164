use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bindlogic"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn library(dir: &Path) -> PathBuf {
    let lib = dir.join("lib.smi");
    let out = run(&["synth-library", "--n", "600", "--seed", "5", "--out", s(&lib)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    lib
}

fn manifest(path: &Path) -> serde_json::Value {
    let text = fs::read_to_string(path).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn missing_library_is_a_usage_error() {
    let out = run(&["build-dataset", "--logic-id", "1", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--library"), "{err}");
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn unknown_logic_id_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let lib = library(dir.path());
    let out = run(&["build-dataset", "--library", s(&lib), "--logic-id", "99", "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn corrupt_dataset_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("bad.jsonl");
    fs::write(
        &ds,
        "{\"id\":\"a\",\"smiles\":\"CCO\",\"label\":true,\"stratum\":\"1\",\"split\":\"train\"}\nnot json\n",
    )
    .unwrap();
    let out = run(&["train", "--dataset", s(&ds), "--steps", "5", "--out", s(&dir.path().join("m.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn short_stratum_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let lib = library(dir.path());
    let out = run(&[
        "build-dataset", "--library", s(&lib), "--logic-id", "1", "--per-stratum", "5000", "--out",
        s(&dir.path().join("d.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn build_dataset_is_deterministic_and_config_overridable() {
    let dir = tempfile::tempdir().unwrap();
    let lib = library(dir.path());
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("library = {}\nlogic_id = 1\nper-stratum = 40\nseed = 3\n", s(&lib))).unwrap();

    let out = run(&["--config", s(&cfg), "build-dataset", "--out", s(&a)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["build-dataset", "--config", s(&cfg), "--out", s(&b)]);
    assert!(out.status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(dir.path().join("a.jsonl.meta.json").exists());

    let m = manifest(&dir.path().join("a.jsonl.manifest.json"));
    assert_eq!(m["subcommand"], "build-dataset");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["opts"]["per_stratum"], 40);
    assert_eq!(m["featurization_version"], 1);
    assert_eq!(m["outputs"][s(&a)].as_str().unwrap().len(), 64);
    assert!(m["inputs"][s(&lib)].is_string());

    // A flag after the config wins.
    let c = dir.path().join("c.jsonl");
    let out = run(&["--config", s(&cfg), "build-dataset", "--seed", "4", "--out", s(&c)]);
    assert!(out.status.success());
    assert_eq!(manifest(&dir.path().join("c.jsonl.manifest.json"))["seed"], 4);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    fs::write(&cfg, "no-such-flag = 1\n").unwrap();
    let out = run(&["--config", s(&cfg), "build-dataset", "--out", s(&c)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-flag"));
}

#[test]
fn pipeline_report_and_attack() {
    let dir = tempfile::tempdir().unwrap();
    let lib = library(dir.path());
    let runs = dir.path().join("runs");
    let run_dir = runs.join("logic1");
    let out = run(&[
        "pipeline", "--library", s(&lib), "--logic-id", "1", "--per-stratum", "60", "--seed", "7", "--steps", "300",
        "--ig-steps", "20", "--threads", "2", "--out-dir", s(&run_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "dataset.jsonl",
        "dataset.jsonl.meta.json",
        "model.ckpt",
        "evaluation.json",
        "attributions.jsonl",
        "attribution_auc.json",
        "manifest.json",
        "model.ckpt.manifest.json",
        "attributions.jsonl.manifest.json",
    ] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let m = manifest(&run_dir.join("manifest.json"));
    assert_eq!(m["subcommand"], "pipeline");
    assert_eq!(m["steps"].as_array().unwrap().len(), 5);
    assert!(m["inputs"][s(&lib)].is_string());
    assert!(m["summary"]["evaluate.model_auc"].is_number());
    assert_eq!(m["threads"], 2);

    // Retraining from the same dataset and seed reproduces the checkpoint.
    let ckpt = dir.path().join("again.ckpt");
    let out = run(&[
        "train", "--dataset", s(&run_dir.join("dataset.jsonl")), "--seed", "7", "--steps", "300", "--out", s(&ckpt),
    ]);
    assert!(out.status.success());
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(run_dir.join("model.ckpt")).unwrap());

    let out = run(&["report", "--out-dir", s(&runs)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert_eq!(table.lines().count(), 2, "{table}");
    assert!(table.contains("model AUC"));
    let out = run(&["report", "--out-dir", s(&run_dir), "--json"]);
    let rows: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rows[0]["logic_id"], "1");

    let auc = dir.path().join("auc.json");
    let out = run(&[
        "attribution-auc", "--attributions", s(&run_dir.join("attributions.jsonl")), "--dataset",
        s(&run_dir.join("dataset.jsonl")), "--logic-id", "1", "--out", s(&auc),
    ]);
    assert!(out.status.success());
    assert_eq!(fs::read(&auc).unwrap(), fs::read(run_dir.join("attribution_auc.json")).unwrap());

    let findings = dir.path().join("findings.jsonl");
    let out = run(&[
        "attack", "--ckpt", s(&run_dir.join("model.ckpt")), "--dataset", s(&run_dir.join("dataset.jsonl")),
        "--attributions", s(&run_dir.join("attributions.jsonl")), "--max-edits", "1", "--beam", "2", "--out",
        s(&findings),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(&dir.path().join("findings.jsonl.manifest.json"));
    assert!(m["summary"]["molecules_attacked"].as_u64().unwrap() > 0);
    for line in fs::read_to_string(&findings).unwrap().lines() {
        let f: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(f["perturbed_smiles"].is_string());
        assert_eq!(f["machine_generated"], true);
    }

    let heat = dir.path().join("heat");
    let out = run(&[
        "attribute", "--ckpt", s(&run_dir.join("model.ckpt")), "--dataset", s(&run_dir.join("dataset.jsonl")),
        "--ig-steps", "10", "--heatmaps", s(&heat), "--out", s(&dir.path().join("attr.jsonl")),
    ]);
    assert!(out.status.success());
    assert!(fs::read_dir(&heat).unwrap().count() > 0);
}

#[test]
fn report_on_empty_directory_lists_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["report", "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("MissingArtifacts"), "{err}");
    assert!(err.contains("evaluation.json"), "{err}");
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("pipeline"));
}
