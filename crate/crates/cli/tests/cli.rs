use std::path::Path;
use std::process::{Command, Output};

use dxalign::policy::{checkpoint_hash, PolicyModel};

const SMALL: &[&str] = &[
    "generation.qa_records=60",
    "sft.epochs=1",
    "model.d_model=16",
    "model.d_mlp=32",
    "model.n_heads=2",
    "forge.samples_per_context=2",
    "sp.cases=4",
];

fn dxalign(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dxalign"));
    cmd.current_dir(dir).env("RUST_LOG", "warn");
    for o in SMALL {
        cmd.args(["--set", o]);
    }
    cmd.args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dxalign(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn missing_rules_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = dxalign(dir.path(), &["--set", "paths.rules=\"nowhere/rules.jsonl\"", "gen"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nowhere/rules.jsonl"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dxalign(dir.path(), &["--set", "sft.epochz=2", "config"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("epochz"), "{}", stderr(&out));
}

#[test]
fn bad_usage_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dxalign(dir.path(), &["no-such-stage"]).status.code(), Some(1));
}

#[test]
fn preference_training_needs_the_supervised_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dxalign(dir.path(), &["train-dpo"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("sft.ckpt"), "{}", stderr(&out));
}

#[test]
fn stages_before_their_inputs_fail_with_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["ruleify", "split", "train-sft", "forge", "eval"] {
        assert_eq!(dxalign(dir.path(), &[stage]).status.code(), Some(2), "{stage}");
    }
}

#[test]
fn config_prints_loadable_toml() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["--seed", "9", "config"]);
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, &text).unwrap();
    let again = Command::new(env!("CARGO_BIN_EXE_dxalign"))
        .current_dir(dir.path())
        .args(["-c", "exp.toml", "config"])
        .output()
        .unwrap();
    assert!(again.status.success(), "{}", stderr(&again));
    assert!(text.contains("seed = 9"));
}

#[test]
fn corpus_stages_rerun_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let read = |name: &str| std::fs::read(dir.path().join("work/corpus").join(name)).unwrap();
    let files = ["converted.jsonl", "dialogues.jsonl", "stats.json", "train.jsonl", "test.jsonl", "split.json"];
    let mut first = Vec::new();
    for round in 0..2 {
        for stage in ["gen", "ruleify", "split"] {
            ok(dir.path(), &[stage]);
        }
        let now: Vec<Vec<u8>> = files.iter().map(|f| read(f)).collect();
        if round == 0 {
            first = now;
        } else {
            assert!(first == now, "rerun changed corpus files");
        }
    }
}

#[test]
fn full_chain_records_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for stage in ["gen", "ruleify", "split", "train-sft", "forge", "train-dpo"] {
        ok(d, &[stage]);
    }
    let ck = d.join("work/checkpoints");
    let sft_hash = checkpoint_hash(&ck.join("sft.ckpt")).unwrap();
    let (_, sft) = PolicyModel::<f64>::load(&ck.join("sft.ckpt")).unwrap();
    let (_, dpo) = PolicyModel::<f64>::load(&ck.join("dpo.ckpt")).unwrap();
    assert_eq!(sft.parent, None);
    assert_eq!(dpo.parent.as_deref(), Some(sft_hash.as_str()));
    assert_eq!(dpo.reference.as_deref(), Some(sft_hash.as_str()));
    assert_eq!(sft.config_hash, dpo.config_hash);

    ok(d, &["eval"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("work/reports/eval-dpo.json")).unwrap()).unwrap();
    assert_eq!(report["_meta"]["config_hash"], serde_json::json!(dpo.config_hash));
    assert!(report["data"]["heldout"]["positive_fraction"].is_number());

    let sp = ok(d, &["sp-test"]);
    assert!(sp.contains("sft") && sp.contains("dpo"), "{sp}");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("work/reports/sp.json")).unwrap()).unwrap();
    assert_eq!(summary["data"]["honesty_violations"], 0);
}
