use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ctxcite(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxcite")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ctxcite(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn output_hash(m: &Value, name: &str) -> String {
    m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["path"].as_str().unwrap().ends_with(name))
        .unwrap_or_else(|| panic!("{name} not in manifest"))["sha256"]
        .as_str()
        .unwrap()
        .to_string()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

const SMALL_MODEL: [&str; 8] = [
    "--set",
    "model.hidden_size=16",
    "--set",
    "model.n_heads=2",
    "--set",
    "model.max_seq_len=96",
    "--set",
    "train.batch_size=2",
];

fn synth_small(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("corpus-{seed}"));
    ok(&[
        "synth",
        "--seed",
        seed,
        "--n-examples",
        "12",
        "--n-heldout",
        "4",
        "--n-docs",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    out
}

#[test]
fn synth_is_deterministic_and_hashed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth_small(tmp.path(), "7");
    let b = tmp.path().join("again");
    ok(&["synth", "--seed", "7", "--n-examples", "12", "--n-heldout", "4", "--n-docs", "3", "--out", b.to_str().unwrap()]);
    assert_eq!(fs::read(a.join("train.jsonl")).unwrap(), fs::read(b.join("train.jsonl")).unwrap());
    let m = manifest(&a);
    assert_eq!(m["command"], "synth");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config"]["corpus"]["n_docs"], 3);
    for name in ["train.jsonl", "heldout.jsonl"] {
        let bytes = fs::read(a.join(name)).unwrap();
        use sha2_check::sha256_hex;
        assert_eq!(output_hash(&m, name), sha256_hex(&bytes));
    }
    assert_eq!(output_hash(&m, "train.jsonl"), output_hash(&manifest(&b), "train.jsonl"));
}

#[test]
fn a_manifest_reproduces_its_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth_small(tmp.path(), "3");
    let b = tmp.path().join("replay");
    ok(&["synth", "--config", &p(&a, "manifest.json"), "--out", b.to_str().unwrap()]);
    assert_eq!(fs::read(a.join("train.jsonl")).unwrap(), fs::read(b.join("train.jsonl")).unwrap());
    assert_eq!(fs::read(a.join("heldout.jsonl")).unwrap(), fs::read(b.join("heldout.jsonl")).unwrap());
}

#[test]
fn too_many_documents_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ctxcite(&["synth", "--n-docs", "9", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("N_max = 8"), "{err}");
    assert!(!tmp.path().join("manifest.json").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().to_str().unwrap();
    assert_eq!(ctxcite(&["synth", "--bogus", "--out", out_dir]).status.code(), Some(2));
    assert_eq!(ctxcite(&["synth"]).status.code(), Some(2));
    assert_eq!(ctxcite(&["synth", "--set", "train.nope=1", "--out", out_dir]).status.code(), Some(2));
    assert_eq!(ctxcite(&["synth", "--config", "/nonexistent.toml", "--out", out_dir]).status.code(), Some(2));
    let missing = ctxcite(&["eval", "--gold", "--corpus", "/nonexistent/c.jsonl", "--out", out_dir]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nonexistent"));
}

#[test]
fn gold_responses_score_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth_small(tmp.path(), "11");
    let out = tmp.path().join("eval");
    let line = ok(&["eval", "--gold", "--corpus", &p(&corpus, "train.jsonl"), "--out", out.to_str().unwrap()]);
    assert!(line.contains("F1 = 100.0"), "{line}");
    let metrics: Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["percent"]["citation_f1"], 100.0);
}

#[test]
fn full_pipeline_on_a_tiny_model() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth_small(tmp.path(), "5");
    let train_path = p(&corpus, "train.jsonl");
    let held_path = p(&corpus, "heldout.jsonl");
    let before = fs::read(&train_path).unwrap();

    let run = tmp.path().join("run");
    let mut args = vec!["train", "--corpus", &train_path, "--n-steps", "4", "--seed", "2", "--out"];
    let run_s = run.to_str().unwrap().to_string();
    args.push(&run_s);
    args.extend_from_slice(&SMALL_MODEL);
    args.extend_from_slice(&["--set", "train.checkpoint_every=2"]);
    let line = ok(&args);
    assert!(line.starts_with("train: 4 steps"), "{line}");
    assert!(run.join("model.ckpt").exists());
    assert!(run.join("checkpoints/step-000002.ckpt").exists());
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert_eq!(fs::read(&train_path).unwrap(), before, "inputs are never modified");
    let m = manifest(&run);
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);

    let gen = tmp.path().join("gen");
    ok(&[
        "generate",
        "--model",
        &p(&run, "model.ckpt"),
        "--corpus",
        &held_path,
        "--set",
        "decode.max_new_tokens=6",
        "--out",
        gen.to_str().unwrap(),
    ]);
    let gens = fs::read_to_string(gen.join("generations.jsonl")).unwrap();
    assert_eq!(gens.lines().count(), 4);

    let ev = tmp.path().join("eval");
    let line = ok(&[
        "eval",
        "--corpus",
        &held_path,
        "--generations",
        &p(&gen, "generations.jsonl"),
        "--model",
        &p(&run, "model.ckpt"),
        "--out",
        ev.to_str().unwrap(),
    ]);
    assert!(line.contains("citation F1 =") && line.contains("router accuracy"), "{line}");
    let metrics: Value = serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["n_examples"], 4);
    assert!(ev.join("probe.json").exists());

    let hm = tmp.path().join("heatmap");
    ok(&[
        "heatmap",
        "--model",
        &p(&run, "model.ckpt"),
        "--corpus",
        &held_path,
        "--example",
        "1",
        "--set",
        "decode.max_new_tokens=5",
        "--out",
        hm.to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(hm.join("heatmap.csv")).unwrap();
    let index: Value = serde_json::from_str(&fs::read_to_string(hm.join("heatmap.index.json")).unwrap()).unwrap();
    assert_eq!(csv.lines().count(), index["positions"].as_array().unwrap().len());

    let ab = tmp.path().join("ablate");
    let mut args = vec![
        "ablate",
        "--corpus",
        &train_path,
        "--heldout",
        &held_path,
        "--seeds",
        "0,1",
        "--n-steps",
        "2",
        "--set",
        "decode.max_new_tokens=4",
        "--out",
    ];
    let ab_s = ab.to_str().unwrap().to_string();
    args.push(&ab_s);
    args.extend_from_slice(&SMALL_MODEL);
    let line = ok(&args);
    assert!(line.contains("w/o CAE") && line.contains("w/o Attn"), "{line}");
    let report: Value = serde_json::from_str(&fs::read_to_string(ab.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 6);
    let names: Vec<&str> = report["summary"].as_array().unwrap().iter().map(|s| s["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["full", "w/o CAE", "w/o Attn"]);
}

mod sha2_check {
    use sha2::{Digest, Sha256};

    pub fn sha256_hex(bytes: &[u8]) -> String {
        hex::encode(Sha256::digest(bytes))
    }
}
