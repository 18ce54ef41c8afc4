use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;
use tempfile::TempDir;

fn specs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs")
}

fn audit() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_audit"));
    cmd.env_remove("AUDIT_BACKEND_URL").env_remove("AUDIT_LOG");
    cmd
}

fn run(args: &[&str]) -> Output {
    audit().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// First `n` captions of the sample corpus, as a lines file.
fn small_corpus(dir: &Path, n: usize) -> PathBuf {
    let text = std::fs::read_to_string(specs().join("captions50.json")).unwrap();
    let records: Vec<Value> = serde_json::from_str(&text).unwrap();
    let lines: Vec<&str> = records.iter().take(n).map(|r| r["caption"].as_str().unwrap()).collect();
    let path = dir.join("prompts.txt");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

fn spec(name: &str) -> String {
    specs().join(name).display().to_string()
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    std::fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn help_exits_zero_and_usage_errors_exit_one() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["reliability", "--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["reliability", "--bogus"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
}

#[test]
fn missing_corpus_is_fatal_and_names_the_path() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nowhere.txt");
    let out = run(&[
        "reliability",
        "--synthetic",
        &spec("benign.json"),
        "--corpus",
        missing.to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nowhere.txt"), "{stderr}");
}

#[test]
fn no_backend_is_fatal() {
    let tmp = TempDir::new().unwrap();
    let corpus = small_corpus(tmp.path(), 3);
    let out = run(&["reliability", "--corpus", corpus.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no backend"));
}

#[test]
fn invalid_config_is_fatal() {
    let tmp = TempDir::new().unwrap();
    let corpus = small_corpus(tmp.path(), 3);
    let config = tmp.path().join("config.json");
    std::fs::write(&config, r#"{"tau": 1.5}"#).unwrap();
    let out = run(&[
        "reliability",
        "--synthetic",
        &spec("benign.json"),
        "--config",
        config.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn reliability_writes_manifested_artifacts() {
    let tmp = TempDir::new().unwrap();
    let corpus = small_corpus(tmp.path(), 8);
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "reliability",
        "--synthetic",
        &spec("benign.json"),
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--parallel",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let records = String::from_utf8(read(&out_dir, "records.jsonl")).unwrap();
    let globals = records
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|r| r["scope"] == "global")
        .count();
    assert_eq!(globals, 8);

    let manifest: Value = serde_json::from_slice(&read(&out_dir, "manifest.json")).unwrap();
    assert_eq!(manifest["command"], "reliability");
    assert_eq!(manifest["counts"]["prompts"], 8);
    let artifacts = manifest["artifacts"].as_array().unwrap();
    for name in [
        "records.jsonl",
        "summary.json",
        "issues.json",
        "distribution_global.csv",
    ] {
        assert!(
            artifacts.iter().any(|a| a["path"] == name),
            "{name} missing from manifest"
        );
    }
    for a in artifacts {
        let bytes = read(&out_dir, a["path"].as_str().unwrap());
        assert_eq!(a["bytes"].as_u64().unwrap() as usize, bytes.len());
        assert_eq!(a["sha256"].as_str().unwrap(), t2i_sha(&bytes));
    }
}

fn t2i_sha(bytes: &[u8]) -> String {
    t2i_audit::ingest::sha256_hex(bytes)
}

#[test]
fn over_long_prompt_gives_partial_success() {
    let tmp = TempDir::new().unwrap();
    let corpus = small_corpus(tmp.path(), 4);
    let mut text = std::fs::read_to_string(&corpus).unwrap();
    text.push_str(&vec!["word"; 100].join(" "));
    text.push('\n');
    std::fs::write(&corpus, text).unwrap();
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "reliability",
        "--synthetic",
        &spec("benign.json"),
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let issues: Value = serde_json::from_slice(&read(&out_dir, "issues.json")).unwrap();
    let failed = issues["failed"].as_array().unwrap();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0]["prompt_id"], "5");
}

#[test]
fn self_compare_has_no_shift() {
    let tmp = TempDir::new().unwrap();
    let corpus = small_corpus(tmp.path(), 10);
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "reliability",
        "--synthetic",
        &spec("benign.json"),
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let summary = out_dir.join("summary.json");
    let out = run(&[
        "compare",
        summary.to_str().unwrap(),
        summary.to_str().unwrap(),
        "--phase",
        "global",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cmp: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cmp["delta_phi_mo"].as_f64().unwrap(), 0.0);
    assert_eq!(cmp["mode_ratio"].as_f64().unwrap(), 1.0);
    assert_eq!(cmp["left_shifted"], false);
}

#[test]
fn compare_missing_summary_is_fatal() {
    let out = run(&["compare", "/nonexistent/a.json", "/nonexistent/b.json"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/a.json"));
}

fn retrieve(out_dir: &Path, corpus: &Path, parallel: &str, backend: &[&str]) {
    let mut args = vec![
        "retrieve",
        "--corpus",
        corpus.to_str().unwrap(),
        "--inject",
        "drink",
        "--out",
        out_dir.to_str().unwrap(),
        "--parallel",
        parallel,
    ];
    args.extend_from_slice(backend);
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn outputs_do_not_depend_on_parallelism() {
    let tmp = TempDir::new().unwrap();
    let corpus = small_corpus(tmp.path(), 20);
    let biased = spec("biased_nl.json");
    let (a, b) = (tmp.path().join("p1"), tmp.path().join("p4"));
    retrieve(&a, &corpus, "1", &["--synthetic", &biased]);
    retrieve(&b, &corpus, "4", &["--synthetic", &biased]);
    for rel in [
        "records.jsonl",
        "candidates.csv",
        "distribution_global.csv",
        "summary.json",
        "retrieval.json",
    ] {
        assert_eq!(read(&a, rel), read(&b, rel), "{rel} differs");
    }
    let retrieval: Value = serde_json::from_slice(&read(&a, "retrieval.json")).unwrap();
    assert_eq!(retrieval["recall"]["ground_truth"][0], "drink");
}

struct Served(std::process::Child);

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn served_synthetic_matches_in_process() {
    let tmp = TempDir::new().unwrap();
    let corpus = small_corpus(tmp.path(), 10);
    let biased = spec("biased_nl.json");
    let mut child = audit()
        .args(["serve-synthetic", "--synthetic", &biased, "--addr", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let served = Served(child);
    let mut url = String::new();
    BufReader::new(stdout).read_line(&mut url).unwrap();
    let url = url.trim().to_string();
    assert!(url.starts_with("http://127.0.0.1:"), "{url}");

    let (local, remote) = (tmp.path().join("local"), tmp.path().join("remote"));
    retrieve(&local, &corpus, "3", &["--synthetic", &biased]);
    retrieve(&remote, &corpus, "3", &["--backend", &url]);
    drop(served);
    for rel in ["records.jsonl", "candidates.csv", "summary.json"] {
        assert_eq!(read(&local, rel), read(&remote, rel), "{rel} differs");
    }
}

#[test]
fn ontology_and_diversity_commands() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("onto");
    let out = run(&[
        "ontology",
        "--synthetic",
        &spec("nested_animal.json"),
        "--tree",
        &spec("ontology_animal.json"),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(read(&out_dir, "ontology.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("concept,depth,diversity,delta_d"));
    assert_eq!(lines.count(), 8);

    let out_dir = tmp.path().join("div");
    let out = run(&[
        "diversity",
        "--synthetic",
        &spec("biased_nl.json"),
        "--token",
        "drink",
        "--token",
        "cat",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let rows: Value = serde_json::from_slice(&read(&out_dir, "diversity.json")).unwrap();
    let d = |i: usize| rows[i]["diversity"].as_f64().unwrap();
    assert!(d(0) < d(1));
}

#[test]
fn fairness_rejects_special_token_index() {
    let tmp = TempDir::new().unwrap();
    let out = run(&[
        "fairness",
        "--synthetic",
        &spec("benign.json"),
        "--prompt",
        "a dog on a bench",
        "--token-index",
        "0",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
}
