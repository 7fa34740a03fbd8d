mod common;

use std::collections::HashMap;

use briefx_core::eval::{EvalReport, MetricKind};
use briefx_core::inferclient::mock::{MockReply, MockServer};
use briefx_core::schema::FieldPath;
use common::*;
use serde_json::Value;
use tempfile::TempDir;

fn json(path: &std::path::Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn line_count(path: &std::path::Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

fn infer(work: &std::path::Path, server: &MockServer, extra: &[&str]) -> std::process::Output {
    let gold = fixture("gold.jsonl");
    let url = server.base_url();
    let mut args = vec!["infer", "--gold", path_str(&gold), "--base-url", &url, "--model", "m", "--backoff-base-secs", "0.01"];
    args.extend_from_slice(extra);
    briefx(work, &args)
}

#[test]
fn clean_writes_briefings_and_stats() {
    let dir = TempDir::new().unwrap();
    ok(&briefx(dir.path(), &["clean", "--input", path_str(&fixture("posts.csv"))]));
    assert_eq!(line_count(&dir.path().join("briefings.jsonl")), 31);
    assert_eq!(line_count(&dir.path().join("dropped.jsonl")), 9);
    let stats = json(&dir.path().join("clean_stats.json"));
    assert_eq!(stats["output_count"], 31);
    assert_eq!(stats["excluded_count"], 0);
}

#[test]
fn clean_missing_input_names_path() {
    let dir = TempDir::new().unwrap();
    let out = briefx(dir.path(), &["clean", "--input", "/nonexistent/posts.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/posts.csv"));
}

#[test]
fn clean_honors_exclusion_list() {
    let dir = TempDir::new().unwrap();
    let list = dir.path().join("exclude.txt");
    std::fs::write(&list, "P1003\nP1007\n").unwrap();
    ok(&briefx(dir.path(), &["clean", "--input", path_str(&fixture("posts.csv")), "--exclude-ids", path_str(&list)]));
    let stats = json(&dir.path().join("clean_stats.json"));
    assert_eq!(stats["excluded_count"], 2);
    assert_eq!(stats["input_count"], 38);
    assert_eq!(stats["output_count"], 29);
    let ids: Vec<String> = read_briefings(dir.path()).into_iter().map(|b| b.record_id).collect();
    assert!(!ids.contains(&"P1003".to_string()));
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(briefx(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(briefx(dir.path(), &["clean"]).status.code(), Some(1));
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[paths]\nnot_a_key = 1\n").unwrap();
    assert_eq!(briefx(dir.path(), &["--config", path_str(&cfg), "split"]).status.code(), Some(1));
    assert_eq!(briefx(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn synth_dataset_and_manifest() {
    let dir = TempDir::new().unwrap();
    prepare(dir.path());
    assert_eq!(line_count(&dir.path().join("dataset.jsonl")), 31);
    let first: Value = serde_json::from_str(std::fs::read_to_string(dir.path().join("dataset.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    let roles: Vec<&str> = first["messages"].as_array().unwrap().iter().map(|m| m["role"].as_str().unwrap()).collect();
    assert_eq!(roles, ["system", "user", "assistant"]);
    let manifest = json(&dir.path().join("training_manifest.json"));
    assert_eq!(manifest["epochs"], 60);
    assert_eq!(manifest["effective_batch"], 32);
    assert_eq!(manifest["max_seq_len"], 1024);
}

#[test]
fn synth_empty_and_misaligned_gold() {
    let dir = TempDir::new().unwrap();
    ok(&briefx(dir.path(), &["clean", "--input", path_str(&fixture("posts.csv"))]));
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    ok(&briefx(dir.path(), &["synth", "--gold", path_str(&empty)]));
    assert_eq!(line_count(&dir.path().join("dataset.jsonl")), 0);

    let mut gold = read_gold(&fixture("gold.jsonl"));
    gold[0].record_id = "NOPE".into();
    let bad = dir.path().join("bad.jsonl");
    write_gold(&bad, &gold);
    assert_eq!(briefx(dir.path(), &["synth", "--gold", path_str(&bad)]).status.code(), Some(2));
}

#[test]
fn split_is_deterministic_and_checks_k() {
    let dir = TempDir::new().unwrap();
    let mut gold = read_gold(&fixture("gold.jsonl"));
    gold.truncate(10);
    let ten = dir.path().join("ten.jsonl");
    write_gold(&ten, &gold);
    ok(&briefx(dir.path(), &["--seed", "7", "split", "--gold", path_str(&ten)]));
    let first = std::fs::read(dir.path().join("folds.json")).unwrap();
    let spec = json(&dir.path().join("folds.json"));
    assert_eq!(spec["seed"], 7);
    assert!(spec["folds"].as_array().unwrap().iter().all(|f| f.as_array().unwrap().len() == 2));
    ok(&briefx(dir.path(), &["--seed", "7", "split", "--gold", path_str(&ten)]));
    assert_eq!(std::fs::read(dir.path().join("folds.json")).unwrap(), first);
    let out = briefx(dir.path(), &["split", "--gold", path_str(&ten), "--folds", "11"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_supplies_defaults() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "[paths]\ngold = {:?}\nwork_dir = {:?}\n[folds]\nk = 3\nseed = 11\n",
            path_str(&fixture("gold.jsonl")),
            path_str(&dir.path().join("w"))
        ),
    )
    .unwrap();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_briefx")).args(["--config", path_str(&cfg), "split"]).output().unwrap();
    ok(&out);
    let spec = json(&dir.path().join("w/folds.json"));
    assert_eq!(spec["k"], 3);
    assert_eq!(spec["seed"], 11);
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_briefx"))
        .args(["--config", path_str(&cfg), "--seed", "12", "split", "--folds", "4"])
        .output()
        .unwrap();
    ok(&out);
    let spec = json(&dir.path().join("w/folds.json"));
    assert_eq!((spec["k"].as_u64(), spec["seed"].as_u64()), (Some(4), Some(12)));
}

#[test]
fn infer_echo_then_self_eval_is_maximal() {
    let dir = TempDir::new().unwrap();
    prepare(dir.path());
    let gold = read_gold(&fixture("gold.jsonl"));
    let server = gold_echo_server(prompt_answers(dir.path(), &gold), vec![]);
    ok(&infer(dir.path(), &server, &[]));
    assert_eq!(line_count(&dir.path().join("raw_outputs.jsonl")), 31);
    ok(&briefx(dir.path(), &["eval", "--gold", path_str(&fixture("gold.jsonl"))]));
    let report: EvalReport = serde_json::from_value(json(&dir.path().join("report.json"))).unwrap();
    for e in &report.entries {
        assert_eq!(e.value, Some(100.0), "{} {}", e.field, e.metric);
    }
    assert!(dir.path().join("report.md").exists() && dir.path().join("report.csv").exists());
}

#[test]
fn infer_few_shot_prepends_examples() {
    let dir = TempDir::new().unwrap();
    prepare(dir.path());
    let server = MockServer::echo("{}").unwrap();
    ok(&infer(dir.path(), &server, &["--fold", "0", "--few-shot", "2"]));
    let reqs = server.requests();
    assert!(!reqs.is_empty());
    for r in &reqs {
        let user = r.last_user_text();
        assert!(user.starts_with("### Example 1\n"));
        assert!(user.contains("### Example 2\n"));
        assert!(!user.contains("### Example 3\n"));
    }
    let out = infer(dir.path(), &server, &["--fold", "0", "--few-shot", "500"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn infer_failures_and_exit_codes() {
    let dir = TempDir::new().unwrap();
    prepare(dir.path());
    // Nothing listens on this port once the listener is dropped.
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}/v1");
    let gold = fixture("gold.jsonl");
    let out = briefx(
        dir.path(),
        &["infer", "--gold", path_str(&gold), "--base-url", &url, "--model", "m", "--max-retries", "1", "--backoff-base-secs", "0.01"],
    );
    assert_eq!(out.status.code(), Some(3));
    let transcripts = std::fs::read_to_string(dir.path().join("transcripts.jsonl")).unwrap();
    assert_eq!(transcripts.lines().count(), 31);
    assert!(transcripts.lines().all(|l| l.contains("\"status\":\"failed\"")));

    let server = MockServer::start(|r| {
        if r.last_user_text().contains("济南市") { MockReply::Status(500) } else { MockReply::Text("{}".into()) }
    })
    .unwrap();
    ok(&infer(dir.path(), &server, &["--max-retries", "0"]));
    let transcripts = std::fs::read_to_string(dir.path().join("transcripts.jsonl")).unwrap();
    let failed = transcripts.lines().filter(|l| l.contains("\"status\":\"failed\"")).count();
    assert!(failed > 0 && failed < 31);
}

#[test]
fn infer_missing_key_is_config_error() {
    let dir = TempDir::new().unwrap();
    prepare(dir.path());
    let server = MockServer::echo("{}").unwrap();
    let out = infer(dir.path(), &server, &["--api-key-env", "BRIEFX_CLI_TEST_UNSET_KEY"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("BRIEFX_CLI_TEST_UNSET_KEY"));
}

#[test]
fn eval_counts_corrupt_line_as_absent() {
    let dir = TempDir::new().unwrap();
    prepare(dir.path());
    let gold = read_gold(&fixture("gold.jsonl"));
    let server = gold_echo_server(prompt_answers(dir.path(), &gold), vec![]);
    ok(&infer(dir.path(), &server, &[]));
    let path = dir.path().join("raw_outputs.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines[4] = "{\"record_id\": \"P1004\", \"text\": ".into();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    ok(&briefx(dir.path(), &["eval", "--gold", path_str(&fixture("gold.jsonl"))]));
    let report: EvalReport = serde_json::from_value(json(&dir.path().join("report.json"))).unwrap();
    assert!(report.absence.values().all(|n| *n == 1));
    assert!(report.value(FieldPath::Province.as_str(), MetricKind::Emr).unwrap() < 100.0);
}

#[test]
fn per_fold_eval_and_aggregate() {
    let dir = TempDir::new().unwrap();
    prepare(dir.path());
    let gold = read_gold(&fixture("gold.jsonl"));
    let server = gold_echo_server(prompt_answers(dir.path(), &gold), vec![]);
    for i in 0..5 {
        let fold = i.to_string();
        ok(&infer(dir.path(), &server, &["--fold", &fold]));
        ok(&briefx(dir.path(), &["eval", "--gold", path_str(&fixture("gold.jsonl")), "--fold", &fold]));
    }
    ok(&briefx(dir.path(), &["eval", "--aggregate"]));
    let mean: EvalReport = serde_json::from_value(json(&dir.path().join("report.mean.json"))).unwrap();
    assert_eq!(mean.fold, "mean-of-folds");
    assert_eq!(mean.seed, Some(7));
    assert_eq!(mean.sample_count, 31);
    assert!(mean.entries.iter().all(|e| e.value == Some(100.0)));

    let md = briefx(dir.path(), &["report", "--input", path_str(&dir.path().join("report.mean.json"))]);
    ok(&md);
    assert!(String::from_utf8_lossy(&md.stdout).contains("| Accuracy(%) |"));
    let csv = briefx(dir.path(), &["report", "--input", path_str(&dir.path().join("report.mean.json")), "--format", "csv"]);
    assert!(String::from_utf8_lossy(&csv.stdout).starts_with("fold,field,metric,value"));
}

#[test]
fn kappa_identical_flip_and_degenerate() {
    let dir = TempDir::new().unwrap();
    let a_path = fixture("gold.jsonl");
    ok(&briefx(dir.path(), &["kappa", "--a", path_str(&a_path), "--b", path_str(&a_path)]));
    let rep = json(&dir.path().join("agreement.json"));
    assert_eq!(rep["pooled"], 1.0);
    assert_eq!(line_count(&dir.path().join("disagreements.csv")), 1);

    let mut b = read_gold(&a_path);
    b[3].record.event.cybercrime = !b[3].record.event.cybercrime;
    b.reverse();
    let b_path = dir.path().join("b.jsonl");
    write_gold(&b_path, &b);
    ok(&briefx(dir.path(), &["kappa", "--a", path_str(&a_path), "--b", path_str(&b_path)]));
    let csv = std::fs::read_to_string(dir.path().join("disagreements.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.contains("P1003,event.cybercrime"));

    let mut flat = read_gold(&a_path);
    for g in &mut flat {
        g.record.impact.social_impact = false;
    }
    let flat_path = dir.path().join("flat.jsonl");
    write_gold(&flat_path, &flat);
    ok(&briefx(dir.path(), &["kappa", "--a", path_str(&flat_path), "--b", path_str(&flat_path)]));
    let md = std::fs::read_to_string(dir.path().join("agreement.md")).unwrap();
    assert!(md.contains("| impact.social_impact | kappa | undefined |"));
}

#[test]
fn pipeline_is_idempotent() {
    let run = || {
        let dir = TempDir::new().unwrap();
        prepare(dir.path());
        let gold = read_gold(&fixture("gold.jsonl"));
        let server = gold_echo_server(prompt_answers(dir.path(), &gold), vec![]);
        ok(&infer(dir.path(), &server, &[]));
        ok(&briefx(dir.path(), &["eval", "--gold", path_str(&fixture("gold.jsonl"))]));
        let names = [
            "briefings.jsonl",
            "dropped.jsonl",
            "clean_stats.json",
            "dataset.jsonl",
            "training_manifest.json",
            "folds.json",
            "raw_outputs.jsonl",
            "predictions.jsonl",
            "report.json",
            "report.md",
            "report.csv",
        ];
        let files: HashMap<&str, Vec<u8>> = names.iter().map(|n| (*n, std::fs::read(dir.path().join(n)).unwrap())).collect();
        files
    };
    let a = run();
    let b = run();
    for (name, bytes) in &a {
        assert_eq!(bytes, &b[name], "{name} differs between runs");
    }
}
