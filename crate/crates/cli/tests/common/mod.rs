#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use briefx_core::corpus::BriefingRecord;
use briefx_core::inferclient::mock::{MockReply, MockServer};
use briefx_core::promptkit::{render_user_prompt, PromptTemplates};
use briefx_core::schema::{canonical_json, GoldRecord};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn briefx(work: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_briefx"))
        .arg("--work-dir")
        .arg(work)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("run briefx")
}

pub fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn read_gold(path: &Path) -> Vec<GoldRecord> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| GoldRecord::from_json_line(l).unwrap())
        .collect()
}

pub fn write_gold(path: &Path, gold: &[GoldRecord]) {
    let text: String = gold.iter().map(|g| g.to_json_line() + "\n").collect();
    std::fs::write(path, text).unwrap();
}

pub fn read_briefings(work: &Path) -> Vec<BriefingRecord> {
    std::fs::read_to_string(work.join("briefings.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Rendered user prompt -> (record id, canonical gold JSON).
pub fn prompt_answers(work: &Path, gold: &[GoldRecord]) -> HashMap<String, (String, String)> {
    let templates = PromptTemplates::english();
    let briefings: HashMap<String, BriefingRecord> =
        read_briefings(work).into_iter().map(|b| (b.record_id.clone(), b)).collect();
    gold.iter()
        .map(|g| {
            let prompt = render_user_prompt(&templates, &briefings[&g.record_id]).unwrap();
            (prompt, (g.record_id.clone(), canonical_json(&g.record).unwrap()))
        })
        .collect()
}

pub const REFUSAL: &str = "抱歉，我暂时无法完成该任务。";

/// Answers each known prompt with its gold JSON; prompts of `corrupt` ids
/// get a reply with no JSON in it.
pub fn gold_echo_server(answers: HashMap<String, (String, String)>, corrupt: Vec<String>) -> MockServer {
    MockServer::start(move |req| match answers.get(req.last_user_text()) {
        Some((id, _)) if corrupt.contains(id) => MockReply::Text(REFUSAL.into()),
        Some((_, json)) => MockReply::Text(json.clone()),
        None => MockReply::Status(400),
    })
    .expect("start mock server")
}

/// Runs clean, synth and split on the fixture corpus.
pub fn prepare(work: &Path) {
    let posts = fixture("posts.csv");
    let gold = fixture("gold.jsonl");
    ok(&briefx(work, &["clean", "--input", path_str(&posts)]));
    ok(&briefx(work, &["synth", "--gold", path_str(&gold)]));
    ok(&briefx(work, &["--seed", "7", "split", "--gold", path_str(&gold)]));
}
