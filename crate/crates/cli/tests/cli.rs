//! Runs the `gridfm` binary as a user would.

use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn gridfm(dir: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gridfm"));
    cmd.current_dir(dir)
        .env_remove("LLM_API_KEY")
        .env_remove("GRIDFM_PROVIDER")
        .env_remove("RUST_LOG")
        .stdin(Stdio::null());
    cmd
}

fn run(dir: &Path, args: &[&str]) -> Output {
    gridfm(dir).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn json_ok(dir: &Path, args: &[&str]) -> Value {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", stderr(&out));
    serde_json::from_str(&stdout(&out)).unwrap_or_else(|e| panic!("{args:?} printed invalid JSON ({e}): {}", stdout(&out)))
}

#[test]
fn dispatch_json_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--json", "dispatch", "solve"]);
    assert!(out.status.success());
    let golden = include_str!("fixtures/dispatch_five_unit.json");
    assert_eq!(stdout(&out), golden);
    let v: Value = serde_json::from_str(golden).unwrap();
    assert!((v["solution"]["cost"].as_f64().unwrap() - 131455.000).abs() < 0.5);
}

#[test]
fn dispatch_report_file_matches_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--json", "dispatch", "solve", "--demand", "405", "--report", "r.json"]);
    assert!(out.status.success());
    let file = std::fs::read_to_string(dir.path().join("r.json")).unwrap();
    let a: Value = serde_json::from_str(&file).unwrap();
    let b: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(a, b);
    assert!((a["solution"]["cost"].as_f64().unwrap() - 134670.416).abs() < 0.5);
}

#[test]
fn every_subcommand_has_help() {
    let dir = tempfile::tempdir().unwrap();
    let commands: &[&[&str]] = &[
        &[],
        &["dispatch"],
        &["dispatch", "solve"],
        &["ev"],
        &["ev", "solve"],
        &["opro"],
        &["opro", "run"],
        &["opro", "adapt"],
        &["opro", "replay"],
        &["doc"],
        &["doc", "ingest"],
        &["doc", "ask"],
        &["doc", "summarize"],
        &["sa"],
        &["sa", "eval"],
        &["serve"],
        &["chat"],
    ];
    for path in commands {
        let mut args = path.to_vec();
        args.push("--help");
        let out = run(dir.path(), &args);
        assert!(out.status.success(), "{args:?} exited {:?}", out.status.code());
        assert!(stdout(&out).contains("Usage: gridfm"), "{args:?}");
    }
}

#[test]
fn live_provider_without_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["opro", "run", "--steps", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("LLM_API_KEY"), "{err}");
    assert!(err.contains("--provider mock"), "{err}");
}

#[test]
fn misspelled_flag_suggests_the_right_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["dispatch", "solve", "--demnd", "400"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("tip") && err.contains("--demand"), "{err}");
}

#[test]
fn infeasible_demand_fails_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["dispatch", "solve", "--demand", "5000"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!stderr(&out).is_empty());
}

#[test]
fn unknown_provider_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--provider", "oracle", "opro", "run"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn json_output_parses_for_every_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let m = ["--provider", "mock", "--json"];
    let with = |rest: &[&str]| -> Vec<String> { m.iter().chain(rest).map(|s| s.to_string()).collect() };
    let call = |rest: &[&str]| {
        let args = with(rest);
        json_ok(d, &args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    let ev = call(&["ev", "solve", "--schedule-out", "schedule.csv"]);
    assert!(ev["schedule"]["objective"].as_f64().unwrap() < 1e-4);
    assert!(d.join("schedule.csv").exists());

    let run = call(&["opro", "run", "--steps", "8", "--transcript", "run.jsonl"]);
    assert_eq!(run["status"]["state"], "completed");
    let replay = call(&["opro", "replay", "--transcript", "run.jsonl"]);
    assert_eq!(replay["matches"], true);
    let adapt = call(&["opro", "adapt", "--from", "run.jsonl", "--demand", "405", "--steps", "4"]);
    assert!(adapt["best_cost"].as_f64().unwrap() > 134670.0);

    let text = "Breaker B7 at the north substation was replaced in March. ".repeat(40);
    std::fs::write(d.join("doc.txt"), text).unwrap();
    let ingest = call(&["doc", "ingest", "--file", "doc.txt", "--index", "ix.jsonl", "--chunk-size", "400", "--overlap", "50"]);
    assert!(ingest["chunks"].as_u64().unwrap() > 1);
    let ask = call(&["doc", "ask", "--index", "ix.jsonl", "--question", "Which breaker was replaced?", "--k", "2"]);
    assert_eq!(ask["citations"].as_array().unwrap().len(), 2);
    let summary = call(&["doc", "summarize", "--index", "ix.jsonl"]);
    assert!(summary.is_object());

    let mut csv = String::from("path,label\n");
    for i in 0..15 {
        let name = format!("img{i}.png");
        std::fs::write(d.join(&name), format!("image {i}")).unwrap();
        csv.push_str(&format!("{name},{}\n", u8::from(i < 8)));
    }
    std::fs::write(d.join("manifest.csv"), csv).unwrap();
    let sa = call(&["sa", "eval", "--approach", "1", "--manifest", "manifest.csv", "--rounds", "2"]);
    assert_eq!(sa["rounds"].as_array().unwrap().len(), 2);
}

#[test]
fn config_file_selects_the_provider() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("gridfm.toml"), "provider = \"mock\"\n").unwrap();
    let v = json_ok(dir.path(), &["--config", "gridfm.toml", "--json", "opro", "run", "--steps", "3"]);
    assert_eq!(v["status"]["state"], "completed");

    std::fs::write(dir.path().join("bad.toml"), "provider = \"mock\"\napi_key = \"sk\"\n").unwrap();
    let out = run(dir.path(), &["--config", "bad.toml", "opro", "run", "--steps", "1"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn chat_session_reaches_a_schedule_and_resumes() {
    use std::io::Write;
    let dir = tempfile::tempdir().unwrap();
    let talk = |turns: &[&str]| -> Vec<Value> {
        let mut child = gridfm(dir.path())
            .args(["--provider", "mock", "--json", "chat", "--session", "s.json"])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        {
            let mut stdin = child.stdin.take().unwrap();
            for t in turns {
                writeln!(stdin, "{t}").unwrap();
            }
            writeln!(stdin, "exit").unwrap();
        }
        let out = child.wait_with_output().unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
        stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    };
    let [opening, answers] = gridfm_core::assistant::dialogue::user_turns();
    let lines = talk(&[opening]);
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["state"], "gathering");
    let rest: Vec<&str> = answers.lines().collect();
    let lines = talk(&rest);
    assert_eq!(lines.len(), rest.len());
    assert_eq!(lines.last().unwrap()["state"], "explained");
}
