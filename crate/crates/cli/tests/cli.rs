use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const SMALL: &str = r#"
seed = 3
out_dir = "runs"
[synth]
dir = "corpus"
[synth.corpus]
n_videos = 24
n_courses = 6
learners_per_course = 150
coded_per_video = 20
[evaluate]
signals = ["PausedAt", "RewoundTo"]
ks = [10]
seeds = [0, 1]
[tcav]
features = ["visual_breakpoint", "formula"]
layers = ["frames_sparse"]
repetitions = 5
[model]
max_epochs = 15
"#;

fn vidpeak(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidpeak"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = vidpeak(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn run_dir(dir: &Path) -> PathBuf {
    let runs: Vec<_> = std::fs::read_dir(dir.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1, "{runs:?}");
    runs.into_iter().next().unwrap()
}

fn digests(dir: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), hex::encode(Sha256::digest(std::fs::read(&p).unwrap())));
            }
        }
    }
    out
}

const CHAIN: [&str; 7] = ["ingest", "signals", "train", "evaluate", "tcav", "agreement", "report"];

#[test]
fn full_chain_exits_zero_and_leaves_inputs_untouched() {
    let dir = setup(SMALL);
    let p = dir.path();
    ok(p, &["--config", "run.toml", "synth"]);
    let before = digests(&p.join("corpus"));
    for stage in CHAIN {
        ok(p, &["--config", "run.toml", stage]);
    }
    assert_eq!(digests(&p.join("corpus")), before);

    let run = run_dir(p);
    let hash = run.file_name().unwrap().to_str().unwrap().to_string();
    assert_eq!(hash.len(), 16);
    for name in [
        "synth.json",
        "ingest.json",
        "signals.json",
        "associations.json",
        "train.json",
        "metrics.json",
        "tcav.json",
        "agreement.json",
        "report.json",
    ] {
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join(name)).unwrap()).unwrap();
        assert_eq!(v["config_hash"], hash.as_str(), "{name}");
    }
    for name in ["events.jsonl", "videos.jsonl", "signals.jsonl", "train_log.jsonl"] {
        let text = std::fs::read_to_string(run.join(name)).unwrap();
        let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(header["config_hash"], hash.as_str(), "{name}");
    }
    for name in ["metrics.csv", "tcav.csv", "report_metrics.csv", "report_tcav.csv"] {
        let text = std::fs::read_to_string(run.join(name)).unwrap();
        assert!(text.lines().skip(1).all(|l| l.starts_with(&hash)), "{name}");
    }

    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["metrics"].as_array().unwrap().len(), 2);
    assert_eq!(report["tcav"].as_array().unwrap().len(), 2);
    assert!(!report["associations"]["tests"].as_array().unwrap().is_empty());
    assert!(report["agreement"]["human_vs_human"].as_array().unwrap().len() == 15);
}

#[test]
fn stages_are_idempotent() {
    let dir = setup(SMALL);
    let p = dir.path();
    ok(p, &["--config", "run.toml", "synth"]);
    for stage in ["ingest", "signals", "train"] {
        ok(p, &["--config", "run.toml", stage]);
    }
    let first = digests(&run_dir(p));
    for stage in ["ingest", "signals", "train"] {
        ok(p, &["--config", "run.toml", stage]);
    }
    assert_eq!(digests(&run_dir(p)), first);
}

#[test]
fn train_without_manifest_exits_2_naming_the_path() {
    let dir = setup(SMALL);
    let p = dir.path();
    let out = vidpeak(p, &["--config", "run.toml", "--manifest", "nowhere/manifest.json", "train"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nowhere/manifest.json"), "{}", stderr(&out));
}

#[test]
fn downstream_stage_without_upstream_artifact_exits_2() {
    let dir = setup(SMALL);
    let p = dir.path();
    ok(p, &["--config", "run.toml", "synth"]);
    let out = vidpeak(p, &["--config", "run.toml", "signals"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("vidpeak ingest"), "{}", stderr(&out));
}

#[test]
fn report_refuses_mismatched_hashes() {
    let dir = setup(SMALL);
    let p = dir.path();
    ok(p, &["--config", "run.toml", "synth"]);
    for stage in ["ingest", "signals", "train", "evaluate", "tcav"] {
        ok(p, &["--config", "run.toml", stage]);
    }
    let tcav = run_dir(p).join("tcav.json");
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&tcav).unwrap()).unwrap();
    v["config_hash"] = "0000000000000000".into();
    std::fs::write(&tcav, serde_json::to_vec(&v).unwrap()).unwrap();
    let out = vidpeak(p, &["--config", "run.toml", "report"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("refusing to merge"), "{}", stderr(&out));
    assert!(!run_dir(p).join("report.json").exists());
}

#[test]
fn tcav_rejects_model_from_another_config() {
    let dir = setup(SMALL);
    let p = dir.path();
    ok(p, &["--config", "run.toml", "synth"]);
    for stage in ["ingest", "signals", "train"] {
        ok(p, &["--config", "run.toml", stage]);
    }
    let run = run_dir(p);
    let other = tempfile::tempdir().unwrap();
    std::fs::write(other.path().join("run.toml"), SMALL.replace("seed = 3", "seed = 4")).unwrap();
    for stage in ["synth", "ingest", "signals", "train"] {
        ok(other.path(), &["--config", "run.toml", stage]);
    }
    std::fs::copy(run_dir(other.path()).join("model.vpk"), run.join("model.vpk")).unwrap();
    let out = vidpeak(p, &["--config", "run.toml", "tcav"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn flags_override_config_keys() {
    let dir = setup(SMALL);
    let p = dir.path();
    let out = vidpeak(p, &["--config", "run.toml", "--ks", "10,7", "ingest"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains('7'));

    ok(p, &["--config", "run.toml", "synth"]);
    ok(p, &["--config", "run.toml", "--seed", "9", "--out-dir", "other", "--synth-dir", "corpus", "ingest"]);
    ok(p, &["--config", "run.toml", "ingest"]);
    let a: Vec<_> = std::fs::read_dir(p.join("runs")).unwrap().collect();
    let b: Vec<_> = std::fs::read_dir(p.join("other")).unwrap().collect();
    assert_eq!((a.len(), b.len()), (1, 1));
    assert_ne!(a[0].as_ref().unwrap().file_name(), b[0].as_ref().unwrap().file_name());
}

#[test]
fn invalid_config_exits_2() {
    let dir = setup("seed = 1\nunknown_key = 3\n");
    let out = vidpeak(dir.path(), &["--config", "run.toml", "ingest"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("unknown_key"), "{}", stderr(&out));

    std::fs::write(dir.path().join("nested.toml"), "[model]\nepochs = 3\n").unwrap();
    let out = vidpeak(dir.path(), &["--config", "nested.toml", "ingest"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("epochs"), "{}", stderr(&out));

    let out = vidpeak(dir.path(), &["--config", "absent.toml", "ingest"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn corrupt_event_lines_are_dropped_not_fatal() {
    let dir = setup(SMALL);
    let p = dir.path();
    ok(p, &["--config", "run.toml", "synth"]);
    let events = p.join("corpus/events.jsonl");
    let mut text = std::fs::read_to_string(&events).unwrap();
    text.push_str("{not json\n");
    std::fs::write(&events, text).unwrap();
    ok(p, &["--config", "run.toml", "ingest"]);
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run_dir(p).join("ingest.json")).unwrap()).unwrap();
    let report = &summary["report"];
    assert_eq!(report["lines"].as_u64().unwrap() - report["accepted"].as_u64().unwrap(), 1);
}

fn one_request(dir: &Path) {
    let frames: Vec<_> = (-10..=10)
        .map(|o| serde_json::json!({"offset": o, "image": {"source": "url", "url": format!("https://f.example/{o}.jpg")}}))
        .collect();
    let req = serde_json::json!({
        "video_id": "v0000", "t": 60,
        "transcript": "the integral of a constant",
        "slide_text": "Integrals",
        "frames": frames,
        "features": ["formula", "showing"],
    });
    std::fs::write(dir.join("requests.jsonl"), format!("{req}\n")).unwrap();
}

#[test]
fn code_without_token_exits_2() {
    let dir = setup("[coder.endpoint]\nauth_env = \"VIDPEAK_TEST_TOKEN_THAT_IS_UNSET\"\n");
    let p = dir.path();
    one_request(p);
    let out = vidpeak(p, &["--config", "run.toml", "--coding-requests", "requests.jsonl", "code"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("VIDPEAK_TEST_TOKEN_THAT_IS_UNSET"), "{}", stderr(&out));
}

fn serve_once(body: String) -> (String, std::thread::JoinHandle<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream);
        let mut headers = String::new();
        let mut len = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if line == "\r\n" || line.is_empty() {
                break;
            }
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
            headers.push_str(&line);
        }
        let mut req = vec![0; len];
        reader.read_exact(&mut req).unwrap();
        let mut stream = reader.into_inner();
        write!(
            stream,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )
        .unwrap();
        headers
    });
    (format!("http://{addr}/v1"), handle)
}

#[test]
fn code_writes_machine_ratings_and_audit() {
    let content = r#"{"formula": 1, "showing": 0}"#;
    let body = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string();
    let (url, server) = serve_once(body);
    let dir = setup(&format!("[coder.endpoint]\nbase_url = \"{url}\"\nauth_env = \"VIDPEAK_CLI_TEST_TOKEN\"\n"));
    let p = dir.path();
    one_request(p);
    let out = Command::new(env!("CARGO_BIN_EXE_vidpeak"))
        .args(["--config", "run.toml", "--coding-requests", "requests.jsonl", "code"])
        .current_dir(p)
        .env("VIDPEAK_CLI_TEST_TOKEN", "secret-123")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let headers = server.join().unwrap();
    assert!(headers.to_ascii_lowercase().contains("authorization: bearer secret-123"));

    let run = run_dir(p);
    let codings = std::fs::read_to_string(run.join("machine_codings.jsonl")).unwrap();
    let lines: Vec<&str> = codings.lines().collect();
    assert_eq!(lines.len(), 2);
    let rec: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
    assert_eq!(rec, serde_json::json!({"video_id": "v0000", "t": 60, "values": {"formula": 1, "showing": 0}}));
    // A subset coding has no full-rubric record.
    let ratings = std::fs::read_to_string(run.join("machine_ratings.jsonl")).unwrap();
    assert_eq!(ratings.lines().count(), 1);
    let audit = std::fs::read_to_string(run.join("coder_audit.jsonl")).unwrap();
    assert!(audit.contains("formula"));
    assert!(!audit.contains("secret-123"));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("code.json")).unwrap()).unwrap();
    assert_eq!((summary["n_coded"].as_u64(), summary["n_full_rubric"].as_u64()), (Some(1), Some(0)));
}
