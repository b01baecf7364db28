use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Arc, Mutex};
use std::thread;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn sample() -> PathBuf {
    root().join("data/sample/exam.jsonl")
}

fn exameval(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_exameval"));
    cmd.args(args).env_remove("EXAMEVAL_ENDPOINT").env_remove("EXAMEVAL_MODEL").env_remove("EXAMEVAL_API_KEY");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_exit_codes() {
    let ok = run(&mut exameval(&["validate", path(&sample())]));
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("175 / 175"));

    let dir = tempfile::tempdir().unwrap();
    let short = dir.path().join("short.jsonl");
    let text = std::fs::read_to_string(sample()).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.contains("\"R6-01\"")).collect();
    std::fs::write(&short, kept.join("\n")).unwrap();
    let flagged = run(&mut exameval(&["validate", path(&short), "--year", "R6"]));
    assert_eq!(flagged.status.code(), Some(1));

    let missing = run(&mut exameval(&["validate", "no-such-file.jsonl"]));
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let dataset = sample();
    let base = ["run", "--dataset", path(&dataset), "--test-years", "R6", "--out", path(&out)];
    let zero = run(exameval(&base).args(["--repeats", "0"]));
    assert_eq!(zero.status.code(), Some(2));
    assert!(!out.exists());
    let no_endpoint = run(exameval(&base).args(["--backend", "http", "--model", "m"]));
    assert_eq!(no_endpoint.status.code(), Some(2));
    let unknown = run(&mut exameval(&["run", "--frobnicate"]));
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn run_then_score_report_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&mut exameval(&[
        "run", "--dataset", path(&sample()), "--test-years", "R6", "--repeats", "2", "--out", path(&out),
    ]));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("175.0 (175/175)"));
    let entries: Vec<String> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(entries, ["run"], "nothing may be written outside --out");

    let score = run(&mut exameval(&[
        "score", "--dataset", path(&sample()), "--year", "R6", "--answers", path(&out.join("answers-r1.tsv")),
    ]));
    assert_eq!(score.status.code(), Some(0));
    assert!(stdout(&score).contains("total   175 (threshold 93) PASS"));

    let report = run(&mut exameval(&["report", path(&out), "--format", "markdown"]));
    assert!(stdout(&report).starts_with("| Model | Accuracy | Exam Scale (Avg/Min/Max) | Const. | Civ. | Crim. |"));

    let replay = run(&mut exameval(&["replay", path(&out)]));
    assert_eq!(replay.status.code(), Some(0), "{}", stdout(&replay));

    let again = run(&mut exameval(&[
        "run", "--dataset", path(&sample()), "--test-years", "R6", "--out", path(&out),
    ]));
    assert_eq!(again.status.code(), Some(2), "existing run directories are not overwritten");
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            "dataset = {:?}\ntest-years = [\"R6\"]\nstrategy = \"few-shot\"\nk = 2\nrepeats = 3\nverify = true\n",
            path(&sample())
        ),
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = run(&mut exameval(&["run", "--config", path(&config), "--repeats", "1", "--k", "4", "--out", path(&out)]));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let snapshot: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    let pipeline = &snapshot["config"]["pipeline"];
    assert_eq!(pipeline["repeats"], 1);
    assert_eq!(pipeline["strategy"]["kind"], "self_verify");
    assert_eq!(pipeline["strategy"]["inner"]["k"], 4);

    std::fs::write(&config, "repeats = 2\nbogus = 1\n").unwrap();
    let bad = run(&mut exameval(&["run", "--config", path(&config), "--out", path(&dir.path().join("x"))]));
    assert_eq!(bad.status.code(), Some(2));
}

/// Answers every chat request with "1" and records request heads.
fn chat_server() -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let heads = Arc::new(Mutex::new(Vec::new()));
    let log = heads.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(head);
            let reply = r#"{"choices":[{"message":{"role":"assistant","content":"1"},"finish_reason":"stop"}]}"#;
            let mut stream = stream;
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
        }
    });
    (url, heads)
}

#[test]
fn http_backend_from_environment_keeps_the_token_out_of_artifacts() {
    let (url, heads) = chat_server();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(exameval(&[
        "run", "--dataset", path(&sample()), "--test-years", "R6", "--repeats", "1", "--backend", "http",
        "--parallelism", "2", "--out", path(&out),
    ])
    .env("EXAMEVAL_ENDPOINT", &url)
    .env("EXAMEVAL_MODEL", "env-model")
    .env("EXAMEVAL_API_KEY", "sk-test-secret"));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let heads = heads.lock().unwrap();
    assert_eq!(heads.len(), 59);
    assert!(heads.iter().all(|h| h.contains("Bearer sk-test-secret")));
    for entry in std::fs::read_dir(&out).unwrap() {
        let text = std::fs::read_to_string(entry.unwrap().path()).unwrap();
        assert!(!text.contains("sk-test-secret"));
    }
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.starts_with("Model") && summary.contains("env-model"));
}

#[test]
fn bundled_runs_replay() {
    for entry in std::fs::read_dir(root().join("data/runs")).unwrap() {
        let dir = entry.unwrap().path();
        let o = run(exameval(&["replay", path(&dir)]).current_dir(root()));
        assert_eq!(o.status.code(), Some(0), "{}: {}", dir.display(), stdout(&o));
    }
}
