use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use exameval::backend::{complete, BackendError, HttpBackend, HttpConfig, ModelBackend, SamplingParams};
use exameval::prompts::{MessageSequence, Role};
use exameval::transcript::{CallContext, Stage};

#[derive(Debug, Clone)]
struct Seen {
    headers: Vec<(String, String)>,
    body: serde_json::Value,
}

impl Seen {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }
}

/// Serves one scripted `(status, body)` per connection, then stops.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            loop {
                line.clear();
                reader.read_line(&mut line).unwrap();
                let trimmed = line.trim_end();
                if trimmed.is_empty() {
                    break;
                }
                let (k, v) = trimmed.split_once(':').unwrap();
                headers.push((k.trim().to_string(), v.trim().to_string()));
            }
            let len: usize = headers
                .iter()
                .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
                .map(|(_, v)| v.parse().unwrap())
                .unwrap_or(0);
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen { headers, body: serde_json::from_slice(&buf).unwrap() });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen, handle)
}

fn ok(content: &str, finish: &str) -> (u16, String) {
    (200, serde_json::json!({"choices":[{"message":{"role":"assistant","content":content},"finish_reason":finish}]}).to_string())
}

fn backend(url: &str, max_attempts: u32) -> HttpBackend {
    let mut config = HttpConfig::new(url, "test-model");
    config.max_attempts = max_attempts;
    config.base_delay_ms = 1;
    config.api_key_env = Some("EXAMEVAL_TEST_HTTP_KEY".into());
    HttpBackend::new(config).unwrap()
}

fn messages() -> MessageSequence {
    let mut m = MessageSequence::default();
    m.push(Role::System, "あなたは受験者です。");
    m.push(Role::User, "問題: …\n解答:");
    m
}

fn ctx() -> CallContext {
    CallContext::new(1, "Q1", Stage::Answer)
}

#[test]
fn retries_rate_limits_and_server_errors_with_a_stable_idempotency_key() {
    let (url, seen, handle) = serve(vec![(429, "{}".into()), (503, "busy".into()), ok("112", "stop")]);
    let params = SamplingParams { seed: Some(9), ..SamplingParams::default() };
    let record = complete(&backend(&url, 3), &ctx(), &messages(), &params).unwrap();
    handle.join().unwrap();
    assert_eq!(record.response, "112");
    assert_eq!(record.attempt_count, 3);
    assert!(!record.truncated);
    assert_eq!(record.backend, "http:test-model");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    let keys: Vec<&str> = seen.iter().map(|s| s.header("idempotency-key").unwrap()).collect();
    assert!(keys.iter().all(|k| *k == record.digest));
    let body = &seen[0].body;
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["seed"], 9);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "問題: …\n解答:");
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen, handle) = serve(vec![(400, "bad request".into())]);
    let err = complete(&backend(&url, 3), &ctx(), &messages(), &SamplingParams::default()).unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, BackendError::Status { status: 400, .. }), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn gives_up_after_max_attempts() {
    let (url, seen, handle) = serve(vec![(500, "a".into()), (502, "b".into())]);
    let err = complete(&backend(&url, 2), &ctx(), &messages(), &SamplingParams::default()).unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, BackendError::Status { status: 502, .. }), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn flags_length_truncation() {
    let (url, _, handle) = serve(vec![ok("11", "length")]);
    let record = complete(&backend(&url, 1), &ctx(), &messages(), &SamplingParams::default()).unwrap();
    handle.join().unwrap();
    assert!(record.truncated);
    assert_eq!(record.response, "11");
}

#[test]
fn folds_system_role_when_unsupported() {
    let (url, seen, handle) = serve(vec![ok("1", "stop")]);
    let mut config = HttpConfig::new(&url, "plain");
    config.supports_system_role = false;
    config.api_key_env = None;
    let b = HttpBackend::new(config).unwrap();
    assert!(!b.supports_system_role());
    complete(&b, &ctx(), &messages(), &SamplingParams::default()).unwrap();
    handle.join().unwrap();
    let seen = seen.lock().unwrap();
    let msgs = seen[0].body["messages"].as_array().unwrap();
    assert!(msgs.iter().all(|m| m["role"] != "system"));
    assert!(msgs[0]["content"].as_str().unwrap().starts_with("あなたは受験者です。"));
    assert!(seen[0].header("authorization").is_none());
}

#[test]
fn connection_refused_is_a_transport_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    drop(listener);
    let err = complete(&backend(&url, 2), &ctx(), &messages(), &SamplingParams::default()).unwrap_err();
    assert!(matches!(err, BackendError::Transport { attempts: 2, .. }), "{err}");
}

#[test]
fn empty_requests_are_rejected_before_sending() {
    let b = backend("http://127.0.0.1:9/v1", 1);
    let err = complete(&b, &ctx(), &MessageSequence::default(), &SamplingParams::default()).unwrap_err();
    assert!(matches!(err, BackendError::EmptyRequest));
}
