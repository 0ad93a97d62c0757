use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use hopdebate_core::gateway::{
    ChatBackend, ChatMessage, CompletionRequest, Gateway, HttpBackend, HttpConfig, LlmError,
    RetryPolicy,
};
use hopdebate_core::model::TokenUsage;

struct Reply {
    status: u16,
    headers: Vec<(&'static str, String)>,
    body: String,
}

fn ok(content: &str) -> Reply {
    Reply {
        status: 200,
        headers: vec![],
        body: format!(
            r#"{{"choices":[{{"message":{{"role":"assistant","content":"{content}"}}}}],"usage":{{"prompt_tokens":7,"completion_tokens":2}}}}"#
        ),
    }
}

fn status(code: u16, headers: Vec<(&'static str, String)>) -> Reply {
    Reply {
        status: code,
        headers,
        body: r#"{"error":"nope"}"#.into(),
    }
}

type Seen = Arc<Mutex<Vec<(String, String)>>>;

/// Serves `replies` in order, one per connection, and records each request
/// as (request line + headers, body).
fn serve(replies: Vec<Reply>) -> (String, Seen) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for reply in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
                head.push_str(&line);
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push((head, String::from_utf8_lossy(&body).into_owned()));
            let mut out = format!(
                "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n",
                reply.status,
                reply.body.len()
            );
            for (k, v) in &reply.headers {
                out.push_str(&format!("{k}: {v}\r\n"));
            }
            out.push_str("\r\n");
            out.push_str(&reply.body);
            let mut stream = stream;
            stream.write_all(out.as_bytes()).unwrap();
            stream.flush().unwrap();
        }
    });
    (format!("http://{addr}"), seen)
}

fn request() -> CompletionRequest {
    CompletionRequest::new("classifier", vec![ChatMessage::user("hi")], 0.0)
}

fn config(base: &str, retry: RetryPolicy) -> HttpConfig {
    let mut cfg = HttpConfig::new(base, "test-model");
    cfg.api_key = Some("secret".into());
    cfg.timeout_secs = 10;
    cfg.retry = retry;
    cfg
}

#[test]
fn success_parses_content_and_usage() {
    let (base, seen) = serve(vec![ok("Paris")]);
    let gw = Gateway::new(Arc::new(HttpBackend::new(config(&base, RetryPolicy::default()))));
    let resp = gw.complete(&request()).unwrap();
    assert_eq!(resp.content, "Paris");
    assert_eq!(resp.usage, TokenUsage::new(7, 2));
    assert_eq!(gw.ledger().total(), TokenUsage::new(7, 2));
    let seen = seen.lock().unwrap();
    let (head, body) = &seen[0];
    assert!(head.starts_with("POST /v1/chat/completions"));
    assert!(head.to_ascii_lowercase().contains("authorization: bearer secret"));
    let v: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(v["model"], "test-model");
    assert_eq!(v["messages"][0]["role"], "user");
    assert_eq!(v["temperature"], 0.0);
}

#[test]
fn rate_limit_honours_retry_after_then_succeeds() {
    let (base, seen) = serve(vec![
        status(429, vec![("Retry-After", "1".into())]),
        ok("after wait"),
    ]);
    let retry = RetryPolicy {
        max_attempts: 3,
        base_delay_ms: 1,
        max_delay_ms: 5,
    };
    let backend = HttpBackend::new(config(&base, retry));
    let start = Instant::now();
    let raw = backend.send(&request()).unwrap();
    assert_eq!(raw.content, "after wait");
    assert!(start.elapsed() >= Duration::from_millis(950), "{:?}", start.elapsed());
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn server_errors_are_retried_up_to_the_limit() {
    let (base, seen) = serve(vec![
        status(503, vec![]),
        status(500, vec![]),
        status(502, vec![]),
        ok("unused"),
    ]);
    let retry = RetryPolicy {
        max_attempts: 3,
        base_delay_ms: 1,
        max_delay_ms: 2,
    };
    let err = HttpBackend::new(config(&base, retry)).send(&request()).unwrap_err();
    assert!(matches!(err, LlmError::Status { status: 502, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn retries_disabled_sends_exactly_once() {
    let (base, seen) = serve(vec![status(429, vec![]), ok("unused")]);
    let err = HttpBackend::new(config(&base, RetryPolicy::disabled()))
        .send(&request())
        .unwrap_err();
    assert_eq!(err, LlmError::RateLimited { attempts: 1 });
    thread::sleep(Duration::from_millis(50));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn client_errors_are_not_retried() {
    let (base, seen) = serve(vec![status(401, vec![]), ok("unused")]);
    let err = HttpBackend::new(config(&base, RetryPolicy::default()))
        .send(&request())
        .unwrap_err();
    assert!(matches!(err, LlmError::Status { status: 401, .. }));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_body_is_reported() {
    let (base, _) = serve(vec![Reply {
        status: 200,
        headers: vec![],
        body: "{}".into(),
    }]);
    let err = HttpBackend::new(config(&base, RetryPolicy::disabled()))
        .send(&request())
        .unwrap_err();
    assert!(matches!(err, LlmError::MalformedResponse(_)));
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = HttpBackend::new(config(&format!("http://127.0.0.1:{port}"), RetryPolicy::disabled()))
        .send(&request())
        .unwrap_err();
    assert!(matches!(err, LlmError::Transport(_)), "{err:?}");
}
