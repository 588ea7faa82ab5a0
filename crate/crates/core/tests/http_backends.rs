//! HTTP backend tests against a minimal in-process server.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use mirage_core::encoder::{EncoderBackend, HttpEncoderBackend};
use mirage_core::gateway::{
    ChatPrompt, Gateway, GatewayConfig, GatewayError, HttpChatBackend, RecordingSleeper,
    RetryConfig, Sleeper,
};

fn read_request(stream: &mut TcpStream) -> String {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 1024];
    loop {
        let n = stream.read(&mut chunk).unwrap();
        buf.extend_from_slice(&chunk[..n]);
        if n == 0 || buf.windows(4).any(|w| w == b"\r\n\r\n") {
            break;
        }
    }
    let header_end = buf.windows(4).position(|w| w == b"\r\n\r\n").unwrap() + 4;
    let headers = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let content_length: usize = headers
        .lines()
        .find_map(|l| {
            let (name, value) = l.split_once(':')?;
            name.eq_ignore_ascii_case("content-length")
                .then(|| value.trim().parse().ok())?
        })
        .unwrap_or(0);
    let mut body = buf[header_end..].to_vec();
    while body.len() < content_length {
        let n = stream.read(&mut chunk).unwrap();
        if n == 0 {
            break;
        }
        body.extend_from_slice(&chunk[..n]);
    }
    String::from_utf8_lossy(&body).to_string()
}

/// Serve the listed (status, body) responses in order, one connection
/// each, then stop. Returns the request bodies seen.
fn spawn_server(responses: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = thread::spawn(move || {
        let mut bodies = Vec::new();
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            bodies.push(read_request(&mut stream));
            let reason = match status {
                200 => "OK",
                400 => "Bad Request",
                429 => "Too Many Requests",
                500 => "Internal Server Error",
                503 => "Service Unavailable",
                _ => "Status",
            };
            let response = format!(
                "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
        }
        bodies
    });
    (format!("http://{addr}"), handle)
}

fn chat_body(content: &str, prompt_tokens: u64, completion_tokens: u64) -> String {
    format!(
        r#"{{"choices":[{{"message":{{"role":"assistant","content":"{content}"}}}}],"usage":{{"prompt_tokens":{prompt_tokens},"completion_tokens":{completion_tokens}}}}}"#
    )
}

fn http_gateway(base_url: &str, retry: RetryConfig) -> (Gateway, Arc<RecordingSleeper>) {
    let sleeper = Arc::new(RecordingSleeper::default());
    struct SleeperRef(Arc<RecordingSleeper>);
    impl Sleeper for SleeperRef {
        fn sleep(&self, d: Duration) {
            self.0.sleep(d);
        }
    }
    let backend =
        HttpChatBackend::new(base_url, "test-model", Some("key".into()), Duration::from_secs(2))
            .unwrap();
    let gateway = Gateway::with_sleeper(
        Box::new(backend),
        GatewayConfig {
            model_id: "test-model".into(),
            retry,
            ..GatewayConfig::default()
        },
        Box::new(SleeperRef(sleeper.clone())),
    )
    .unwrap();
    (gateway, sleeper)
}

#[test]
fn chat_success_records_usage() {
    let (url, server) = spawn_server(vec![(200, chat_body("a detailed scene", 12, 34))]);
    let (gateway, _) = http_gateway(&url, RetryConfig::default());
    let result = gateway
        .complete(&ChatPrompt::user("describe the scene"))
        .unwrap();
    assert_eq!(result.text, "a detailed scene");
    assert_eq!(result.prompt_tokens, 12);
    assert_eq!(result.completion_tokens, 34);
    let ledger = gateway.ledger();
    assert_eq!(ledger.calls, 1);
    assert_eq!(ledger.prompt_tokens, 12);

    let bodies = server.join().unwrap();
    let request: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(request["model"], "test-model");
    assert_eq!(request["messages"][0]["role"], "user");
    assert_eq!(request["messages"][0]["content"], "describe the scene");
}

#[test]
fn server_error_retried_then_succeeds() {
    let (url, server) = spawn_server(vec![
        (503, r#"{"error":"busy"}"#.to_string()),
        (200, chat_body("after retry", 3, 4)),
    ]);
    let (gateway, sleeper) = http_gateway(&url, RetryConfig::default());
    let result = gateway.complete(&ChatPrompt::user("try twice")).unwrap();
    assert_eq!(result.text, "after retry");
    assert_eq!(sleeper.delays.lock().unwrap().len(), 1);
    assert_eq!(gateway.ledger().calls, 1);
    assert_eq!(server.join().unwrap().len(), 2);
}

#[test]
fn client_error_is_not_retried() {
    let (url, server) = spawn_server(vec![(400, r#"{"error":"bad"}"#.to_string())]);
    let (gateway, sleeper) = http_gateway(&url, RetryConfig::default());
    let err = gateway.complete(&ChatPrompt::user("nope")).unwrap_err();
    assert!(matches!(err, GatewayError::Status { status: 400, .. }));
    assert!(sleeper.delays.lock().unwrap().is_empty());
    assert_eq!(gateway.ledger().calls, 0);
    server.join().unwrap();
}

#[test]
fn unreachable_endpoint_exhausts_retries() {
    // bind then drop to get a port that refuses connections
    let port = {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        listener.local_addr().unwrap().port()
    };
    let (gateway, sleeper) = http_gateway(
        &format!("http://127.0.0.1:{port}"),
        RetryConfig {
            max_attempts: 3,
            backoff_base_ms: 1,
            ..RetryConfig::default()
        },
    );
    let err = gateway.complete(&ChatPrompt::user("no one home")).unwrap_err();
    match err {
        GatewayError::Exhausted { attempts, last } => {
            assert_eq!(attempts, 3);
            assert!(matches!(*last, GatewayError::Transport { .. }));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(sleeper.delays.lock().unwrap().len(), 2);
    assert_eq!(gateway.ledger().calls, 0);
}

#[test]
fn missing_content_is_an_error() {
    let (url, server) = spawn_server(vec![(
        200,
        r#"{"choices":[{"message":{"role":"assistant"}}]}"#.to_string(),
    )]);
    let (gateway, _) = http_gateway(&url, RetryConfig::default());
    let err = gateway.complete(&ChatPrompt::user("hello")).unwrap_err();
    assert!(matches!(err, GatewayError::MissingText));
    server.join().unwrap();
}

#[test]
fn embeddings_roundtrip_with_normalization() {
    let body = r#"{"data":[{"embedding":[3.0,4.0]},{"embedding":[0.0,5.0]}]}"#;
    let (url, server) = spawn_server(vec![(200, body.to_string())]);
    let backend = HttpEncoderBackend::new(
        &url,
        "embed-model",
        None,
        2,
        true,
        Duration::from_secs(2),
    )
    .unwrap();
    let rows = backend
        .embed_batch(&["first".to_string(), "second".to_string()])
        .unwrap();
    assert_eq!(rows.len(), 2);
    assert!((rows[0][0] - 0.6).abs() < 1e-6);
    assert!((rows[0][1] - 0.8).abs() < 1e-6);
    assert!((rows[1][1] - 1.0).abs() < 1e-6);
    let bodies = server.join().unwrap();
    let request: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(request["input"].as_array().unwrap().len(), 2);
}

#[test]
fn embeddings_count_mismatch_is_an_error() {
    let body = r#"{"data":[{"embedding":[1.0,0.0]}]}"#;
    let (url, server) = spawn_server(vec![(200, body.to_string())]);
    let backend =
        HttpEncoderBackend::new(&url, "embed-model", None, 2, false, Duration::from_secs(2))
            .unwrap();
    let err = backend
        .embed_batch(&["a".to_string(), "b".to_string()])
        .unwrap_err();
    assert!(err.to_string().contains("1 embeddings for 2 inputs"), "{err}");
    server.join().unwrap();
}
