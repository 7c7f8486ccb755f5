//! The HTTP provider against a scripted local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use treesynth::gateway::openai::{OpenAiConfig, OpenAiProvider};
use treesynth::gateway::{Gateway, GatewayError, ProviderRequest, SamplingParams};

struct Captured {
    path: String,
    headers: Vec<(String, String)>,
    body: Value,
}

/// Serves one scripted (status, extra headers, body) reply per connection.
fn serve(replies: Vec<(u16, Vec<(&'static str, String)>, String)>) -> (String, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, headers, body) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            log.lock().unwrap().push(handle(stream, status, &headers, &body));
        }
    });
    (format!("http://{addr}/v1"), seen)
}

fn handle(mut stream: TcpStream, status: u16, headers: &[(&str, String)], body: &str) -> Captured {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    let path = line.split_whitespace().nth(1).unwrap_or_default().to_string();
    let mut request_headers = Vec::new();
    let mut length = 0;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).unwrap();
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            let (k, v) = (k.trim().to_ascii_lowercase(), v.trim().to_string());
            if k == "content-length" {
                length = v.parse().unwrap();
            }
            request_headers.push((k, v));
        }
    }
    let mut buf = vec![0; length];
    reader.read_exact(&mut buf).unwrap();
    let mut response = format!("HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n", body.len());
    for (k, v) in headers {
        response.push_str(&format!("{k}: {v}\r\n"));
    }
    response.push_str("\r\n");
    response.push_str(body);
    stream.write_all(response.as_bytes()).unwrap();
    Captured { path, headers: request_headers, body: serde_json::from_slice(&buf).unwrap_or(Value::Null) }
}

fn provider(endpoint: String) -> Arc<OpenAiProvider> {
    Arc::new(
        OpenAiProvider::new(OpenAiConfig {
            endpoint,
            model: "test-model".into(),
            embedding_model: "test-embed".into(),
            api_key: Some("sk-test".into()),
            timeout: Duration::from_secs(5),
        })
        .unwrap(),
    )
}

fn chat(content: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": content}}], "usage": {"prompt_tokens": 5, "completion_tokens": 2}}).to_string()
}

#[test]
fn rate_limit_is_retried_with_the_same_key_and_retry_after_floor() {
    let (endpoint, seen) = serve(vec![
        (429, vec![("Retry-After", "2".into())], "{}".into()),
        (200, vec![], chat("hello")),
    ]);
    let delays = Arc::new(Mutex::new(Vec::new()));
    let record = Arc::clone(&delays);
    let gw = Gateway::new(provider(endpoint), 3, 2).with_sleeper(Arc::new(move |d| record.lock().unwrap().push(d)));
    let req = ProviderRequest::generate("say hi", SamplingParams { temperature: 0.3, max_tokens: 16 });
    let reply = gw.generate(&req).unwrap();
    assert_eq!(reply.as_text(), Some("hello"));
    assert_eq!(reply.attempts, 2);
    assert_eq!(gw.usage().prompt_tokens, 5);
    assert!(delays.lock().unwrap()[0] >= Duration::from_secs(2));

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[1].path, "/v1/chat/completions");
    let key = |c: &Captured| c.headers.iter().find(|(k, _)| k == "idempotency-key").map(|(_, v)| v.clone());
    assert_eq!(key(&seen[0]), key(&seen[1]));
    assert!(seen[1].headers.iter().any(|(k, v)| k == "authorization" && v == "Bearer sk-test"));
    assert_eq!(seen[1].body["model"], "test-model");
    assert_eq!(seen[1].body["temperature"], json!(0.3));
    assert_eq!(seen[1].body["messages"][0]["content"], "say hi");
}

#[test]
fn client_errors_are_not_retried() {
    let (endpoint, seen) = serve(vec![(400, vec![], r#"{"error":"bad"}"#.into())]);
    let gw = Gateway::new(provider(endpoint), 3, 1).with_sleeper(Arc::new(|_| {}));
    let req = ProviderRequest::generate("x", SamplingParams::default());
    match gw.generate(&req) {
        Err(GatewayError::ProviderError { status: Some(400), .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn server_errors_exhaust_the_retry_budget() {
    let replies = (0..3).map(|_| (503, vec![], "{}".to_string())).collect();
    let (endpoint, seen) = serve(replies);
    let gw = Gateway::new(provider(endpoint), 2, 1).with_sleeper(Arc::new(|_| {}));
    let req = ProviderRequest::generate("x", SamplingParams::default());
    assert!(matches!(gw.generate(&req), Err(GatewayError::ProviderError { status: Some(503), .. })));
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn embeddings_round_trip() {
    let body = json!({"data": [
        {"index": 1, "embedding": [0.0, 1.0]},
        {"index": 0, "embedding": [1.0, 0.0]}
    ]})
    .to_string();
    let (endpoint, seen) = serve(vec![(200, vec![], body)]);
    let gw = Gateway::new(provider(endpoint), 0, 1);
    let vectors = gw.embed(&["first".into(), "second".into()]).unwrap();
    assert_eq!(vectors, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/embeddings");
    assert_eq!(seen[0].body, json!({"model": "test-embed", "input": ["first", "second"]}));
}

#[test]
fn unreachable_endpoint_is_a_transport_failure() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let gw = Gateway::new(provider(format!("http://{addr}/v1")), 1, 1).with_sleeper(Arc::new(|_| {}));
    let req = ProviderRequest::generate("x", SamplingParams::default());
    assert!(gw.generate(&req).is_err());
    assert_eq!(gw.usage().attempts, 2);
}
