use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use medtok::corpus::gen_synthetic;
use medtok::textenc::{EmbeddingClient, RetryPolicy, TextEncError};
use serde_json::{json, Value};

/// Serves `replies` (status, body) to consecutive connections and records
/// every request's path and JSON body.
struct MockServer {
    url: String,
    requests: Arc<Mutex<Vec<(String, Value)>>>,
}

impl MockServer {
    fn start(replies: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        thread::spawn(move || {
            for (status, body) in replies {
                let Ok((stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let path = request_line.split(' ').nth(1).unwrap_or("").to_string();
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            len = v.trim().parse().unwrap();
                        }
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push((path, serde_json::from_slice(&buf).unwrap_or(Value::Null)));
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        Self { url, requests }
    }

    fn requests(&self) -> Vec<(String, Value)> {
        self.requests.lock().unwrap().clone()
    }
}

fn client(url: &str) -> EmbeddingClient {
    EmbeddingClient::new(url, Duration::from_secs(5)).with_retry(RetryPolicy {
        retries: 2,
        base_delay: Duration::from_millis(5),
    })
}

fn ok_body(vectors: Value) -> (u16, String) {
    (200, json!({ "vectors": vectors }).to_string())
}

#[test]
fn one_text_one_vector() {
    let server = MockServer::start(vec![ok_body(json!([[0.5, -1.0, 2.0]]))]);
    let mut c = client(&server.url);
    let out = c.fetch(&["fever".to_string()]).unwrap();
    assert_eq!(out.vectors, vec![vec![0.5, -1.0, 2.0]]);
    assert!(out.states.is_empty());
    assert_eq!(c.dim(), Some(3));
    let reqs = server.requests();
    assert_eq!(reqs.len(), 1);
    assert_eq!(reqs[0].0, "/embed");
    assert_eq!(reqs[0].1, json!({"texts": ["fever"]}));
}

#[test]
fn empty_input_needs_no_service() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let mut c = client(&format!("http://{port}"));
    assert!(c.fetch(&[]).unwrap().vectors.is_empty());
}

#[test]
fn transient_failures_are_retried() {
    let server = MockServer::start(vec![
        (503, "{}".into()),
        (500, "{}".into()),
        ok_body(json!([[1.0, 2.0]])),
    ]);
    let out = client(&server.url).fetch(&["a".to_string()]).unwrap();
    assert_eq!(out.vectors.len(), 1);
    assert_eq!(server.requests().len(), 3);
}

#[test]
fn gives_up_after_two_retries() {
    let server = MockServer::start(vec![(503, "{}".into()); 4]);
    let err = client(&server.url).fetch(&["a".to_string()]).unwrap_err();
    assert!(matches!(err, TextEncError::Service(_)), "{err}");
    assert_eq!(server.requests().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = MockServer::start(vec![(400, "{}".into()), ok_body(json!([[1.0]]))]);
    let err = client(&server.url).fetch(&["a".to_string()]).unwrap_err();
    assert!(matches!(err, TextEncError::Service(_)), "{err}");
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn dimension_change_is_a_contract_error() {
    let server = MockServer::start(vec![ok_body(json!([[1.0, 2.0]])), ok_body(json!([[1.0, 2.0, 3.0]]))]);
    let mut c = client(&server.url);
    c.fetch(&["a".to_string()]).unwrap();
    let err = c.fetch(&["b".to_string()]).unwrap_err();
    assert!(matches!(err, TextEncError::Contract(_)), "{err}");
}

#[test]
fn wrong_count_is_a_contract_error() {
    let server = MockServer::start(vec![ok_body(json!([[1.0]]))]);
    let err = client(&server.url).fetch(&["a".to_string(), "b".to_string()]).unwrap_err();
    assert!(matches!(err, TextEncError::Contract(_)), "{err}");
}

#[test]
fn embeds_a_registry_with_states() {
    let registry = gen_synthetic(2, 2, 0).unwrap().registry;
    let ids: Vec<String> = registry.code_ids().map(str::to_string).collect();
    let reply = |n: usize, base: f32| {
        let vectors: Vec<Vec<f32>> = (0..n).map(|i| vec![base + i as f32, 0.0]).collect();
        let states: Vec<Vec<Vec<f32>>> = (0..n).map(|i| vec![vec![base + i as f32, 1.0]; 2]).collect();
        (200, json!({"vectors": vectors, "states": states}).to_string())
    };
    let server = MockServer::start(vec![reply(3, 0.0), reply(1, 10.0)]);
    let set = client(&server.url).embed_registry(&registry, 3).unwrap();
    assert_eq!((set.len(), set.dim()), (4, 2));
    assert_eq!(set.pooled(&ids[3]).unwrap(), &[10.0, 0.0]);
    assert_eq!(set.states(&ids[1]).unwrap().len, 2);
    let reqs = server.requests();
    assert_eq!(reqs.len(), 2);
    let sent: Vec<&str> = reqs[0].1["texts"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(sent, registry.iter().take(3).map(|c| c.description.as_str()).collect::<Vec<_>>());
}
