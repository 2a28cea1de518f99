//! Chat-completions and embeddings clients against a local stub server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use insight_rag::gateway::{BackendError, ChatMessage, Gateway, GatewayError, ModelHandle, Role};
use insight_rag::retrieval::{Embedder, HttpEmbedder};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    authorization: Option<String>,
    body: Value,
}

/// Status, extra headers and body of one scripted reply.
type Reply = (u16, Vec<(&'static str, String)>, String);

/// Replies to successive connections with the scripted `(status, headers, body)`.
struct Stub {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
    thread: Option<JoinHandle<()>>,
}

impl Stub {
    fn start(script: Vec<Reply>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&seen);
        let thread = std::thread::spawn(move || {
            for (status, headers, body) in script {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
                let mut length = 0;
                let mut authorization = None;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    let (name, value) = line.split_once(':').unwrap();
                    match name.to_ascii_lowercase().as_str() {
                        "content-length" => length = value.trim().parse().unwrap(),
                        "authorization" => authorization = Some(value.trim().to_string()),
                        _ => {}
                    }
                }
                let mut raw = vec![0; length];
                reader.read_exact(&mut raw).unwrap();
                log.lock().unwrap().push(Seen {
                    path,
                    authorization,
                    body: serde_json::from_slice(&raw).unwrap_or(Value::Null),
                });
                let mut stream = reader.into_inner();
                let mut head = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n",
                    body.len()
                );
                for (name, value) in headers {
                    head.push_str(&format!("{name}: {value}\r\n"));
                }
                head.push_str("\r\n");
                stream.write_all(head.as_bytes()).unwrap();
                stream.write_all(body.as_bytes()).unwrap();
            }
        });
        Self {
            url,
            seen,
            thread: Some(thread),
        }
    }

    fn finish(mut self) -> Vec<Seen> {
        self.thread.take().unwrap().join().unwrap();
        self.seen.lock().unwrap().clone()
    }
}

fn completion(text: &str) -> Reply {
    let body = json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 2},
    });
    (200, vec![], body.to_string())
}

fn handle(role: Role, url: &str, retry_limit: u32) -> ModelHandle {
    let mut handle = ModelHandle::new(role, url, "stub-model");
    handle.retry_limit = retry_limit;
    handle.backoff_ms = 1;
    handle
}

#[test]
fn chat_request_shape_and_think_stripping() {
    std::env::set_var("INSIGHT_RAG_WIRE_TEST_KEY", "sekret");
    let stub = Stub::start(vec![completion("<think>maybe Lyon</think>Paris")]);
    let mut h = handle(Role::Generator, &stub.url, 0);
    h.strip_think_blocks = true;
    h.api_key_env = "INSIGHT_RAG_WIRE_TEST_KEY".into();
    let gateway = Gateway::http(h).unwrap();
    let out = gateway.chat(&[ChatMessage::user("Where?")]).unwrap();
    assert_eq!(out.text, "Paris");
    assert_eq!((out.usage.prompt_tokens, out.usage.completion_tokens), (11, 2));

    let seen = stub.finish();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer sekret"));
    let body = &seen[0].body;
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["messages"], json!([{"role": "user", "content": "Where?"}]));
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["max_tokens"], 1024);
}

#[test]
fn miner_requests_carry_cap_and_sampling_temperature() {
    let stub = Stub::start(vec![completion("a"), completion("b"), completion("c")]);
    let gateway = Gateway::http(handle(Role::Miner, &stub.url, 0)).unwrap();
    assert_eq!(gateway.complete_insight("BERT is evaluated on", 1).unwrap().len(), 1);
    let texts: Vec<String> = gateway.complete_insight("BERT is evaluated on", 2).unwrap().into_iter().map(|o| o.text).collect();
    assert_eq!(texts, vec!["b", "c"]);
    let seen = stub.finish();
    assert!(seen.iter().all(|s| s.body["max_tokens"] == 100));
    assert_eq!(seen[0].body["temperature"], 0.0);
    assert_eq!(seen[1].body["temperature"], 0.7);
    assert_eq!(gateway.log().len(), 3);
}

#[test]
fn server_errors_are_retried_then_succeed() {
    let unavailable = (503, vec![], "busy".to_string());
    let limited = (429, vec![("Retry-After", "0".to_string())], "slow down".to_string());
    let stub = Stub::start(vec![unavailable, limited, completion("ok")]);
    let gateway = Gateway::http(handle(Role::Judge, &stub.url, 2)).unwrap();
    assert_eq!(gateway.ask("score?").unwrap().text, "ok");
    assert_eq!(stub.finish().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let stub = Stub::start(vec![(400, vec![], "bad request".to_string())]);
    let gateway = Gateway::http(handle(Role::Qgen, &stub.url, 3)).unwrap();
    let err = gateway.ask("q").unwrap_err();
    assert!(matches!(err, GatewayError::Rejected { error: BackendError::Status { status: 400, .. }, .. }));
    assert_eq!(stub.finish().len(), 1);
}

#[test]
fn endpoint_down_fails_after_retry_limit_plus_one_attempts() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let gateway = Gateway::http(handle(Role::Identifier, &format!("http://127.0.0.1:{port}/v1"), 2)).unwrap();
    match gateway.ask("q").unwrap_err() {
        GatewayError::Exhausted { attempts, last, .. } => {
            assert_eq!(attempts, 3);
            assert!(matches!(last, BackendError::Transport(_)));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn malformed_reply_is_rejected() {
    let stub = Stub::start(vec![(200, vec![], "{\"choices\": []}".to_string())]);
    let gateway = Gateway::http(handle(Role::Generator, &stub.url, 2)).unwrap();
    assert!(matches!(
        gateway.ask("q").unwrap_err(),
        GatewayError::Rejected { error: BackendError::Malformed(_), .. }
    ));
    stub.finish();
}

#[test]
fn embeddings_are_reordered_by_index() {
    let body = json!({"data": [
        {"index": 1, "embedding": [0.0, 1.0]},
        {"index": 0, "embedding": [1.0, 0.0]},
    ]});
    let stub = Stub::start(vec![(500, vec![], "oops".to_string()), (200, vec![], body.to_string())]);
    let embedder = HttpEmbedder::new(&stub.url, "embed-model", "INSIGHT_RAG_WIRE_UNSET", 1).unwrap();
    let vectors = embedder.embed_batch(&["first".to_string(), "second".to_string()]).unwrap();
    assert_eq!(vectors, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let seen = stub.finish();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[1].path, "/v1/embeddings");
    assert_eq!(seen[1].body, json!({"model": "embed-model", "input": ["first", "second"]}));
    assert_eq!(seen[1].authorization, None);
}
