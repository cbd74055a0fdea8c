//! Remote provider against a local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};

use hierembed::embed::{EmbedError, ProviderConfig, RemoteClient};
use hierembed::preprocess::{CorpusEntry, EnrichedCorpus, Mode};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    auth: String,
    body: Value,
}

type Responder = dyn Fn(usize, &Value) -> (u16, String) + Send + Sync;

/// Serves one request per connection; `respond` gets the request number
/// and the parsed JSON body.
struct MockServer {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

impl MockServer {
    fn start(respond: Box<Responder>) -> MockServer {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        let respond: Arc<Responder> = Arc::from(respond);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let log = log.clone();
                let respond = respond.clone();
                std::thread::spawn(move || handle(stream, &log, &*respond));
            }
        });
        MockServer { url, seen }
    }

    fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

fn handle(stream: TcpStream, log: &Mutex<Vec<Seen>>, respond: &Responder) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut length = 0;
    let mut auth = String::new();
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    assert!(line.starts_with("POST /v1/embeddings "), "{line}");
    loop {
        line.clear();
        reader.read_line(&mut line).unwrap();
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        let (name, value) = l.split_once(':').unwrap();
        match name.to_ascii_lowercase().as_str() {
            "content-length" => length = value.trim().parse().unwrap(),
            "authorization" => auth = value.trim().to_string(),
            _ => {}
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    let body: Value = serde_json::from_slice(&body).unwrap();
    let n = {
        let mut g = log.lock().unwrap();
        g.push(Seen {
            auth,
            body: body.clone(),
        });
        g.len() - 1
    };
    let (status, text) = respond(n, &body);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
        text.len()
    );
}

fn vector_for(text: &str) -> Vec<f64> {
    let b = text.as_bytes();
    vec![b.len() as f64, b[0] as f64, *b.last().unwrap() as f64, 1.0]
}

/// Answers with embeddings in reverse index order.
fn embeddings_body(body: &Value) -> String {
    let inputs = body["input"].as_array().unwrap();
    let data: Vec<Value> = inputs
        .iter()
        .enumerate()
        .rev()
        .map(|(i, t)| json!({"index": i, "embedding": vector_for(t.as_str().unwrap())}))
        .collect();
    json!({"data": data}).to_string()
}

fn corpus(n: usize) -> EnrichedCorpus {
    EnrichedCorpus {
        entries: (0..n)
            .map(|i| CorpusEntry {
                code: format!("{:02}", i + 1).parse().unwrap(),
                text: format!("text number {i}"),
                mode: Mode::Raw,
            })
            .collect(),
    }
}

fn config(server: &MockServer, batch_size: usize) -> ProviderConfig {
    let mut cfg = ProviderConfig::remote(&server.url, "test-model");
    cfg.batch_size = batch_size;
    cfg.retry_base_ms = 1;
    cfg.parallelism = 2;
    cfg
}

#[test]
fn batches_and_reorders_by_index() {
    let server = MockServer::start(Box::new(|_, b| (200, embeddings_body(b))));
    let client = RemoteClient::from_config(&config(&server, 3), "k-123".into()).unwrap();
    let c = corpus(10);
    let e = client.embed(&c).unwrap();
    assert_eq!(client.requests_sent(), 4);
    let seen = server.requests();
    assert_eq!(seen.len(), 4);
    for s in &seen {
        assert!(s.body["input"].as_array().unwrap().len() <= 3);
        assert_eq!(s.body["model"], "test-model");
        assert!(s.body.get("dimensions").is_none());
        assert_eq!(s.auth, "Bearer k-123");
    }
    for entry in &c.entries {
        assert_eq!(
            e.get(&entry.code).unwrap(),
            vector_for(&entry.text).as_slice()
        );
    }
    assert!(!e.normalized());
}

#[test]
fn duplicate_texts_are_sent_once() {
    let server = MockServer::start(Box::new(|_, b| (200, embeddings_body(b))));
    let client = RemoteClient::from_config(&config(&server, 64), "k".into()).unwrap();
    let mut c = corpus(4);
    c.entries[3].text = c.entries[0].text.clone();
    client.embed(&c).unwrap();
    assert_eq!(
        server.requests()[0].body["input"].as_array().unwrap().len(),
        3
    );
}

#[test]
fn transient_errors_are_retried() {
    let server = MockServer::start(Box::new(|n, b| {
        if n < 2 {
            (503, "busy".into())
        } else {
            (200, embeddings_body(b))
        }
    }));
    let client = RemoteClient::from_config(&config(&server, 64), "k".into()).unwrap();
    let e = client.embed(&corpus(5)).unwrap();
    assert_eq!(e.len(), 5);
    assert_eq!(client.requests_sent(), 3);
}

#[test]
fn auth_failure_is_not_retried() {
    let server = MockServer::start(Box::new(|_, _| (401, r#"{"error":"bad key"}"#.into())));
    let client = RemoteClient::from_config(&config(&server, 64), "k".into()).unwrap();
    let err = client.embed(&corpus(5)).unwrap_err();
    assert!(matches!(err, EmbedError::Auth(_)), "{err}");
    assert_eq!(client.requests_sent(), 1);
}

#[test]
fn gives_up_after_max_attempts() {
    let server = MockServer::start(Box::new(|_, _| (500, "down".into())));
    let mut cfg = config(&server, 64);
    cfg.max_attempts = 3;
    let client = RemoteClient::from_config(&cfg, "k".into()).unwrap();
    let err = client.embed(&corpus(2)).unwrap_err();
    assert!(matches!(err, EmbedError::RetriesExhausted { .. }), "{err}");
    assert_eq!(client.requests_sent(), 3);
}

#[test]
fn bad_request_is_a_wire_error() {
    let server = MockServer::start(Box::new(|_, _| (400, "nope".into())));
    let client = RemoteClient::from_config(&config(&server, 64), "k".into()).unwrap();
    assert!(matches!(client.embed(&corpus(2)), Err(EmbedError::Wire(_))));
    assert_eq!(client.requests_sent(), 1);
}

#[test]
fn dimensions_are_forwarded_and_checked() {
    let server = MockServer::start(Box::new(|_, b| (200, embeddings_body(b))));
    let mut cfg = config(&server, 64);
    cfg.dimensions = Some(8);
    let client = RemoteClient::from_config(&cfg, "k".into()).unwrap();
    let err = client.embed(&corpus(2)).unwrap_err();
    assert_eq!(server.requests()[0].body["dimensions"], 8);
    assert!(
        matches!(
            err,
            EmbedError::DimensionMismatch {
                expected: 8,
                got: 4,
                ..
            }
        ),
        "{err}"
    );
}

#[test]
fn cached_rerun_sends_nothing() {
    let server = MockServer::start(Box::new(|_, b| (200, embeddings_body(b))));
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&server, 4);
    cfg.cache_path = Some(dir.path().join("cache.jsonl"));
    let c = corpus(9);

    let first = RemoteClient::from_config(&cfg, "k".into()).unwrap();
    let a = first.embed(&c).unwrap();
    assert_eq!(first.requests_sent(), 3);

    let second = RemoteClient::from_config(&cfg, "k".into()).unwrap();
    let b = second.embed(&c).unwrap();
    assert_eq!(second.requests_sent(), 0);
    assert_eq!(a, b);
    assert_eq!(a.to_bytes(), b.to_bytes());

    // A new text costs exactly one more request.
    let mut more = c.clone();
    more.entries.push(CorpusEntry {
        code: "99".parse().unwrap(),
        text: "fresh".into(),
        mode: Mode::Raw,
    });
    let third = RemoteClient::from_config(&cfg, "k".into()).unwrap();
    third.embed(&more).unwrap();
    assert_eq!(third.requests_sent(), 1);
}

#[test]
fn partial_failure_keeps_successful_batches_in_cache() {
    let server = MockServer::start(Box::new(|_, b| {
        let inputs = b["input"].as_array().unwrap();
        if inputs.iter().any(|t| t == "text number 0") {
            (400, "rejected".into())
        } else {
            (200, embeddings_body(b))
        }
    }));
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&server, 2);
    cfg.cache_path = Some(dir.path().join("cache.jsonl"));
    cfg.parallelism = 1;
    let client = RemoteClient::from_config(&cfg, "k".into()).unwrap();
    assert!(client.embed(&corpus(6)).is_err());
    let cache = hierembed::embed::EmbeddingCache::open(dir.path().join("cache.jsonl")).unwrap();
    assert_eq!(cache.len(), 4);
}
