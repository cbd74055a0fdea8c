//! OpenAI-compatible `/embeddings` client.
//!
//! Requests are `POST {endpoint}/embeddings` with body
//! `{"model", "input": [texts], "dimensions"?}`; responses are read as
//! `{"data": [{"index", "embedding"}]}` and reordered by `index`.
//! Results are cached in a JSON Lines file keyed by
//! [`cache_key`]`(model, dimensions, text)`.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use ureq::Agent;

use super::{l2_norm, EmbedError, EmbeddingSet, ProviderConfig, NORM_TOLERANCE};
use crate::preprocess::EnrichedCorpus;
use crate::seed::stable_hash64;
use crate::taxonomy::Code;

/// Inputs longer than this (in bytes, an upper bound on tokens) are
/// rejected; the supported models accept 8191 tokens.
pub const MAX_INPUT_BYTES: usize = 8191;

const MAX_RESPONSE_BYTES: u64 = 256 * 1024 * 1024;

/// `{model}|{dimensions or empty}|{text}` hashed with FNV-1a 64, as 16 hex
/// digits.
pub fn cache_key(model: &str, dimensions: Option<usize>, text: &str) -> String {
    let dims = dimensions.map(|d| d.to_string()).unwrap_or_default();
    format!(
        "{:016x}",
        stable_hash64(format!("{model}|{dims}|{text}").as_bytes())
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheLine {
    key: String,
    code: Code,
    vector: Vec<f64>,
}

/// Append-only JSON Lines cache.
///
/// A torn final line (no trailing newline, unparsable) is dropped and
/// overwritten on the next append. Any other unparsable line is an error.
#[derive(Debug)]
pub struct EmbeddingCache {
    path: PathBuf,
    entries: HashMap<String, Vec<f64>>,
    valid_len: u64,
    needs_newline: bool,
}

impl EmbeddingCache {
    pub fn open(path: impl AsRef<Path>) -> Result<EmbeddingCache, EmbedError> {
        let path = path.as_ref().to_path_buf();
        let mut cache = EmbeddingCache {
            path,
            entries: HashMap::new(),
            valid_len: 0,
            needs_newline: false,
        };
        let mut bytes = Vec::new();
        match File::open(&cache.path) {
            Ok(mut f) => {
                f.read_to_end(&mut bytes)?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(cache),
            Err(e) => return Err(e.into()),
        }
        let mut offset = 0usize;
        let mut line_no = 0usize;
        while offset < bytes.len() {
            line_no += 1;
            let (line, complete) = match bytes[offset..].iter().position(|&b| b == b'\n') {
                Some(end) => (&bytes[offset..offset + end], true),
                None => (&bytes[offset..], false),
            };
            let next = offset + line.len() + usize::from(complete);
            if line.iter().all(u8::is_ascii_whitespace) {
                offset = next;
                cache.valid_len = next as u64;
                continue;
            }
            match serde_json::from_slice::<CacheLine>(line) {
                Ok(entry) => {
                    cache.entries.insert(entry.key, entry.vector);
                    cache.valid_len = next as u64;
                    cache.needs_newline = !complete;
                }
                Err(_) if !complete => break,
                Err(e) => {
                    return Err(EmbedError::CacheCorrupt {
                        line: line_no,
                        message: e.to_string(),
                    })
                }
            }
            offset = next;
        }
        Ok(cache)
    }

    pub fn get(&self, key: &str) -> Option<&Vec<f64>> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn append(&mut self, rows: Vec<(String, Code, Vec<f64>)>) -> Result<(), EmbedError> {
        if rows.is_empty() {
            return Ok(());
        }
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&self.path)?;
        f.set_len(self.valid_len)?;
        let mut buf = Vec::new();
        if self.needs_newline {
            buf.push(b'\n');
        }
        for (key, code, vector) in rows {
            let line = CacheLine { key, code, vector };
            serde_json::to_writer(&mut buf, &line).expect("cache line serializes");
            buf.push(b'\n');
            self.entries.insert(line.key, line.vector);
        }
        use std::io::Seek;
        f.seek(std::io::SeekFrom::Start(self.valid_len))?;
        f.write_all(&buf)?;
        f.flush()?;
        self.valid_len += buf.len() as u64;
        self.needs_newline = false;
        Ok(())
    }
}

/// Exponential backoff: attempt `k` waits `base * 2^k` plus up to 25% jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base: Duration,
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let scaled = self.base.saturating_mul(1u32 << attempt.min(20));
        scaled.mul_f64(1.0 + 0.25 * rand::random::<f64>())
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

type BatchResult = Result<Vec<Vec<f64>>, EmbedError>;

enum Failure {
    Transient(String),
    Fatal(EmbedError),
}

pub struct RemoteClient {
    agent: Agent,
    url: String,
    api_key: String,
    model: String,
    dimensions: Option<usize>,
    batch_size: usize,
    parallelism: usize,
    retry: RetryPolicy,
    cache_path: Option<PathBuf>,
    requests: AtomicUsize,
}

impl RemoteClient {
    pub fn from_config(cfg: &ProviderConfig, api_key: String) -> Result<RemoteClient, EmbedError> {
        cfg.validate()?;
        let endpoint = cfg.endpoint.as_deref().expect("validated");
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .build()
            .into();
        Ok(RemoteClient {
            agent,
            url: format!("{}/embeddings", endpoint.trim_end_matches('/')),
            api_key,
            model: cfg.model.clone(),
            dimensions: cfg.dimensions,
            batch_size: cfg.batch_size,
            parallelism: cfg.parallelism,
            retry: RetryPolicy {
                max_attempts: cfg.max_attempts,
                base: Duration::from_millis(cfg.retry_base_ms),
            },
            cache_path: cfg.cache_path.clone(),
            requests: AtomicUsize::new(0),
        })
    }

    /// HTTP requests issued so far, retries included.
    pub fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn embed(&self, corpus: &EnrichedCorpus) -> Result<EmbeddingSet, EmbedError> {
        if corpus.is_empty() {
            return Err(EmbedError::Empty);
        }
        for e in &corpus.entries {
            if e.text.len() > MAX_INPUT_BYTES {
                return Err(EmbedError::InputTooLong {
                    code: e.code.to_string(),
                    bytes: e.text.len(),
                    limit: MAX_INPUT_BYTES,
                });
            }
        }
        let mut cache = self
            .cache_path
            .as_ref()
            .map(EmbeddingCache::open)
            .transpose()?;
        let keys: Vec<String> = corpus
            .entries
            .iter()
            .map(|e| cache_key(&self.model, self.dimensions, &e.text))
            .collect();

        // Unique missing texts, in corpus order.
        let mut fresh: HashMap<String, Vec<f64>> = HashMap::new();
        let mut pending: Vec<(String, Code, String)> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (e, key) in corpus.entries.iter().zip(&keys) {
            let cached = cache.as_ref().is_some_and(|c| c.get(key).is_some());
            if !cached && seen.insert(key.clone()) {
                pending.push((key.clone(), e.code.clone(), e.text.clone()));
            }
        }

        let batches: Vec<&[(String, Code, String)]> = pending.chunks(self.batch_size).collect();
        let results = self.run_batches(&batches);

        let mut first_error = None;
        let mut to_cache = Vec::new();
        for (batch, result) in batches.iter().zip(results) {
            match result {
                Ok(vectors) => {
                    for ((key, code, _), v) in batch.iter().zip(vectors) {
                        to_cache.push((key.clone(), code.clone(), v.clone()));
                        fresh.insert(key.clone(), v);
                    }
                }
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        if let Some(c) = cache.as_mut() {
            c.append(to_cache)?;
        }
        if let Some(e) = first_error {
            return Err(e);
        }

        let mut vectors = BTreeMap::new();
        let mut expected = self.dimensions;
        for (e, key) in corpus.entries.iter().zip(&keys) {
            let v = fresh
                .get(key)
                .or_else(|| cache.as_ref().and_then(|c| c.get(key)))
                .expect("every key resolved")
                .clone();
            let want = *expected.get_or_insert(v.len());
            if v.len() != want {
                return Err(EmbedError::DimensionMismatch {
                    expected: want,
                    got: v.len(),
                    code: e.code.to_string(),
                });
            }
            vectors.insert(e.code.clone(), v);
        }
        let normalized = vectors
            .values()
            .all(|v| (l2_norm(v) - 1.0).abs() <= NORM_TOLERANCE);
        let mode = corpus.entries[0].mode;
        let mut set = EmbeddingSet::new(vectors, self.model.clone(), mode, normalized)?;
        set.provenance.push(serde_json::json!({
            "provider": "remote",
            "model": self.model,
            "dimensions": self.dimensions,
        }));
        Ok(set)
    }

    /// Runs batches on up to `parallelism` threads; results are indexed by
    /// batch so completion order does not matter.
    fn run_batches(&self, batches: &[&[(String, Code, String)]]) -> Vec<BatchResult> {
        let slots: Mutex<Vec<Option<BatchResult>>> =
            Mutex::new((0..batches.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let workers = self.parallelism.min(batches.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= batches.len() {
                        break;
                    }
                    let texts: Vec<&str> = batches[i].iter().map(|(_, _, t)| t.as_str()).collect();
                    let r = self.request_with_retry(&texts);
                    slots.lock().expect("no poisoned workers")[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .expect("no poisoned workers")
            .into_iter()
            .map(|r| r.expect("every batch ran"))
            .collect()
    }

    fn request_with_retry(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let mut last = String::new();
        for attempt in 0..self.retry.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.delay(attempt - 1));
            }
            match self.request(texts) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Transient(m)) => last = m,
            }
        }
        Err(EmbedError::RetriesExhausted {
            attempts: self.retry.max_attempts,
            message: last,
        })
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, Failure> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let mut body = serde_json::json!({"model": self.model, "input": texts});
        if let Some(d) = self.dimensions {
            body["dimensions"] = d.into();
        }
        let response = self
            .agent
            .post(&self.url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body);
        let response = match response {
            Ok(r) => r,
            Err(
                e @ (ureq::Error::Timeout(_)
                | ureq::Error::Io(_)
                | ureq::Error::ConnectionFailed
                | ureq::Error::HostNotFound),
            ) => return Err(Failure::Transient(e.to_string())),
            Err(e) => return Err(Failure::Fatal(EmbedError::Wire(e.to_string()))),
        };
        let status = response.status().as_u16();
        let text = response
            .into_body()
            .with_config()
            .limit(MAX_RESPONSE_BYTES)
            .read_to_string();
        let text = match text {
            Ok(t) => t,
            Err(e @ (ureq::Error::Timeout(_) | ureq::Error::Io(_))) => {
                return Err(Failure::Transient(e.to_string()))
            }
            Err(e) => return Err(Failure::Fatal(EmbedError::Wire(e.to_string()))),
        };
        match status {
            200..=299 => {}
            401 | 403 => {
                return Err(Failure::Fatal(EmbedError::Auth(format!(
                    "HTTP {status}: {text}"
                ))))
            }
            429 | 500..=599 => return Err(Failure::Transient(format!("HTTP {status}: {text}"))),
            _ => {
                return Err(Failure::Fatal(EmbedError::Wire(format!(
                    "HTTP {status}: {text}"
                ))))
            }
        }
        let parsed: EmbeddingResponse = serde_json::from_str(&text)
            .map_err(|e| Failure::Fatal(EmbedError::Wire(format!("bad response body: {e}"))))?;
        let mut ordered: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        for d in parsed.data {
            match ordered.get_mut(d.index) {
                Some(slot @ None) => *slot = Some(d.embedding),
                _ => {
                    return Err(Failure::Fatal(EmbedError::Wire(format!(
                        "response index {} invalid or repeated",
                        d.index
                    ))))
                }
            }
        }
        ordered
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| {
                Failure::Fatal(EmbedError::Wire("response is missing embeddings".into()))
            })
    }
}
