//! Chat-completion access with an append-only record store and an offline
//! replay backend.
//!
//! Requests are identified by the SHA-256 of their canonical JSON (sorted
//! keys, no insignificant whitespace), so a store recorded by one run can be
//! replayed by any other run that renders the same prompts.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, SecondsFormat, Utc};
use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;
pub const DEFAULT_CONCURRENCY: usize = 4;
pub const API_KEY_ENV: &str = "LAO_API_KEY";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("uncached request {hash}")]
    UncachedRequest { hash: String },

    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },

    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },

    #[error("malformed completion response: {0}")]
    Protocol(String),

    #[error("record store {path} line {line}: {message}")]
    Integrity {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("record store {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, model_id: impl Into<String>, temperature: f64, max_tokens: u32) -> Result<Self, GatewayError> {
        let req = CompletionRequest {
            prompt: prompt.into(),
            model_id: model_id.into(),
            temperature,
            max_tokens,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt.is_empty() {
            return Err(GatewayError::InvalidRequest("empty prompt".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Sorted-key compact JSON of the four request fields.
    pub fn canonical_json(&self) -> String {
        // serde_json's default map is ordered by key
        json!({
            "max_tokens": self.max_tokens,
            "model_id": self.model_id,
            "prompt": self.prompt,
            "temperature": self.temperature,
        })
        .to_string()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub request: CompletionRequest,
    pub request_hash: String,
    pub raw_response: String,
    pub timestamp: DateTime<Utc>,
}

impl CompletionRecord {
    pub fn new(request: CompletionRequest, raw_response: String, timestamp: DateTime<Utc>) -> Self {
        let request_hash = request.hash();
        CompletionRecord {
            request,
            request_hash,
            raw_response,
            timestamp,
        }
    }

    fn to_line(&self) -> String {
        let request: Value = serde_json::from_str(&self.request.canonical_json()).expect("canonical json parses");
        let mut line = json!({
            "request": request,
            "request_hash": self.request_hash,
            "raw_response": self.raw_response,
            "timestamp": self.timestamp.to_rfc3339_opts(SecondsFormat::Micros, true),
        })
        .to_string();
        line.push('\n');
        line
    }
}

/// Append-only JSONL store of completion records. Appends are serialized
/// through a mutex so concurrent workers never interleave lines.
#[derive(Debug)]
pub struct RecordStore {
    path: PathBuf,
    file: Mutex<File>,
}

impl RecordStore {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let path = path.into();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|source| GatewayError::Io { path: path.clone(), source })?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| GatewayError::Io { path: path.clone(), source })?;
        Ok(RecordStore {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &CompletionRecord) -> Result<(), GatewayError> {
        let mut file = self.file.lock().expect("record store lock poisoned");
        file.write_all(record.to_line().as_bytes())
            .and_then(|_| file.flush())
            .map_err(|source| GatewayError::Io { path: self.path.clone(), source })
    }
}

pub fn write_records(path: impl AsRef<Path>, records: &[CompletionRecord]) -> Result<(), GatewayError> {
    let path = path.as_ref();
    let body: String = records.iter().map(CompletionRecord::to_line).collect();
    fs::write(path, body).map_err(|source| GatewayError::Io { path: path.to_path_buf(), source })
}

/// Reads and verifies a store. Every line must be newline-terminated JSON
/// whose `request_hash` matches its request.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<CompletionRecord>, GatewayError> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|source| GatewayError::Io { path: path.to_path_buf(), source })?;
    let integrity = |line: usize, message: String| GatewayError::Integrity {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut records = Vec::new();
    for (i, chunk) in raw.split_inclusive('\n').enumerate() {
        let Some(line) = chunk.strip_suffix('\n') else {
            return Err(integrity(i + 1, "truncated record (no line terminator)".into()));
        };
        if line.trim().is_empty() {
            continue;
        }
        let record: CompletionRecord = serde_json::from_str(line).map_err(|e| integrity(i + 1, e.to_string()))?;
        if record.request.hash() != record.request_hash {
            return Err(integrity(i + 1, "request_hash does not match request".into()));
        }
        records.push(record);
    }
    Ok(records)
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError>;

    /// Requests that reached the network so far.
    fn network_calls(&self) -> usize {
        0
    }
}

/// Serves stored responses by request hash; never touches the network.
#[derive(Debug, Default)]
pub struct ReplayBackend {
    responses: HashMap<String, String>,
}

impl ReplayBackend {
    pub fn from_records(records: impl IntoIterator<Item = CompletionRecord>) -> Self {
        let responses = records
            .into_iter()
            .map(|r| (r.request_hash, r.raw_response))
            .collect();
        ReplayBackend { responses }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        Ok(Self::from_records(read_records(path)?))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl CompletionBackend for ReplayBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        req.validate()?;
        let hash = req.hash();
        self.responses
            .get(&hash)
            .cloned()
            .ok_or(GatewayError::UncachedRequest { hash })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// One POST of a JSON body. `Err` means the request never produced an HTTP
/// status (connection refused, timeout, ...).
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &str) -> Result<HttpReply, String>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Transport { attempts: 0, message: e.to_string() })?;
        Ok(ReqwestTransport { client })
    }
}

impl Transport for ReqwestTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &str) -> Result<HttpReply, String> {
        let mut req = self
            .client
            .post(url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_string());
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub factor: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base_delay: Duration::from_secs(1),
            factor: 2.0,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt` (1-based); the first attempt has none.
    pub fn delay_before(&self, attempt: u32) -> Duration {
        if attempt <= 1 {
            Duration::ZERO
        } else {
            self.base_delay.mul_f64(self.factor.powi(attempt as i32 - 2))
        }
    }
}

fn is_transient(status: u16) -> bool {
    status == 408 || status == 429 || (500..600).contains(&status)
}

type Sleeper = Box<dyn Fn(Duration) + Send + Sync>;

/// OpenAI-compatible chat-completions client.
pub struct LiveBackend {
    transport: Box<dyn Transport>,
    endpoint: String,
    api_key: Option<String>,
    policy: RetryPolicy,
    sleep: Sleeper,
    store: Option<RecordStore>,
    calls: AtomicUsize,
}

impl LiveBackend {
    pub fn new(transport: Box<dyn Transport>, base_url: &str, api_key: Option<String>) -> Self {
        LiveBackend {
            transport,
            endpoint: format!("{}/v1/chat/completions", base_url.trim_end_matches('/')),
            api_key,
            policy: RetryPolicy::default(),
            sleep: Box::new(std::thread::sleep),
            store: None,
            calls: AtomicUsize::new(0),
        }
    }

    /// Reqwest transport with the API key taken from `LAO_API_KEY`.
    pub fn from_env(base_url: &str) -> Result<Self, GatewayError> {
        let transport = ReqwestTransport::new(Duration::from_secs(120))?;
        let key = std::env::var(API_KEY_ENV).ok();
        if key.is_none() {
            warn!("{API_KEY_ENV} is not set; sending requests without a bearer token");
        }
        Ok(Self::new(Box::new(transport), base_url, key))
    }

    pub fn with_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Box::new(sleep);
        self
    }

    pub fn with_store(mut self, store: RecordStore) -> Self {
        self.store = Some(store);
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn body(req: &CompletionRequest) -> String {
        json!({
            "model": req.model_id,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        })
        .to_string()
    }
}

fn first_choice_text(body: &str) -> Result<String, GatewayError> {
    let value: Value = serde_json::from_str(body).map_err(|e| GatewayError::Protocol(e.to_string()))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| GatewayError::Protocol("missing choices[0].message.content".into()))
}

impl CompletionBackend for LiveBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        req.validate()?;
        let body = Self::body(req);
        let mut last_error = String::new();
        for attempt in 1..=self.policy.max_attempts {
            let delay = self.policy.delay_before(attempt);
            if !delay.is_zero() {
                debug!("retrying in {delay:?} (attempt {attempt})");
                (self.sleep)(delay);
            }
            self.calls.fetch_add(1, Ordering::Relaxed);
            match self.transport.post_json(&self.endpoint, self.api_key.as_deref(), &body) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    let text = first_choice_text(&reply.body)?;
                    if let Some(store) = &self.store {
                        store.append(&CompletionRecord::new(req.clone(), text.clone(), Utc::now()))?;
                    }
                    return Ok(text);
                }
                Ok(reply) if is_transient(reply.status) => {
                    last_error = format!("http status {}", reply.status);
                }
                Ok(reply) => {
                    return Err(GatewayError::Http {
                        status: reply.status,
                        body: reply.body,
                    })
                }
                Err(e) => last_error = e,
            }
        }
        Err(GatewayError::Transport {
            attempts: self.policy.max_attempts,
            message: last_error,
        })
    }

    fn network_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn req(prompt: &str) -> CompletionRequest {
        CompletionRequest::new(prompt, "gpt-4", 0.0, 1024).unwrap()
    }

    #[test]
    fn canonical_json_is_sorted_and_compact() {
        assert_eq!(
            req("hi").canonical_json(),
            r#"{"max_tokens":1024,"model_id":"gpt-4","prompt":"hi","temperature":0.0}"#
        );
        assert_eq!(req("hi").hash().len(), 64);
        assert_ne!(req("hi").hash(), req("hi ").hash());
    }

    #[test]
    fn invalid_requests_rejected() {
        assert!(CompletionRequest::new("", "m", 0.0, 1).is_err());
        assert!(CompletionRequest::new("p", "m", 2.5, 1).is_err());
    }

    #[test]
    fn replay_hit_and_miss() {
        let rec = CompletionRecord::new(req("a"), "SENTENCE: x\n".into(), Utc::now());
        let replay = ReplayBackend::from_records([rec]);
        assert_eq!(replay.complete(&req("a")).unwrap(), "SENTENCE: x\n");
        let err = replay.complete(&req("b")).unwrap_err();
        assert!(err.to_string().starts_with("uncached request"));
        assert_eq!(replay.network_calls(), 0);
    }

    #[test]
    fn store_roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        write_records(&path, &[]).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
        assert!(read_records(&path).unwrap().is_empty());

        let ts = DateTime::parse_from_rfc3339("2024-05-01T12:00:00.123456Z").unwrap().with_timezone(&Utc);
        let records: Vec<_> = ["a", "b", "c"]
            .iter()
            .map(|p| CompletionRecord::new(req(p), format!("resp {p}\nline 2"), ts))
            .collect();
        write_records(&path, &records).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 3);
        assert_eq!(read_records(&path).unwrap(), records);

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        match read_records(&path) {
            Err(GatewayError::Integrity { line: 3, .. }) => {}
            other => panic!("expected integrity error on line 3, got {other:?}"),
        }
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_records(&path), Err(GatewayError::Integrity { line: 3, .. })));
    }

    #[test]
    fn tampered_hash_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let rec = CompletionRecord::new(req("a"), "r".into(), Utc::now());
        let line = rec.to_line().replace(&rec.request_hash, &"0".repeat(64));
        fs::write(&path, line).unwrap();
        assert!(matches!(read_records(&path), Err(GatewayError::Integrity { line: 1, .. })));
    }

    struct Scripted {
        replies: Mutex<Vec<Result<HttpReply, String>>>,
        bodies: Mutex<Vec<String>>,
    }

    impl Scripted {
        fn new(mut replies: Vec<Result<HttpReply, String>>) -> Self {
            replies.reverse();
            Scripted {
                replies: Mutex::new(replies),
                bodies: Mutex::new(Vec::new()),
            }
        }
    }

    impl Transport for Arc<Scripted> {
        fn post_json(&self, _url: &str, bearer: Option<&str>, body: &str) -> Result<HttpReply, String> {
            assert_eq!(bearer, Some("k"));
            self.bodies.lock().unwrap().push(body.to_string());
            self.replies.lock().unwrap().pop().expect("script exhausted")
        }
    }

    fn ok_reply(text: &str) -> Result<HttpReply, String> {
        Ok(HttpReply {
            status: 200,
            body: json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string(),
        })
    }

    fn status(code: u16) -> Result<HttpReply, String> {
        Ok(HttpReply { status: code, body: "{}".into() })
    }

    fn live(script: Vec<Result<HttpReply, String>>) -> (LiveBackend, Arc<Scripted>, Arc<Mutex<Vec<Duration>>>) {
        let transport = Arc::new(Scripted::new(script));
        let slept = Arc::new(Mutex::new(Vec::new()));
        let log = slept.clone();
        let backend = LiveBackend::new(Box::new(transport.clone()), "http://fake/", Some("k".into()))
            .with_sleeper(move |d| log.lock().unwrap().push(d));
        (backend, transport, slept)
    }

    #[test]
    fn two_429s_then_success_backs_off_twice() {
        let (backend, transport, slept) = live(vec![status(429), status(429), ok_reply("done")]);
        assert_eq!(backend.endpoint(), "http://fake/v1/chat/completions");
        assert_eq!(backend.complete(&req("p")).unwrap(), "done");
        assert_eq!(*slept.lock().unwrap(), vec![Duration::from_secs(1), Duration::from_secs(2)]);
        assert_eq!(backend.network_calls(), 3);
        let body: Value = serde_json::from_str(&transport.bodies.lock().unwrap()[0]).unwrap();
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"], "p");
        assert_eq!(body["model"], "gpt-4");
    }

    #[test]
    fn client_error_is_not_retried() {
        let (backend, _, slept) = live(vec![status(401)]);
        assert!(matches!(backend.complete(&req("p")), Err(GatewayError::Http { status: 401, .. })));
        assert!(slept.lock().unwrap().is_empty());
    }

    #[test]
    fn retries_exhaust_after_five_attempts() {
        let script = vec![status(503), Err("refused".into()), status(500), status(429), status(502)];
        let (backend, _, slept) = live(script);
        assert!(matches!(
            backend.complete(&req("p")),
            Err(GatewayError::Transport { attempts: 5, .. })
        ));
        let secs: Vec<u64> = slept.lock().unwrap().iter().map(Duration::as_secs).collect();
        assert_eq!(secs, [1, 2, 4, 8]);
    }

    #[test]
    fn live_success_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.jsonl");
        let (backend, _, _) = live(vec![ok_reply("x")]);
        let backend = backend.with_store(RecordStore::open(&path).unwrap());
        backend.complete(&req("p")).unwrap();
        let records = read_records(&path).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].request_hash, req("p").hash());
        assert_eq!(ReplayBackend::from_records(records).complete(&req("p")).unwrap(), "x");
    }
}
