use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::parse::ParseStatus;
use super::prompt::{TaskKind, TaskPrompt, NOTE_CLOSE, NOTE_OPEN, SENTENCES_MARKER};
use crate::error::{Error, Result};
use crate::model::{Label, LabelOntology};
use crate::rules::{compile_matcher, HeaderMatcher, MatcherOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmEndpoint {
    pub name: String,
    /// Base of an OpenAI-compatible API, e.g. `https://api.openai.com/v1`.
    #[serde(default)]
    pub base_url: String,
    /// Model id sent in requests; defaults to `name`.
    #[serde(default)]
    pub model: Option<String>,
    /// Environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    /// First retry delay; doubles on every further attempt.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

fn default_timeout() -> u64 {
    60
}
fn default_retries() -> u32 {
    3
}
fn default_parallel() -> usize {
    4
}
fn default_backoff() -> u64 {
    500
}

impl LlmEndpoint {
    pub fn new(name: impl Into<String>) -> Self {
        LlmEndpoint {
            name: name.into(),
            base_url: String::new(),
            model: None,
            auth_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            max_parallel: default_parallel(),
            backoff_ms: default_backoff(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_parallel < 1 {
            return Err(Error::InvalidConfig(format!(
                "endpoint {}: max_parallel must be >= 1",
                self.name
            )));
        }
        if self.name.is_empty() {
            return Err(Error::InvalidConfig("endpoint name is empty".into()));
        }
        Ok(())
    }

    pub fn model_id(&self) -> &str {
        self.model.as_deref().unwrap_or(&self.name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams {
            temperature: 0.0,
            max_tokens: 4096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmTrace {
    pub request_hash: String,
    pub endpoint: String,
    pub raw_response: String,
    /// Filled in by the caller once the response has been parsed.
    #[serde(default)]
    pub parse_status: Option<ParseStatus>,
    pub latency_ms: u64,
    /// Failed attempts before the successful one.
    pub retries: u32,
}

/// Content hash over length-prefixed fields, so distinct
/// (endpoint, prompt, params) tuples never share a key.
pub fn request_hash(endpoint: &str, prompt: &TaskPrompt, params: &DecodingParams) -> String {
    let mut hasher = Sha256::new();
    let schema = format!("{:?}", prompt.task);
    let temperature = params.temperature.to_bits().to_le_bytes();
    let max_tokens = params.max_tokens.to_le_bytes();
    let fields: [&[u8]; 7] = [
        endpoint.as_bytes(),
        schema.as_bytes(),
        prompt.schema_id.as_bytes(),
        prompt.system.as_bytes(),
        prompt.user.as_bytes(),
        &temperature,
        &max_tokens,
    ];
    for field in fields {
        hasher.update((field.len() as u64).to_le_bytes());
        hasher.update(field);
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SendError {
    Transport(String),
    AuthMissing(String),
}

pub trait LlmClient: Send + Sync {
    fn send(
        &self,
        endpoint: &LlmEndpoint,
        prompt: &TaskPrompt,
        params: &DecodingParams,
    ) -> std::result::Result<String, SendError>;
}

/// Content-addressed trace store: one JSON file per request hash.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(ResponseCache {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.json"))
    }

    pub fn get(&self, hash: &str) -> Option<LlmTrace> {
        let body = std::fs::read_to_string(self.path(hash)).ok()?;
        serde_json::from_str(&body).ok()
    }

    pub fn put(&self, trace: &LlmTrace) -> Result<()> {
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let path = self.path(&trace.request_hash);
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_string_pretty(trace)?;
        std::fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

/// Cache-first request with bounded retries and exponential backoff.
pub fn call(
    client: &dyn LlmClient,
    endpoint: &LlmEndpoint,
    prompt: &TaskPrompt,
    params: &DecodingParams,
    cache: Option<&ResponseCache>,
) -> Result<LlmTrace> {
    let hash = request_hash(&endpoint.name, prompt, params);
    if let Some(hit) = cache.and_then(|c| c.get(&hash)) {
        return Ok(hit);
    }
    let started = Instant::now();
    let mut attempt = 0u32;
    let raw = loop {
        match client.send(endpoint, prompt, params) {
            Ok(text) => break text,
            Err(SendError::AuthMissing(var)) => return Err(Error::AuthMissing(var)),
            Err(SendError::Transport(message)) => {
                if attempt >= endpoint.max_retries {
                    return Err(Error::Transport {
                        attempts: attempt + 1,
                        message,
                    });
                }
                let delay = endpoint.backoff_ms.saturating_mul(1u64 << attempt.min(20));
                if delay > 0 {
                    std::thread::sleep(Duration::from_millis(delay));
                }
                attempt += 1;
            }
        }
    };
    let trace = LlmTrace {
        request_hash: hash,
        endpoint: endpoint.name.clone(),
        raw_response: raw,
        parse_status: None,
        latency_ms: started.elapsed().as_millis() as u64,
        retries: attempt,
    };
    if let Some(cache) = cache {
        cache.put(&trace)?;
    }
    Ok(trace)
}

/// Runs `call` for every prompt with at most `endpoint.max_parallel` requests
/// in flight. Results come back in prompt order.
pub fn call_many(
    client: &dyn LlmClient,
    endpoint: &LlmEndpoint,
    prompts: &[TaskPrompt],
    params: &DecodingParams,
    cache: Option<&ResponseCache>,
) -> Vec<Result<LlmTrace>> {
    let workers = endpoint.max_parallel.max(1).min(prompts.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<LlmTrace>>>> = prompts.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= prompts.len() {
                    break;
                }
                let out = call(client, endpoint, &prompts[i], params, cache);
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| {
            s.into_inner()
                .unwrap_or_else(|e| e.into_inner())
                .expect("every slot is filled")
        })
        .collect()
}

/// Client for OpenAI-compatible `chat/completions` endpoints.
#[derive(Debug, Default)]
pub struct HttpClient;

impl LlmClient for HttpClient {
    fn send(
        &self,
        endpoint: &LlmEndpoint,
        prompt: &TaskPrompt,
        params: &DecodingParams,
    ) -> std::result::Result<String, SendError> {
        let token = match &endpoint.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| SendError::AuthMissing(var.clone()))?),
            None => None,
        };
        let url = format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/'));
        let body = serde_json::json!({
            "model": endpoint.model_id(),
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": prompt.user},
            ],
        });
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(endpoint.timeout_secs)))
            .build()
            .into();
        let mut request = agent.post(&url);
        if let Some(token) = token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| SendError::Transport(e.to_string()))?;
        let value: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| SendError::Transport(e.to_string()))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| SendError::Transport("response has no choices[0].message.content".into()))
    }
}

/// Behaviour of the offline [`MockClient`], loadable from a JSON script such
/// as `{"mode": "heuristic"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum MockBehavior {
    /// Answers like a header-aware model: header lines open sections,
    /// other sentences inherit the previous label.
    Heuristic,
    /// Always returns the same text.
    Fixed { text: String },
    /// Replays replies in order, repeating the last one when exhausted.
    Script { replies: Vec<MockReply> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockReply {
    Text(String),
    Fail(String),
}

impl MockBehavior {
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&body)?)
    }
}

/// Deterministic offline client used by tests and `--mock` runs.
pub struct MockClient {
    behavior: MockBehavior,
    matcher: HeaderMatcher,
    fallback: Label,
    cursor: AtomicUsize,
    calls: AtomicUsize,
}

impl MockClient {
    pub fn new(behavior: MockBehavior, ontology: &LabelOntology) -> Result<Self> {
        Ok(MockClient {
            behavior,
            matcher: compile_matcher(ontology, MatcherOptions::sectionizer())?,
            fallback: ontology.fallback().clone(),
            cursor: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        })
    }

    /// Number of `send` invocations so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn heuristic(&self, prompt: &TaskPrompt) -> String {
        match prompt.task {
            TaskKind::SentenceClassify => {
                let body = prompt.user.split_once(SENTENCES_MARKER).map_or("", |(_, b)| b);
                let mut current = self.fallback.clone();
                let mut out = Vec::new();
                for line in body.lines() {
                    let Some(rest) = line.strip_prefix('[') else { continue };
                    let Some((idx, text)) = rest.split_once("] ") else {
                        continue;
                    };
                    let Ok(index) = idx.parse::<usize>() else { continue };
                    if let Some(h) = self.matcher.find_headers(text).into_iter().find(|h| h.char_start == 0) {
                        current = h.label;
                    }
                    out.push(serde_json::json!({"index": index, "label": current.as_str()}));
                }
                serde_json::Value::Array(out).to_string()
            }
            TaskKind::FreetextSegment => {
                let note = prompt
                    .user
                    .split_once(NOTE_OPEN)
                    .and_then(|(_, rest)| rest.rsplit_once(NOTE_CLOSE))
                    .map_or("", |(note, _)| note);
                let mut out: Vec<serde_json::Value> = self
                    .matcher
                    .find_headers(note)
                    .into_iter()
                    .map(|h| {
                        let line = note[h.char_start..].lines().next().unwrap_or("");
                        serde_json::json!({"label": h.label.as_str(), "first_line": line})
                    })
                    .collect();
                if out.is_empty() {
                    let first = note.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
                    out.push(serde_json::json!({"label": self.fallback.as_str(), "first_line": first}));
                }
                serde_json::Value::Array(out).to_string()
            }
        }
    }
}

impl LlmClient for MockClient {
    fn send(
        &self,
        _endpoint: &LlmEndpoint,
        prompt: &TaskPrompt,
        _params: &DecodingParams,
    ) -> std::result::Result<String, SendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match &self.behavior {
            MockBehavior::Heuristic => Ok(self.heuristic(prompt)),
            MockBehavior::Fixed { text } => Ok(text.clone()),
            MockBehavior::Script { replies } => {
                let i = self.cursor.fetch_add(1, Ordering::SeqCst);
                match replies.get(i).or(replies.last()) {
                    Some(MockReply::Text(t)) => Ok(t.clone()),
                    Some(MockReply::Fail(msg)) => Err(SendError::Transport(msg.clone())),
                    None => Err(SendError::Transport("empty mock script".into())),
                }
            }
        }
    }
}
