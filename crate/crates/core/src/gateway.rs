//! Text-completion gateway: one entry point for every model call, a call
//! ledger, and the backends behind it.
//!
//! Nothing outside this module touches the network.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Sampling seed. Distinguishes otherwise identical sampled requests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl CompletionRequest {
    /// Greedy request with the default output budget.
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            temperature: 0.0,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            seed: None,
        }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn max_output_tokens(mut self, n: u32) -> Self {
        self.max_output_tokens = n;
        self
    }

    pub fn seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    fn check(&self) -> Result<(), GatewayError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be a finite value >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_output_tokens must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub backend_label: String,
    #[serde(with = "duration_ms")]
    pub latency: Duration,
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// What a backend can report for a single attempt.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("refused: {0}")]
    Refusal(String),
    #[error("no script entry for prompt {prompt_sha256}")]
    NoScriptEntry { prompt_sha256: String },
    #[error("backend misconfigured: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider refused the request: {message}")]
    Refusal { message: String },
    #[error("no script entry for prompt {prompt_sha256}")]
    NoScriptEntry { prompt_sha256: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Transport { .. })
    }
}

pub trait Backend: Send + Sync {
    fn label(&self) -> &str;
    fn call(&self, req: &CompletionRequest) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallOutcome {
    Completed,
    Refused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub prompt_sha256: String,
    pub prompt_chars: usize,
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub outcome: CallOutcome,
    pub backend: String,
    pub response_chars: usize,
    pub attempts: u32,
    pub latency_ms: u64,
    pub timestamp_ms: u64,
}

/// Position in the ledger; counts taken "since" a marker exclude earlier calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LedgerMarker(pub usize);

#[derive(Debug, Default)]
pub struct CallLedger {
    entries: Mutex<Vec<LedgerEntry>>,
}

impl CallLedger {
    fn push(&self, entry: LedgerEntry) -> usize {
        let mut entries = self.entries.lock().expect("ledger lock poisoned");
        entries.push(entry);
        entries.len() - 1
    }

    pub fn marker(&self) -> LedgerMarker {
        LedgerMarker(self.len())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("ledger lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, since: Option<LedgerMarker>) -> usize {
        let n = self.len();
        n - since.map_or(0, |m| m.0.min(n))
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.entries.lock().expect("ledger lock poisoned").clone()
    }
}

pub fn prompt_sha256(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    retry: RetryPolicy,
    ledger: CallLedger,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.label())
            .field("retry", &self.retry)
            .field("calls", &self.ledger.len())
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: impl Backend + 'static) -> Self {
        Self::from_boxed(Box::new(backend))
    }

    pub fn from_boxed(backend: Box<dyn Backend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            ledger: CallLedger::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn backend_label(&self) -> &str {
        self.backend.label()
    }

    pub fn ledger(&self) -> &CallLedger {
        &self.ledger
    }

    pub fn ledger_count(&self, since: Option<LedgerMarker>) -> usize {
        self.ledger.count(since)
    }

    pub fn marker(&self) -> LedgerMarker {
        self.ledger.marker()
    }

    /// Issues one model call. Transport faults are retried with exponential
    /// backoff; refusals are final. Completed and refused calls each add one
    /// ledger entry; failures that never reach the model add none.
    pub fn complete(&self, req: &CompletionRequest) -> Result<Completion, GatewayError> {
        req.check()?;
        let max_attempts = self.retry.max_attempts.max(1);
        let started = Instant::now();
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.backend.call(req) {
                Ok(text) => {
                    let latency = started.elapsed();
                    self.record(req, CallOutcome::Completed, text.chars().count(), attempt, latency);
                    return Ok(Completion {
                        text,
                        backend_label: self.backend.label().to_string(),
                        latency,
                    });
                }
                Err(BackendError::Refusal(message)) => {
                    self.record(req, CallOutcome::Refused, 0, attempt, started.elapsed());
                    return Err(GatewayError::Refusal { message });
                }
                Err(BackendError::Transport(message)) => {
                    if attempt >= max_attempts {
                        return Err(GatewayError::Transport {
                            attempts: attempt,
                            message,
                        });
                    }
                    let delay = self.retry.base_delay * 2u32.saturating_pow(attempt - 1);
                    log::warn!("transport error (attempt {attempt}/{max_attempts}): {message}; retrying in {delay:?}");
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                }
                Err(BackendError::NoScriptEntry { prompt_sha256 }) => {
                    return Err(GatewayError::NoScriptEntry { prompt_sha256 })
                }
                Err(BackendError::Config(m)) => return Err(GatewayError::Config(m)),
            }
        }
    }

    fn record(
        &self,
        req: &CompletionRequest,
        outcome: CallOutcome,
        response_chars: usize,
        attempts: u32,
        latency: Duration,
    ) {
        let timestamp_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        self.ledger.push(LedgerEntry {
            prompt_sha256: prompt_sha256(&req.prompt),
            prompt_chars: req.prompt.chars().count(),
            temperature: req.temperature,
            max_output_tokens: req.max_output_tokens,
            seed: req.seed,
            outcome,
            backend: self.backend.label().to_string(),
            response_chars,
            attempts,
            latency_ms: latency.as_millis() as u64,
            timestamp_ms,
        });
    }
}

// ---------------------------------------------------------------------------
// Scripted playback backend

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Prompts compare after trimming trailing whitespace.
    #[default]
    Normalized,
    /// Prompts must match byte for byte.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptedReply {
    Text(String),
    Refusal(String),
}

/// One line of a script file. Either `prompt` or `prompt_sha256` must be set;
/// the hash is taken over the prompt as seen by the match mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub response: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub refusal: bool,
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("cannot read script {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("script line {line}: {message}")]
    Malformed { line: usize, message: String },
}

/// Deterministic playback keyed on the prompt hash (and seed, if scripted).
///
/// Lookup tries the exact `(prompt, seed)` pair first, then the prompt with
/// no seed, so a single unseeded entry answers every sample of a prompt.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    label: String,
    mode: MatchMode,
    replies: HashMap<(String, Option<u64>), ScriptedReply>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self {
            label: "scripted".into(),
            ..Self::default()
        }
    }

    pub fn with_mode(mut self, mode: MatchMode) -> Self {
        assert!(
            self.replies.is_empty(),
            "set the match mode before adding entries"
        );
        self.mode = mode;
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    fn key_text<'a>(&self, prompt: &'a str) -> &'a str {
        match self.mode {
            MatchMode::Normalized => prompt.trim_end(),
            MatchMode::Exact => prompt,
        }
    }

    fn key_hash(&self, prompt: &str) -> String {
        prompt_sha256(self.key_text(prompt))
    }

    pub fn insert(&mut self, prompt: &str, response: impl Into<String>) {
        let key = (self.key_hash(prompt), None);
        self.replies.insert(key, ScriptedReply::Text(response.into()));
    }

    pub fn insert_seeded(&mut self, prompt: &str, seed: u64, response: impl Into<String>) {
        let key = (self.key_hash(prompt), Some(seed));
        self.replies.insert(key, ScriptedReply::Text(response.into()));
    }

    pub fn insert_refusal(&mut self, prompt: &str, message: impl Into<String>) {
        let key = (self.key_hash(prompt), None);
        self.replies
            .insert(key, ScriptedReply::Refusal(message.into()));
    }

    pub fn respond(mut self, prompt: &str, response: impl Into<String>) -> Self {
        self.insert(prompt, response);
        self
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }

    pub fn add_line(&mut self, line: ScriptLine) -> Result<(), String> {
        let hash = match (&line.prompt, &line.prompt_sha256) {
            (Some(p), _) => self.key_hash(p),
            (None, Some(h)) => h.to_ascii_lowercase(),
            (None, None) => return Err("entry needs `prompt` or `prompt_sha256`".into()),
        };
        let reply = if line.refusal {
            ScriptedReply::Refusal(line.response)
        } else {
            ScriptedReply::Text(line.response)
        };
        self.replies.insert((hash, line.seed), reply);
        Ok(())
    }

    pub fn from_reader<R: Read>(reader: R, mode: MatchMode) -> Result<Self, ScriptError> {
        let mut backend = Self::new().with_mode(mode);
        for (idx, line) in BufReader::new(reader).lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| ScriptError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ScriptLine =
                serde_json::from_str(&line).map_err(|e| ScriptError::Malformed {
                    line: line_no,
                    message: e.to_string(),
                })?;
            backend
                .add_line(parsed)
                .map_err(|message| ScriptError::Malformed {
                    line: line_no,
                    message,
                })?;
        }
        Ok(backend)
    }

    pub fn from_file(path: impl AsRef<Path>, mode: MatchMode) -> Result<Self, ScriptError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| ScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_reader(file, mode)
    }
}

/// Writes script lines as JSONL, the format [`ScriptedBackend::from_reader`] reads.
pub fn write_script<W: Write>(mut w: W, lines: &[ScriptLine]) -> std::io::Result<()> {
    for line in lines {
        serde_json::to_writer(&mut w, line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

impl Backend for ScriptedBackend {
    fn label(&self) -> &str {
        &self.label
    }

    fn call(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let hash = self.key_hash(&req.prompt);
        let reply = req
            .seed
            .and_then(|s| self.replies.get(&(hash.clone(), Some(s))))
            .or_else(|| self.replies.get(&(hash.clone(), None)));
        match reply {
            Some(ScriptedReply::Text(t)) => Ok(t.clone()),
            Some(ScriptedReply::Refusal(m)) => Err(BackendError::Refusal(m.clone())),
            None => Err(BackendError::NoScriptEntry {
                prompt_sha256: hash,
            }),
        }
    }
}

/// Backend answering from a closure; handy for rule-based fake models.
pub struct FnBackend<F> {
    label: String,
    respond: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<String, BackendError> + Send + Sync,
{
    pub fn new(label: impl Into<String>, respond: F) -> Self {
        Self {
            label: label.into(),
            respond,
        }
    }
}

impl<F> Backend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn label(&self) -> &str {
        &self.label
    }

    fn call(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        (self.respond)(req)
    }
}

/// Shared view of what a [`RecordingBackend`] has captured.
#[derive(Debug, Clone, Default)]
pub struct Recording(Arc<Mutex<Vec<ScriptLine>>>);

impl Recording {
    /// Captured exchanges in call order.
    pub fn lines(&self) -> Vec<ScriptLine> {
        self.0.lock().expect("recording poisoned").clone()
    }
}

/// Wraps a backend and captures every answered or refused call as a
/// [`ScriptLine`], so a run can be replayed through [`ScriptedBackend`].
pub struct RecordingBackend<B> {
    inner: B,
    recording: Recording,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            recording: Recording::default(),
        }
    }

    pub fn recording(&self) -> Recording {
        self.recording.clone()
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn label(&self) -> &str {
        self.inner.label()
    }

    fn call(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let out = self.inner.call(req);
        let (response, refusal) = match &out {
            Ok(text) => (text.clone(), false),
            Err(BackendError::Refusal(m)) => (m.clone(), true),
            Err(_) => return out,
        };
        self.recording.0.lock().expect("recording poisoned").push(ScriptLine {
            prompt: Some(req.prompt.clone()),
            prompt_sha256: None,
            seed: req.seed,
            response,
            refusal,
        });
        out
    }
}

// ---------------------------------------------------------------------------
// Provider configuration

/// One keyed section of the provider config file:
///
/// ```toml
/// [claude]
/// base_url = "https://api.example.com/v1"
/// model = "claude-3-5-sonnet"
/// api_key_env = "EXAMPLE_API_KEY"
/// timeout_secs = 60
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    #[serde(skip)]
    pub name: String,
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    120
}

#[derive(Debug, Error)]
pub enum ProviderConfigError {
    #[error("cannot read provider config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("provider config: {0}")]
    Parse(String),
    #[error("provider {0:?} not found in config")]
    UnknownProvider(String),
}

pub fn parse_provider_configs(text: &str) -> Result<Vec<ProviderConfig>, ProviderConfigError> {
    let table: std::collections::BTreeMap<String, ProviderConfig> =
        toml::from_str(text).map_err(|e| ProviderConfigError::Parse(e.to_string()))?;
    Ok(table
        .into_iter()
        .map(|(name, mut cfg)| {
            cfg.name = name;
            cfg
        })
        .collect())
}

pub fn load_provider_config(
    path: impl AsRef<Path>,
    name: &str,
) -> Result<ProviderConfig, ProviderConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ProviderConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_provider_configs(&text)?
        .into_iter()
        .find(|c| c.name == name)
        .ok_or_else(|| ProviderConfigError::UnknownProvider(name.to_string()))
}

#[cfg(feature = "http")]
pub use http::HttpBackend;

#[cfg(feature = "http")]
mod http {
    use super::*;

    /// Generic chat-completions client (`POST {base_url}/chat/completions`).
    /// The prompt is sent as a single user turn.
    pub struct HttpBackend {
        config: ProviderConfig,
        api_key: String,
        agent: ureq::Agent,
    }

    impl HttpBackend {
        pub fn new(config: ProviderConfig) -> Result<Self, BackendError> {
            let api_key = std::env::var(&config.api_key_env).map_err(|_| {
                BackendError::Config(format!(
                    "environment variable {} is not set",
                    config.api_key_env
                ))
            })?;
            let agent = ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(config.timeout_secs))
                .build();
            Ok(Self {
                config,
                api_key,
                agent,
            })
        }

        fn endpoint(&self) -> String {
            format!(
                "{}/chat/completions",
                self.config.base_url.trim_end_matches('/')
            )
        }
    }

    pub(super) fn request_body(model: &str, req: &CompletionRequest) -> serde_json::Value {
        let mut body = serde_json::json!({
            "model": model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = seed.into();
        }
        body
    }

    pub(super) fn parse_response(body: &serde_json::Value) -> Result<String, BackendError> {
        let choice = body
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| BackendError::Transport("response has no choices".into()))?;
        let finish = choice.get("finish_reason").and_then(|f| f.as_str());
        let message = choice.get("message");
        if let Some(refusal) = message
            .and_then(|m| m.get("refusal"))
            .and_then(|r| r.as_str())
        {
            return Err(BackendError::Refusal(refusal.to_string()));
        }
        if finish == Some("content_filter") {
            return Err(BackendError::Refusal(
                "output blocked by provider content filter".into(),
            ));
        }
        message
            .and_then(|m| m.get("content"))
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| BackendError::Transport("response has no message content".into()))
    }

    impl Backend for HttpBackend {
        fn label(&self) -> &str {
            &self.config.name
        }

        fn call(&self, req: &CompletionRequest) -> Result<String, BackendError> {
            let resp = self
                .agent
                .post(&self.endpoint())
                .set("Authorization", &format!("Bearer {}", self.api_key))
                .send_json(request_body(&self.config.model, req));
            match resp {
                Ok(r) => {
                    let body: serde_json::Value = r
                        .into_json()
                        .map_err(|e| BackendError::Transport(e.to_string()))?;
                    parse_response(&body)
                }
                // Client errors other than rate limiting will not improve on retry.
                Err(ureq::Error::Status(code, r)) if code != 429 && (400..500).contains(&code) => {
                    let text = r.into_string().unwrap_or_default();
                    Err(BackendError::Config(format!("HTTP {code}: {text}")))
                }
                Err(ureq::Error::Status(code, r)) => {
                    let text = r.into_string().unwrap_or_default();
                    Err(BackendError::Transport(format!("HTTP {code}: {text}")))
                }
                Err(e) => Err(BackendError::Transport(e.to_string())),
            }
        }
    }
}
