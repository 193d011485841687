use std::collections::HashMap;
use std::fs;
use std::io::Cursor;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::Engine;
use image::GrayImage;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::{ModelTier, TaskKind};

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderRequest {
    pub task_kind: TaskKind,
    pub doc_id: String,
    pub attempt: u8,
    pub prompt: String,
    pub images: Vec<GrayImage>,
    pub schema: String,
    pub model_tier: ModelTier,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderResponse {
    pub raw_text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    #[serde(default)]
    pub tool_calls: u64,
    #[serde(default)]
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderError {
    #[error("transport failure: {message}")]
    Transport { message: String },
    #[error("provider timed out after {after_ms} ms")]
    Timeout { after_ms: u64 },
    #[error("malformed provider envelope: {message}")]
    MalformedEnvelope { message: String },
    #[error("no scripted response for {task_kind} attempt {attempt} (doc {doc_id})")]
    NoScript { task_kind: TaskKind, attempt: u8, doc_id: String },
    #[error("invalid request: {message}")]
    InvalidRequest { message: String },
}

impl ProviderError {
    pub fn transport(message: impl Into<String>) -> Self {
        ProviderError::Transport { message: message.into() }
    }
}

/// A vision-language model endpoint.
pub trait Provider: Send + Sync {
    fn invoke(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError>;
}

/// Checks the request invariant, then calls the provider.
pub fn invoke(provider: &dyn Provider, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
    if request.prompt.trim().is_empty() && request.images.is_empty() {
        return Err(ProviderError::InvalidRequest { message: "request has neither prompt nor images".into() });
    }
    provider.invoke(request)
}

/// On-disk form of one scripted response.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    /// `transport` or `timeout` makes the attempt fail at the transport level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    /// Structured alternative to `raw_text`; serialized compactly when used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_json: Option<Value>,
    #[serde(default)]
    pub input_tokens: u64,
    #[serde(default)]
    pub output_tokens: u64,
    #[serde(default)]
    pub tool_calls: u64,
    #[serde(default)]
    pub latency_ms: u64,
}

impl Fixture {
    pub fn respond(raw_text: impl Into<String>, input_tokens: u64, output_tokens: u64, tool_calls: u64) -> Self {
        Fixture { raw_text: Some(raw_text.into()), input_tokens, output_tokens, tool_calls, ..Default::default() }
    }

    pub fn transport_error(message: impl Into<String>) -> Self {
        Fixture { error: Some("transport".into()), message: Some(message.into()), ..Default::default() }
    }

    fn into_result(self) -> Result<ProviderResponse, ProviderError> {
        match self.error.as_deref() {
            Some("timeout") => return Err(ProviderError::Timeout { after_ms: self.latency_ms }),
            Some(_) => return Err(ProviderError::transport(self.message.unwrap_or_else(|| "scripted failure".into()))),
            None => {}
        }
        let raw_text = match (self.raw_text, self.raw_json) {
            (Some(t), _) => t,
            (None, Some(v)) => serde_json::to_string(&v).expect("JSON values serialize"),
            (None, None) => String::new(),
        };
        Ok(ProviderResponse { raw_text, input_tokens: self.input_tokens, output_tokens: self.output_tokens, tool_calls: self.tool_calls, latency_ms: self.latency_ms })
    }
}

/// What a scripted provider saw, for assertions in tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordedRequest {
    pub task_kind: TaskKind,
    pub doc_id: String,
    pub attempt: u8,
    pub prompt: String,
    pub image_count: usize,
    pub model_tier: ModelTier,
}

type ScriptKey = (Option<String>, TaskKind, u8);

/// Deterministic provider driven by fixtures keyed by `(task_kind, attempt)`,
/// optionally per document. Misses fail with [`ProviderError::NoScript`].
#[derive(Debug, Default)]
pub struct ScriptedProvider {
    scripts: HashMap<ScriptKey, Fixture>,
    log: Mutex<Vec<RecordedRequest>>,
}

pub fn fixture_path(dir: &Path, doc_id: Option<&str>, kind: TaskKind, attempt: u8) -> std::path::PathBuf {
    let mut p = dir.to_path_buf();
    if let Some(d) = doc_id {
        p.push(d);
    }
    p.push(kind.as_str());
    p.push(format!("attempt-{attempt}.json"));
    p
}

pub fn write_fixture(dir: &Path, doc_id: Option<&str>, kind: TaskKind, attempt: u8, fixture: &Fixture) -> std::io::Result<()> {
    let path = fixture_path(dir, doc_id, kind, attempt);
    fs::create_dir_all(path.parent().expect("fixture path has a parent"))?;
    fs::write(path, serde_json::to_vec_pretty(fixture).map_err(std::io::Error::other)?)
}

impl ScriptedProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, kind: TaskKind, attempt: u8, fixture: Fixture) -> Self {
        self.scripts.insert((None, kind, attempt), fixture);
        self
    }

    pub fn with_doc(mut self, doc_id: &str, kind: TaskKind, attempt: u8, fixture: Fixture) -> Self {
        self.scripts.insert((Some(doc_id.to_string()), kind, attempt), fixture);
        self
    }

    /// Reads `<dir>/<task_kind>/attempt-N.json` (any document) and
    /// `<dir>/<doc_id>/<task_kind>/attempt-N.json` (one document).
    pub fn from_dir(dir: &Path) -> Result<Self, ProviderError> {
        let io = |e: std::io::Error| ProviderError::MalformedEnvelope { message: format!("{}: {e}", dir.display()) };
        let mut provider = ScriptedProvider::new();
        let mut load = |doc: Option<String>, kind_dir: &Path, kind: TaskKind| -> Result<(), ProviderError> {
            for entry in fs::read_dir(kind_dir).map_err(io)? {
                let path = entry.map_err(io)?.path();
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                let Some(n) = name.strip_prefix("attempt-").and_then(|r| r.strip_suffix(".json")).and_then(|n| n.parse::<u8>().ok()) else { continue };
                let text = fs::read_to_string(&path).map_err(io)?;
                let fixture: Fixture = serde_json::from_str(&text).map_err(|e| ProviderError::MalformedEnvelope { message: format!("{}: {e}", path.display()) })?;
                provider.scripts.insert((doc.clone(), kind, n), fixture);
            }
            Ok(())
        };
        for entry in fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            if !path.is_dir() {
                continue;
            }
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            if let Ok(kind) = name.parse::<TaskKind>() {
                load(None, &path, kind)?;
                continue;
            }
            for kind in TaskKind::ALL {
                let kind_dir = path.join(kind.as_str());
                if kind_dir.is_dir() {
                    load(Some(name.clone()), &kind_dir, kind)?;
                }
            }
        }
        Ok(provider)
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.log.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }
}

impl Provider for ScriptedProvider {
    fn invoke(&self, req: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        self.log.lock().unwrap_or_else(|p| p.into_inner()).push(RecordedRequest {
            task_kind: req.task_kind,
            doc_id: req.doc_id.clone(),
            attempt: req.attempt,
            prompt: req.prompt.clone(),
            image_count: req.images.len(),
            model_tier: req.model_tier,
        });
        let fixture = self
            .scripts
            .get(&(Some(req.doc_id.clone()), req.task_kind, req.attempt))
            .or_else(|| self.scripts.get(&(None, req.task_kind, req.attempt)))
            .cloned()
            .ok_or_else(|| ProviderError::NoScript { task_kind: req.task_kind, attempt: req.attempt, doc_id: req.doc_id.clone() })?;
        fixture.into_result()
    }
}

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
pub const ENV_PROVIDER_URL: &str = "PLANLOOP_PROVIDER_URL";
pub const ENV_PROVIDER_KEY: &str = "PLANLOOP_PROVIDER_KEY";
pub const ENV_PROVIDER_TIMEOUT: &str = "PLANLOOP_PROVIDER_TIMEOUT_SECS";

#[derive(Debug, Serialize)]
struct RequestEnvelope<'a> {
    task_kind: TaskKind,
    doc_id: &'a str,
    attempt: u8,
    prompt: &'a str,
    images: Vec<String>,
    schema: &'a str,
    model_tier: ModelTier,
}

#[derive(Debug, Deserialize)]
struct ResponseEnvelope {
    raw_text: String,
    input_tokens: u64,
    output_tokens: u64,
    #[serde(default)]
    tool_calls: u64,
}

pub fn encode_png_base64(img: &GrayImage) -> String {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).expect("in-memory PNG encoding");
    base64::engine::general_purpose::STANDARD.encode(buf.into_inner())
}

/// JSON-over-HTTP adapter: one POST per invocation.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    url: String,
    key: Option<String>,
    timeout: Duration,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(url: impl Into<String>, key: Option<String>, timeout: Duration) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder().timeout(timeout).build().map_err(|e| ProviderError::transport(e.to_string()))?;
        Ok(HttpProvider { url: url.into(), key, timeout, client })
    }

    pub fn from_env() -> Result<Self, ProviderError> {
        let url = std::env::var(ENV_PROVIDER_URL).map_err(|_| ProviderError::InvalidRequest { message: format!("{ENV_PROVIDER_URL} is not set") })?;
        let key = std::env::var(ENV_PROVIDER_KEY).ok();
        let timeout = std::env::var(ENV_PROVIDER_TIMEOUT).ok().and_then(|s| s.parse().ok()).map(Duration::from_secs).unwrap_or(DEFAULT_TIMEOUT);
        Self::new(url, key, timeout)
    }
}

impl Provider for HttpProvider {
    fn invoke(&self, req: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        let body = RequestEnvelope {
            task_kind: req.task_kind,
            doc_id: &req.doc_id,
            attempt: req.attempt,
            prompt: &req.prompt,
            images: req.images.iter().map(encode_png_base64).collect(),
            schema: &req.schema,
            model_tier: req.model_tier,
        };
        let started = Instant::now();
        let mut call = self.client.post(&self.url).json(&body);
        if let Some(k) = &self.key {
            call = call.bearer_auth(k);
        }
        let response = call.send().map_err(|e| {
            if e.is_timeout() {
                ProviderError::Timeout { after_ms: self.timeout.as_millis() as u64 }
            } else {
                ProviderError::transport(e.to_string())
            }
        })?;
        let status = response.status();
        if !status.is_success() {
            return Err(ProviderError::transport(format!("HTTP status {status}")));
        }
        let text = response.text().map_err(|e| ProviderError::transport(e.to_string()))?;
        let env: ResponseEnvelope = serde_json::from_str(&text).map_err(|e| ProviderError::MalformedEnvelope { message: e.to_string() })?;
        Ok(ProviderResponse {
            raw_text: env.raw_text,
            input_tokens: env.input_tokens,
            output_tokens: env.output_tokens,
            tool_calls: env.tool_calls,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}
