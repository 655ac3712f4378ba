//! Chat-completion backends.
//!
//! Every model call in an episode goes through [`ChatBackend::complete`] with
//! a [`CompletionRequest`] whose [`CallKey`] names the call uniquely within a
//! run. Two backends are provided: [`RemoteBackend`] speaks the
//! OpenAI-compatible chat completions protocol, and [`OracleBackend`] replays a
//! script keyed by call.

mod oracle;
mod remote;

use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use oracle::{OracleBackend, OracleRecord, OracleScriptError};
pub use remote::{RemoteBackend, RemoteConfig, API_KEY_ENV};

pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_TOKENS: u32 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ImageRef {
    /// An image file on disk, read at dispatch time.
    File { path: PathBuf },
    /// An image rendered in memory.
    Png {
        name: String,
        #[serde(skip)]
        bytes: Arc<Vec<u8>>,
    },
}

impl fmt::Debug for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageRef::File { path } => write!(f, "File({})", path.display()),
            ImageRef::Png { name, bytes } => write!(f, "Png({name}, {} bytes)", bytes.len()),
        }
    }
}

impl ImageRef {
    pub fn file(path: impl Into<PathBuf>) -> Self {
        ImageRef::File { path: path.into() }
    }

    pub fn png(name: impl Into<String>, bytes: Vec<u8>) -> Self {
        ImageRef::Png {
            name: name.into(),
            bytes: Arc::new(bytes),
        }
    }

    pub fn name(&self) -> String {
        match self {
            ImageRef::File { path } => path.display().to_string(),
            ImageRef::Png { name, .. } => name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Part {
    Text { text: String },
    Image { image: ImageRef },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl ChatMessage {
    pub fn new(role: Role) -> Self {
        Self {
            role,
            parts: Vec::new(),
        }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self::new(Role::System).text(text)
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::new(Role::User).text(text)
    }

    pub fn text(mut self, text: impl Into<String>) -> Self {
        self.push_text(text);
        self
    }

    pub fn push_text(&mut self, text: impl Into<String>) {
        self.parts.push(Part::Text { text: text.into() });
    }

    pub fn push_image(&mut self, image: ImageRef) {
        self.parts.push(Part::Image { image });
    }

    pub fn image_count(&self) -> usize {
        self.parts.iter().filter(|p| matches!(p, Part::Image { .. })).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallKind {
    Planning,
    Replan,
    Action,
    Describe,
    Target,
}

impl fmt::Display for CallKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CallKind::Planning => "planning",
            CallKind::Replan => "replan",
            CallKind::Action => "action",
            CallKind::Describe => "describe",
            CallKind::Target => "target",
        };
        f.write_str(s)
    }
}

/// Addresses one model call: episode, step, kind, number of replans consumed
/// so far, and the index of the call among calls sharing the other fields.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CallKey {
    pub episode: String,
    pub step: u32,
    pub kind: CallKind,
    pub replan_ordinal: u32,
    pub attempt: u32,
}

impl fmt::Display for CallKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "episode={} step={} kind={} replan_ordinal={} attempt={}",
            self.episode, self.step, self.kind, self.replan_ordinal, self.attempt
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub key: CallKey,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionRequest {
    pub fn new(kind: CallKind, messages: Vec<ChatMessage>) -> Self {
        Self {
            key: CallKey {
                episode: String::new(),
                step: 0,
                kind,
                replan_ordinal: 0,
                attempt: 0,
            },
            messages,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn kind(&self) -> CallKind {
        self.key.kind
    }

    /// All text parts joined by newlines, images as `[image: name]`.
    pub fn serialized_text(&self) -> String {
        let mut out = String::new();
        for message in &self.messages {
            for part in &message.parts {
                match part {
                    Part::Text { text } => out.push_str(text),
                    Part::Image { image } => {
                        out.push_str("[image: ");
                        out.push_str(&image.name());
                        out.push(']');
                    }
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn image_count(&self) -> usize {
        self.messages.iter().map(ChatMessage::image_count).sum()
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() || self.messages.iter().any(|m| m.parts.is_empty()) {
            return Err(BackendError::InvalidRequest(
                "every message needs at least one part".into(),
            ));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(
                "temperature must be a non-negative number".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Seconds.
    pub latency: f64,
    /// Token counts were estimated from character counts.
    #[serde(default)]
    pub estimated: bool,
}

/// `ceil(chars / 4)`, used when a backend reports no usage.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("authentication rejected (HTTP {status}): {body}")]
    Authentication { status: u16, body: String },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("no scripted response for {0}")]
    OracleMiss(CallKey),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cannot read image {path}: {source}")]
    ImageRead { path: PathBuf, source: std::io::Error },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        (**self).complete(request)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        (**self).complete(request)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Box<T> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        (**self).complete(request)
    }
}

/// Wraps a backend and keeps a copy of every request it forwards.
pub struct Recorder<B> {
    inner: B,
    requests: Mutex<Vec<CompletionRequest>>,
}

impl<B: ChatBackend> Recorder<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.requests.lock().expect("recorder lock").clone()
    }
}

impl<B: ChatBackend> ChatBackend for Recorder<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        self.requests.lock().expect("recorder lock").push(request.clone());
        self.inner.complete(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub step: u32,
    pub kind: CallKind,
    pub replan_ordinal: u32,
    pub attempt: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency: f64,
    #[serde(default)]
    pub estimated: bool,
}

/// Per-episode token and time accounting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageLedger {
    pub calls: Vec<CallRecord>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Seconds spent on the episode.
    pub wall_time: f64,
}

impl UsageLedger {
    pub fn record(&mut self, key: &CallKey, result: &CompletionResult) {
        self.prompt_tokens += result.prompt_tokens;
        self.completion_tokens += result.completion_tokens;
        self.calls.push(CallRecord {
            step: key.step,
            kind: key.kind,
            replan_ordinal: key.replan_ordinal,
            attempt: key.attempt,
            prompt_tokens: result.prompt_tokens,
            completion_tokens: result.completion_tokens,
            latency: result.latency,
            estimated: result.estimated,
        });
    }

    /// True when the running totals equal the sums of the call records.
    pub fn is_consistent(&self) -> bool {
        let prompt: u64 = self.calls.iter().map(|c| c.prompt_tokens).sum();
        let completion: u64 = self.calls.iter().map(|c| c.completion_tokens).sum();
        prompt == self.prompt_tokens && completion == self.completion_tokens
    }

    pub fn total_latency(&self) -> f64 {
        self.calls.iter().map(|c| c.latency).sum()
    }
}

/// Averages in the shape of a cost table: per task for time and tokens, per
/// call for latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageSummary {
    pub tasks: usize,
    pub calls: usize,
    pub time_per_task: f64,
    pub prompt_tokens_per_task: f64,
    pub completion_tokens_per_task: f64,
    pub latency_per_call: f64,
    pub estimated: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum UsageError {
    #[error("no tasks recorded")]
    Empty,
}

pub fn report_usage(ledgers: &[UsageLedger]) -> Result<UsageSummary, UsageError> {
    if ledgers.is_empty() {
        return Err(UsageError::Empty);
    }
    let tasks = ledgers.len() as f64;
    let calls: Vec<&CallRecord> = ledgers.iter().flat_map(|l| &l.calls).collect();
    let latency_per_call = if calls.is_empty() {
        0.0
    } else {
        calls.iter().map(|c| c.latency).sum::<f64>() / calls.len() as f64
    };
    Ok(UsageSummary {
        tasks: ledgers.len(),
        calls: calls.len(),
        time_per_task: ledgers.iter().map(|l| l.wall_time).sum::<f64>() / tasks,
        prompt_tokens_per_task: ledgers.iter().map(|l| l.prompt_tokens as f64).sum::<f64>() / tasks,
        completion_tokens_per_task: ledgers.iter().map(|l| l.completion_tokens as f64).sum::<f64>() / tasks,
        latency_per_call,
        estimated: calls.iter().any(|c| c.estimated),
    })
}

impl UsageSummary {
    pub const COLUMNS: [&'static str; 4] = ["Time (s)", "Prompt Token", "Completion Token", "Latency (s)"];

    pub fn to_table(&self) -> String {
        let cells = [
            format!("{:.2}", self.time_per_task),
            format!("{:.1}", self.prompt_tokens_per_task),
            format!("{:.1}", self.completion_tokens_per_task),
            format!("{:.3}", self.latency_per_call),
        ];
        let widths: Vec<usize> = Self::COLUMNS
            .iter()
            .zip(&cells)
            .map(|(h, c)| h.len().max(c.len()))
            .collect();
        let row = |items: Vec<&str>| {
            items
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = row(Self::COLUMNS.to_vec());
        out.push('\n');
        out.push_str(&row(cells.iter().map(String::as_str).collect()));
        out.push('\n');
        if self.estimated {
            out.push_str("(token counts partly estimated as ceil(chars/4))\n");
        }
        out
    }
}
