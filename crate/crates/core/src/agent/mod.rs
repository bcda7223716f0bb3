//! Message-based contract shared by every agent role, plus structured-reply parsing with
//! bounded repair re-prompting.

mod http;
pub mod mock_server;
mod prompt;
mod scripted;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::plan::AudioType;
use crate::reply::ReplyError;

pub use http::{HttpBackend, WireError};
pub use prompt::{render_prompt, render_template, PromptBook, PromptContext, Role};
pub use scripted::{ScriptedBackend, ScriptedCall};

pub const DEFAULT_MAX_REPAIRS: usize = 2;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RoleName {
    Planner,
    PlanSupervisor,
    Expert(AudioType),
    AssignmentSupervisor,
    AudioEvaluator,
}

impl RoleName {
    pub fn key(&self) -> String {
        match self {
            RoleName::Planner => "planner".into(),
            RoleName::PlanSupervisor => "plan_supervisor".into(),
            RoleName::Expert(t) => format!("expert:{t}"),
            RoleName::AssignmentSupervisor => "assignment_supervisor".into(),
            RoleName::AudioEvaluator => "audio_evaluator".into(),
        }
    }

    /// Template key in the prompt book; expert roles share one parameterized template.
    pub(crate) fn template_key(&self) -> &'static str {
        match self {
            RoleName::Planner => "planner",
            RoleName::PlanSupervisor => "plan_supervisor",
            RoleName::Expert(_) => "expert",
            RoleName::AssignmentSupervisor => "assignment_supervisor",
            RoleName::AudioEvaluator => "audio_evaluator",
        }
    }
}

impl fmt::Display for RoleName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl FromStr for RoleName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "planner" => Ok(RoleName::Planner),
            "plan_supervisor" => Ok(RoleName::PlanSupervisor),
            "assignment_supervisor" => Ok(RoleName::AssignmentSupervisor),
            "audio_evaluator" => Ok(RoleName::AudioEvaluator),
            other => other
                .strip_prefix("expert:")
                .and_then(|t| t.parse::<AudioType>().ok())
                .map(RoleName::Expert)
                .ok_or_else(|| format!("unknown role `{other}`")),
        }
    }
}

impl Serialize for RoleName {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.key())
    }
}

impl<'de> Deserialize<'de> for RoleName {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Author {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttachmentKind {
    Image,
    Video,
    Audio,
}

impl fmt::Display for AttachmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttachmentKind::Image => "image",
            AttachmentKind::Video => "video",
            AttachmentKind::Audio => "audio",
        })
    }
}

/// Media passed by reference; backends resolve and decode it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub kind: AttachmentKind,
    #[serde(rename = "ref")]
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMessage {
    pub author: Author,
    pub content: String,
    #[serde(default)]
    pub attachments: Vec<Attachment>,
}

impl AgentMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self::text(Author::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::text(Author::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::text(Author::Assistant, content)
    }

    fn text(author: Author, content: impl Into<String>) -> Self {
        AgentMessage {
            author,
            content: content.into(),
            attachments: Vec::new(),
        }
    }
}

/// One backend call. `channel` scopes scripted replay (e.g. per event) and is not sent
/// over the network.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentRequest {
    pub role: RoleName,
    pub channel: Option<String>,
    pub messages: Vec<AgentMessage>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error("scripted backend has no reply for `{key}` turn {turn}")]
    ScriptExhausted { key: String, turn: usize },
    #[error("backend unreachable{}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Unreachable {
        status: Option<u16>,
        code: Option<String>,
        message: String,
    },
    #[error("backend does not accept {0} attachments")]
    AttachmentUnsupported(String),
    #[error("backend call timed out after {0:?}")]
    Timeout(Duration),
    #[error("invalid agent request: {0}")]
    InvalidRequest(String),
    #[error("prompt placeholder `{{{0}}}` has no value")]
    MissingPlaceholder(String),
    #[error("role `{role}` has no `{task}` prompt template")]
    UnknownTask { role: String, task: String },
    #[error("could not parse `{schema}` reply after {attempts} attempts: {last}")]
    StructuredParseFailed {
        schema: String,
        attempts: usize,
        last: ReplyError,
    },
    #[error("{0}")]
    Config(String),
}

impl AgentError {
    /// Errors meaning the backend could not produce a reply at all.
    pub fn is_unreachable(&self) -> bool {
        matches!(
            self,
            AgentError::ScriptExhausted { .. } | AgentError::Unreachable { .. } | AgentError::Timeout(_)
        )
    }
}

#[async_trait]
pub trait AgentBackend: Send + Sync {
    /// Returns the reply text for `request` verbatim.
    async fn complete(&self, request: &AgentRequest) -> Result<String, AgentError>;
}

/// Validates the request shape, then calls the backend under `timeout`.
pub async fn complete(
    backend: &dyn AgentBackend,
    request: &AgentRequest,
    timeout: Duration,
) -> Result<String, AgentError> {
    match request.messages.first() {
        None => return Err(AgentError::InvalidRequest("no messages".into())),
        Some(m) if m.author != Author::System => {
            return Err(AgentError::InvalidRequest("first message must be the role persona".into()))
        }
        _ => {}
    }
    if let Some(m) = request
        .messages
        .iter()
        .find(|m| m.content.is_empty() && m.attachments.is_empty())
    {
        return Err(AgentError::InvalidRequest(format!("empty {:?} message", m.author)));
    }
    tokio::time::timeout(timeout, backend.complete(request))
        .await
        .map_err(|_| AgentError::Timeout(timeout))?
}

/// Calls the backend and parses the reply, re-prompting with the parse error at most
/// `max_repairs` times. Makes between 1 and `max_repairs + 1` backend calls.
pub async fn ask_structured<T>(
    backend: &dyn AgentBackend,
    request: &AgentRequest,
    schema_id: &str,
    max_repairs: usize,
    repair_template: &str,
    timeout: Duration,
    parse: impl Fn(&str) -> Result<T, ReplyError>,
) -> Result<T, AgentError> {
    let mut request = request.clone();
    let mut last = None;
    for _ in 0..=max_repairs {
        let reply = complete(backend, &request, timeout).await?;
        match parse(&reply) {
            Ok(value) => return Ok(value),
            Err(err) => {
                let repair = PromptContext::new()
                    .var("schema_id", schema_id)
                    .var("error", err.to_string());
                let echoed = if reply.is_empty() { "(empty reply)".to_string() } else { reply };
                request.messages.push(AgentMessage::assistant(echoed));
                request
                    .messages
                    .push(AgentMessage::user(render_template(repair_template, &repair)?));
                last = Some(err);
            }
        }
    }
    Err(AgentError::StructuredParseFailed {
        schema: schema_id.to_string(),
        attempts: max_repairs + 1,
        last: last.expect("at least one attempt was made"),
    })
}

/// Backend handle with prompts, limits and a call counter, shared by every stage.
#[derive(Clone)]
pub struct AgentClient {
    backend: Arc<dyn AgentBackend>,
    prompts: Arc<PromptBook>,
    max_repairs: usize,
    timeout: Duration,
    calls: Arc<AtomicUsize>,
}

impl AgentClient {
    pub fn new(backend: Arc<dyn AgentBackend>, prompts: Arc<PromptBook>) -> Self {
        AgentClient {
            backend,
            prompts,
            max_repairs: DEFAULT_MAX_REPAIRS,
            timeout: DEFAULT_TIMEOUT,
            calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn with_max_repairs(mut self, max_repairs: usize) -> Self {
        self.max_repairs = max_repairs;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn prompts(&self) -> &PromptBook {
        &self.prompts
    }

    /// Backend calls made through this client so far, repairs included.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn render(&self, role: RoleName, task: &str, ctx: &PromptContext) -> Result<Vec<AgentMessage>, AgentError> {
        render_prompt(&self.prompts.role(role)?, task, ctx)
    }

    /// Renders `task` for `role` and returns the raw reply.
    pub async fn ask_text(
        &self,
        role: RoleName,
        channel: Option<&str>,
        task: &str,
        ctx: &PromptContext,
    ) -> Result<String, AgentError> {
        let request = AgentRequest {
            role,
            channel: channel.map(str::to_string),
            messages: self.render(role, task, ctx)?,
        };
        let counted = Counted {
            inner: self.backend.as_ref(),
            calls: &self.calls,
        };
        complete(&counted, &request, self.timeout).await
    }

    /// Renders `task` for `role` and parses the reply with repair re-prompting.
    pub async fn ask<T>(
        &self,
        role: RoleName,
        channel: Option<&str>,
        task: &str,
        ctx: &PromptContext,
        schema_id: &str,
        parse: impl Fn(&str) -> Result<T, ReplyError>,
    ) -> Result<T, AgentError> {
        let request = AgentRequest {
            role,
            channel: channel.map(str::to_string),
            messages: self.render(role, task, ctx)?,
        };
        let counted = Counted {
            inner: self.backend.as_ref(),
            calls: &self.calls,
        };
        ask_structured(
            &counted,
            &request,
            schema_id,
            self.max_repairs,
            &self.prompts.repair,
            self.timeout,
            parse,
        )
        .await
    }
}

struct Counted<'a> {
    inner: &'a dyn AgentBackend,
    calls: &'a AtomicUsize,
}

#[async_trait]
impl AgentBackend for Counted<'_> {
    async fn complete(&self, request: &AgentRequest) -> Result<String, AgentError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request).await
    }
}
