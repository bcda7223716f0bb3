//! Tool gateway: invokes generation and post-processing tools over the tool wire
//! protocol or in process, and stores the resulting artifacts.

mod mock;
mod store;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use reqwest::multipart::{Form, Part};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

pub use mock::{
    mock_descriptor, mock_frequency, mock_generate, mock_process, mock_synthesize, MockToolBehavior, MockToolConfig,
    MockToolServer, MOCK_AMPLITUDE,
};
pub use store::ArtifactStore;

use crate::agent::WireError;
use crate::audio::{decode_wav, encode_wav, AudioArtifact, AudioError};
use crate::tools::{GenerationSpec, ToolDescriptor, ToolKind, ToolLibrary};

pub const DEFAULT_IN_FLIGHT: usize = 4;
/// Relative duration deviation tolerated before a mismatch is recorded.
pub const DURATION_TOLERANCE: f64 = 0.10;
pub const MAX_REQUEST_SECONDS: f64 = 600.0;
pub const DEFAULT_TOOL_TIMEOUT: Duration = Duration::from_secs(120);

pub(crate) const PROCESS_REQUEST_PART: &str = "request";
pub(crate) const PROCESS_AUDIO_PART: &str = "audio";

/// Where a tool lives: in process (`mock`) or at an HTTP base URL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Endpoint {
    Mock,
    Http(String),
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "mock" {
            Ok(Endpoint::Mock)
        } else if s.starts_with("http://") || s.starts_with("https://") {
            Ok(Endpoint::Http(s.trim_end_matches('/').to_string()))
        } else {
            Err(format!("endpoint must be \"mock\" or an http(s) URL, got `{s}`"))
        }
    }
}

impl TryFrom<String> for Endpoint {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Endpoint> for String {
    fn from(e: Endpoint) -> String {
        e.to_string()
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Mock => f.write_str("mock"),
            Endpoint::Http(url) => f.write_str(url),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ToolRequest {
    Generate(GenerationSpec),
    Process {
        tool_id: String,
        action: String,
        params: BTreeMap<String, f64>,
        input: AudioArtifact,
    },
}

impl ToolRequest {
    pub fn tool_id(&self) -> &str {
        match self {
            ToolRequest::Generate(spec) => &spec.tool_id,
            ToolRequest::Process { tool_id, .. } => tool_id,
        }
    }

    fn validate(&self) -> Result<(), GatewayError> {
        match self {
            ToolRequest::Generate(spec) => {
                if !(spec.duration_s > 0.0 && spec.duration_s <= MAX_REQUEST_SECONDS) {
                    return Err(GatewayError::InvalidRequest(format!(
                        "duration_s {} outside (0, {MAX_REQUEST_SECONDS}]",
                        spec.duration_s
                    )));
                }
            }
            ToolRequest::Process { action, params, .. } => {
                if action.is_empty() {
                    return Err(GatewayError::InvalidRequest("empty action".into()));
                }
                if let Some((k, v)) = params.iter().find(|(_, v)| !v.is_finite()) {
                    return Err(GatewayError::InvalidRequest(format!("param {k} = {v} is not finite")));
                }
            }
        }
        Ok(())
    }

    /// Stable byte key used for content addressing.
    fn cache_key(&self, endpoint: &Endpoint, seed: u64) -> Vec<u8> {
        #[derive(Serialize)]
        struct Key<'a> {
            endpoint: String,
            seed: u64,
            op: &'a str,
            tool_id: &'a str,
            prompt: Option<&'a str>,
            duration_s: Option<f64>,
            extra: Option<&'a BTreeMap<String, String>>,
            action: Option<&'a str>,
            params: Option<&'a BTreeMap<String, f64>>,
            input: Option<String>,
        }
        let key = match self {
            ToolRequest::Generate(spec) => Key {
                endpoint: endpoint.to_string(),
                seed,
                op: "generate",
                tool_id: &spec.tool_id,
                prompt: Some(&spec.prompt),
                duration_s: Some(spec.duration_s),
                extra: Some(&spec.extra),
                action: None,
                params: None,
                input: None,
            },
            ToolRequest::Process {
                tool_id,
                action,
                params,
                input,
            } => Key {
                endpoint: endpoint.to_string(),
                seed,
                op: "process",
                tool_id,
                prompt: None,
                duration_s: None,
                extra: None,
                action: Some(action),
                params: Some(params),
                input: Some(ArtifactStore::digest(&encode_wav(input))),
            },
        };
        serde_json::to_vec(&key).expect("cache key serializes")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("no endpoint registered for tool `{0}`")]
    NoEndpoint(String),
    #[error("invalid tool request: {0}")]
    InvalidRequest(String),
    #[error("tool `{tool_id}` unreachable: {message}")]
    Unreachable { tool_id: String, message: String },
    #[error("tool `{tool_id}` failed ({code}): {message}")]
    Tool {
        tool_id: String,
        code: String,
        message: String,
    },
    #[error("tool `{tool_id}` returned undecodable audio: {source}")]
    Decode {
        tool_id: String,
        #[source]
        source: AudioError,
    },
    #[error("artifact store: {0}")]
    Store(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DurationMismatch {
    pub requested_s: f64,
    pub actual_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvokeOutcome {
    pub artifact: AudioArtifact,
    /// Set when a generator's output deviates from the request by more than 10%.
    pub duration_mismatch: Option<DurationMismatch>,
    pub cached: bool,
    pub stored_at: Option<PathBuf>,
}

/// Gateway call log entry, recorded when a call starts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GatewayCall {
    pub tool_id: String,
    pub operation: &'static str,
    /// Prompt for generation, action name for processing.
    pub detail: String,
}

pub fn duration_mismatch(requested_s: f64, actual_s: f64) -> Option<DurationMismatch> {
    ((actual_s - requested_s).abs() > DURATION_TOLERANCE * requested_s).then_some(DurationMismatch {
        requested_s,
        actual_s,
    })
}

pub struct ToolGateway {
    endpoints: BTreeMap<String, Endpoint>,
    mock_behavior: BTreeMap<String, MockToolBehavior>,
    seed: u64,
    client: reqwest::Client,
    permits: Arc<Semaphore>,
    store: Option<ArtifactStore>,
    log: Mutex<Vec<GatewayCall>>,
}

impl ToolGateway {
    pub fn new(endpoints: BTreeMap<String, Endpoint>) -> Self {
        ToolGateway {
            endpoints,
            mock_behavior: BTreeMap::new(),
            seed: 0,
            client: http_client(DEFAULT_TOOL_TIMEOUT),
            permits: Arc::new(Semaphore::new(DEFAULT_IN_FLIGHT)),
            store: None,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Every tool in `library` served in process.
    pub fn all_mock(library: &ToolLibrary) -> Self {
        Self::new(library.ids().map(|id| (id.to_string(), Endpoint::Mock)).collect())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_store(mut self, store: ArtifactStore) -> Self {
        self.store = Some(store);
        self
    }

    pub fn with_in_flight(mut self, limit: usize) -> Self {
        self.permits = Arc::new(Semaphore::new(limit.max(1)));
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.client = http_client(timeout);
        self
    }

    /// Shapes the output of an in-process mock tool.
    pub fn with_mock_behavior(mut self, tool_id: &str, behavior: MockToolBehavior) -> Self {
        self.mock_behavior.insert(tool_id.to_string(), behavior);
        self
    }

    pub fn endpoint(&self, tool_id: &str) -> Option<&Endpoint> {
        self.endpoints.get(tool_id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn calls(&self) -> Vec<GatewayCall> {
        self.log.lock().expect("gateway log").clone()
    }

    pub async fn generate(&self, spec: &GenerationSpec) -> Result<InvokeOutcome, GatewayError> {
        self.invoke(&ToolRequest::Generate(spec.clone())).await
    }

    pub async fn invoke(&self, request: &ToolRequest) -> Result<InvokeOutcome, GatewayError> {
        request.validate()?;
        let tool_id = request.tool_id();
        let endpoint = self
            .endpoints
            .get(tool_id)
            .ok_or_else(|| GatewayError::NoEndpoint(tool_id.to_string()))?;
        self.log.lock().expect("gateway log").push(match request {
            ToolRequest::Generate(spec) => GatewayCall {
                tool_id: tool_id.to_string(),
                operation: "generate",
                detail: spec.prompt.clone(),
            },
            ToolRequest::Process { action, .. } => GatewayCall {
                tool_id: tool_id.to_string(),
                operation: "process",
                detail: action.clone(),
            },
        });

        let digest = self
            .store
            .as_ref()
            .map(|_| ArtifactStore::digest(&request.cache_key(endpoint, self.seed)));
        let cached = match (&self.store, &digest) {
            (Some(store), Some(d)) => store.load(d),
            _ => None,
        };
        let was_cached = cached.is_some();
        let artifact = match cached {
            Some(a) => a,
            None => {
                let _permit = self.permits.acquire().await.expect("semaphore never closed");
                let raw = match endpoint {
                    Endpoint::Mock => self.invoke_mock(request)?,
                    Endpoint::Http(base) => self.invoke_http(base, request).await?,
                };
                // Same sample values whether fresh, cached or fetched over the wire.
                decode_wav(&encode_wav(&raw)).map_err(|source| GatewayError::Decode {
                    tool_id: tool_id.to_string(),
                    source,
                })?
            }
        };
        let stored_at = match (&self.store, &digest) {
            (Some(store), Some(d)) if !was_cached => Some(store.save(d, &artifact)?),
            (Some(store), Some(d)) => Some(store.path(d)),
            _ => None,
        };
        let duration_mismatch = match request {
            ToolRequest::Generate(spec) => duration_mismatch(spec.duration_s, artifact.duration_s()),
            ToolRequest::Process { .. } => None,
        };
        if let Some(m) = &duration_mismatch {
            tracing::info!(tool_id, requested = m.requested_s, actual = m.actual_s, "duration mismatch");
        }
        Ok(InvokeOutcome {
            artifact,
            duration_mismatch,
            cached: was_cached,
            stored_at,
        })
    }

    fn invoke_mock(&self, request: &ToolRequest) -> Result<AudioArtifact, GatewayError> {
        let behavior = self.mock_behavior.get(request.tool_id()).cloned().unwrap_or_default();
        if let Some((_, code)) = &behavior.fail {
            return Err(GatewayError::Tool {
                tool_id: request.tool_id().to_string(),
                code: code.clone(),
                message: "mock tool failure".into(),
            });
        }
        match request {
            ToolRequest::Generate(spec) => Ok(behavior.render(spec, self.seed)),
            ToolRequest::Process {
                tool_id,
                action,
                params,
                input,
            } => mock_process(action, params, input).map_err(|message| GatewayError::Tool {
                tool_id: tool_id.clone(),
                code: "unsupported_action".into(),
                message,
            }),
        }
    }

    async fn invoke_http(&self, base: &str, request: &ToolRequest) -> Result<AudioArtifact, GatewayError> {
        let tool_id = request.tool_id().to_string();
        let unreachable = |e: reqwest::Error| GatewayError::Unreachable {
            tool_id: tool_id.clone(),
            message: e.to_string(),
        };
        let builder = match request {
            ToolRequest::Generate(spec) => self.client.post(format!("{base}/v1/generate")).json(spec),
            ToolRequest::Process {
                action, params, input, ..
            } => {
                let body = serde_json::json!({ "action": action, "params": params }).to_string();
                let form = Form::new()
                    .part(
                        PROCESS_REQUEST_PART,
                        Part::text(body).mime_str("application/json").expect("static mime"),
                    )
                    .part(
                        PROCESS_AUDIO_PART,
                        Part::bytes(encode_wav(input))
                            .file_name("input.wav")
                            .mime_str("audio/wav")
                            .expect("static mime"),
                    );
                self.client.post(format!("{base}/v1/process")).multipart(form)
            }
        };
        let response = builder.send().await.map_err(unreachable)?;
        let status = response.status();
        let bytes = response.bytes().await.map_err(unreachable)?;
        if !status.is_success() {
            let (code, message) = match serde_json::from_slice::<WireError>(&bytes) {
                Ok(w) => (w.code, w.message),
                Err(_) => (
                    format!("http_{}", status.as_u16()),
                    String::from_utf8_lossy(&bytes).into_owned(),
                ),
            };
            return Err(GatewayError::Tool { tool_id, code, message });
        }
        decode_wav(&bytes).map_err(|source| GatewayError::Decode { tool_id, source })
    }

    /// Descriptor reported by the tool's endpoint.
    pub async fn describe(&self, tool_id: &str) -> Result<ToolDescriptor, GatewayError> {
        match self.endpoints.get(tool_id) {
            None => Err(GatewayError::NoEndpoint(tool_id.to_string())),
            Some(Endpoint::Mock) => Ok(mock_descriptor(tool_id)),
            Some(Endpoint::Http(base)) => {
                let unreachable = |e: reqwest::Error| GatewayError::Unreachable {
                    tool_id: tool_id.to_string(),
                    message: e.to_string(),
                };
                let response = self
                    .client
                    .get(format!("{base}/v1/describe"))
                    .send()
                    .await
                    .map_err(unreachable)?;
                let status = response.status();
                let bytes = response.bytes().await.map_err(unreachable)?;
                if !status.is_success() {
                    return Err(GatewayError::Tool {
                        tool_id: tool_id.to_string(),
                        code: format!("http_{}", status.as_u16()),
                        message: String::from_utf8_lossy(&bytes).into_owned(),
                    });
                }
                serde_json::from_slice(&bytes).map_err(|e| GatewayError::Tool {
                    tool_id: tool_id.to_string(),
                    code: "bad_descriptor".into(),
                    message: e.to_string(),
                })
            }
        }
    }

    /// Compares endpoint descriptors with the library. Mismatches are returned (and
    /// logged) as warnings.
    pub async fn cross_check(&self, library: &ToolLibrary) -> Result<Vec<String>, GatewayError> {
        let mut warnings = Vec::new();
        for local in library.iter() {
            if !self.endpoints.contains_key(&local.id) {
                continue;
            }
            let remote = self.describe(&local.id).await?;
            warnings.extend(descriptor_warnings(local, &remote));
        }
        for w in &warnings {
            tracing::warn!("{w}");
        }
        Ok(warnings)
    }
}

/// Disagreements between a library entry and an endpoint's descriptor.
pub fn descriptor_warnings(local: &ToolDescriptor, remote: &ToolDescriptor) -> Vec<String> {
    let mut out = Vec::new();
    if remote.id != local.id {
        out.push(format!("tool `{}`: endpoint reports id `{}`", local.id, remote.id));
    }
    if remote.kind != local.kind {
        out.push(format!("tool `{}`: endpoint reports kind {:?}", local.id, remote.kind));
    }
    if local.kind == ToolKind::Generator && local.audio_types.is_disjoint(&remote.audio_types) {
        out.push(format!(
            "tool `{}`: endpoint audio types {:?} share nothing with the library's {:?}",
            local.id, remote.audio_types, local.audio_types
        ));
    }
    out
}

fn http_client(timeout: Duration) -> reqwest::Client {
    reqwest::Client::builder()
        .timeout(timeout)
        .build()
        .expect("http client builds")
}
