//! In-process agent server implementing `POST /v1/chat`, for wire-level tests.

use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::Value;

use super::http::ChatReply;
use super::{AgentBackend, AgentError, AgentMessage, AgentRequest, RoleName, ScriptedBackend};
use crate::serve::{spawn, wire_error, ServerHandle};

#[derive(Clone)]
pub enum MockAgentBehavior {
    /// Answer from a scripted session.
    Scripted(Arc<ScriptedBackend>),
    /// Fail every request with this status and error code.
    Fail { status: u16, code: String },
}

#[derive(Clone)]
struct AppState {
    behavior: MockAgentBehavior,
    requests: Arc<Mutex<Vec<Value>>>,
}

pub struct MockAgentServer {
    handle: ServerHandle,
    requests: Arc<Mutex<Vec<Value>>>,
}

impl MockAgentServer {
    pub async fn start(behavior: MockAgentBehavior) -> std::io::Result<Self> {
        let requests = Arc::new(Mutex::new(Vec::new()));
        let state = AppState {
            behavior,
            requests: requests.clone(),
        };
        let router = Router::new().route("/v1/chat", post(chat)).with_state(state);
        Ok(MockAgentServer {
            handle: spawn(router).await?,
            requests,
        })
    }

    pub fn base_url(&self) -> String {
        self.handle.base_url()
    }

    /// Raw JSON bodies received so far.
    pub fn requests(&self) -> Vec<Value> {
        self.requests.lock().expect("request log").clone()
    }
}

async fn chat(State(state): State<AppState>, Json(body): Json<Value>) -> Response {
    state.requests.lock().expect("request log").push(body.clone());
    let backend = match &state.behavior {
        MockAgentBehavior::Fail { status, code } => {
            let status = StatusCode::from_u16(*status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            return wire_error(status, code, "mock failure");
        }
        MockAgentBehavior::Scripted(backend) => backend.clone(),
    };
    let role = match body.get("role").and_then(Value::as_str).map(str::parse::<RoleName>) {
        Some(Ok(role)) => role,
        _ => return wire_error(StatusCode::BAD_REQUEST, "bad_request", "missing or unknown role"),
    };
    let messages: Vec<AgentMessage> = match body.get("messages").cloned().map(serde_json::from_value) {
        Some(Ok(m)) => m,
        _ => return wire_error(StatusCode::BAD_REQUEST, "bad_request", "missing or malformed messages"),
    };
    let request = AgentRequest {
        role,
        channel: None,
        messages,
    };
    match backend.complete(&request).await {
        Ok(content) => Json(ChatReply { content }).into_response(),
        Err(AgentError::AttachmentUnsupported(kind)) => {
            wire_error(StatusCode::UNPROCESSABLE_ENTITY, "attachment_unsupported", kind)
        }
        Err(e) => wire_error(StatusCode::SERVICE_UNAVAILABLE, "script_exhausted", e.to_string()),
    }
}
