use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{AgentBackend, AgentError, AgentMessage, AgentRequest};

/// Agent backend speaking the `POST /v1/chat` wire protocol.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    base_url: String,
    client: reqwest::Client,
}

#[derive(Serialize)]
pub(crate) struct ChatRequest<'a> {
    pub role: String,
    pub messages: &'a [AgentMessage],
}

#[derive(Serialize, Deserialize)]
pub(crate) struct ChatReply {
    pub content: String,
}

/// Error body of every non-2xx response, for agents and tools alike.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub message: String,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>) -> Self {
        HttpBackend {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }
}

#[async_trait]
impl AgentBackend for HttpBackend {
    async fn complete(&self, request: &AgentRequest) -> Result<String, AgentError> {
        let body = ChatRequest {
            role: request.role.key(),
            messages: &request.messages,
        };
        let response = self
            .client
            .post(format!("{}/v1/chat", self.base_url))
            .json(&body)
            .send()
            .await
            .map_err(|e| AgentError::Unreachable {
                status: None,
                code: None,
                message: e.to_string(),
            })?;
        let status = response.status();
        let bytes = response.bytes().await.map_err(|e| AgentError::Unreachable {
            status: Some(status.as_u16()),
            code: None,
            message: e.to_string(),
        })?;
        if !status.is_success() {
            let (code, message) = match serde_json::from_slice::<WireError>(&bytes) {
                Ok(err) => (Some(err.code), err.message),
                Err(_) => (None, String::from_utf8_lossy(&bytes).into_owned()),
            };
            if code.as_deref() == Some("attachment_unsupported") {
                return Err(AgentError::AttachmentUnsupported(message));
            }
            return Err(AgentError::Unreachable {
                status: Some(status.as_u16()),
                code,
                message,
            });
        }
        let reply: ChatReply = serde_json::from_slice(&bytes).map_err(|e| AgentError::Unreachable {
            status: Some(status.as_u16()),
            code: Some("bad_response".into()),
            message: e.to_string(),
        })?;
        Ok(reply.content)
    }
}
