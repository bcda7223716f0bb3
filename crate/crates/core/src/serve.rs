//! Loopback HTTP servers for the mock agent and mock tool endpoints.

use std::net::SocketAddr;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::{Json, Router};
use tokio::task::JoinHandle;

use crate::agent::WireError;

/// A running server; stops when dropped.
#[derive(Debug)]
pub struct ServerHandle {
    addr: SocketAddr,
    task: JoinHandle<()>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.task.abort();
    }
}

/// Serves `router` on an ephemeral loopback port.
pub async fn spawn(router: Router) -> std::io::Result<ServerHandle> {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    let task = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, router).await {
            tracing::warn!("mock server stopped: {e}");
        }
    });
    Ok(ServerHandle { addr, task })
}

pub(crate) fn wire_error(status: StatusCode, code: &str, message: impl Into<String>) -> Response {
    (
        status,
        Json(WireError {
            code: code.to_string(),
            message: message.into(),
        }),
    )
        .into_response()
}
