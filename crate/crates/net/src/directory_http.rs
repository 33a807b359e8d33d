//! The key directory over HTTP/1.1 + JSON.
//!
//! ```text
//! POST /v1/keys/{user}   body: {"bundle": {..}, "one_time_prekeys": [{"id": 1, "public": ".."}, ..]}
//!                        200:  {"identity_changed": false, "one_time_prekeys": 100}
//!                        400:  {"error": "rejected", "message": ".."}
//! GET  /v1/keys/{user}   200:  {"registration_id": .., "identity_pub": "..", "signed_prekey_id": ..,
//!                               "signed_prekey_pub": "..", "prekey_signature": "..",
//!                               "one_time_prekey": {"id": 7, "public": ".."} | null}
//!                        404:  {"error": "not_found", "message": ".."}
//! ```
//!
//! Every GET consumes the one-time prekey it returns.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use serde::{Deserialize, Serialize};
use textguard_core::directory::{Directory, DirectoryError, KeyDirectory, RegisterOutcome, RegisterRequest};
use textguard_core::ratchet::PreKeyBundle;
use tokio::sync::oneshot;

use crate::NetError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default)]
    pub message: String,
}

fn json_response<T: Serialize>(status: StatusCode, body: &T) -> Response {
    let text = serde_json::to_string(body).expect("bodies always serialise");
    (status, [("content-type", "application/json")], text).into_response()
}

fn error_response(e: &DirectoryError) -> Response {
    let (status, code) = match e {
        DirectoryError::Rejected(_) => (StatusCode::BAD_REQUEST, "rejected"),
        DirectoryError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
        DirectoryError::Unavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "unavailable"),
    };
    json_response(status, &ErrorBody { error: code.into(), message: e.to_string() })
}

async fn register(State(dir): State<Arc<Directory>>, Path(user): Path<String>, body: String) -> Response {
    let req: RegisterRequest = match serde_json::from_str(&body) {
        Ok(r) => r,
        Err(e) => {
            return json_response(
                StatusCode::BAD_REQUEST,
                &ErrorBody { error: "bad_request".into(), message: e.to_string() },
            )
        }
    };
    match dir.register(&user, req) {
        Ok(outcome) => json_response(StatusCode::OK, &outcome),
        Err(e) => error_response(&e),
    }
}

async fn fetch(State(dir): State<Arc<Directory>>, Path(user): Path<String>) -> Response {
    match dir.fetch_bundle(&user) {
        Ok(bundle) => json_response(StatusCode::OK, &bundle),
        Err(e) => error_response(&e),
    }
}

pub fn router(dir: Arc<Directory>) -> Router {
    Router::new()
        .route("/v1/keys/{user}", post(register).get(fetch))
        .with_state(dir)
}

/// A directory server on its own runtime thread.
pub struct DirectoryServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl DirectoryServer {
    /// Bind `bind` (port 0 picks a free port) and serve in the background.
    pub fn spawn(bind: SocketAddr, dir: Arc<Directory>) -> Result<Self, NetError> {
        let listener = std::net::TcpListener::bind(bind).map_err(|source| NetError::Bind { addr: bind, source })?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_io()
            .build()?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::Builder::new()
            .name("textguard-directory".into())
            .spawn(move || {
                runtime.block_on(async move {
                    let listener = match tokio::net::TcpListener::from_std(listener) {
                        Ok(l) => l,
                        Err(e) => {
                            log::error!("directory listener: {e}");
                            return;
                        }
                    };
                    let serve = axum::serve(listener, router(dir)).with_graceful_shutdown(async {
                        let _ = rx.await;
                    });
                    if let Err(e) = serve.await {
                        log::error!("directory server: {e}");
                    }
                });
            })?;
        Ok(Self { addr, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Block until the server stops (it only stops through `shutdown`).
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for DirectoryServer {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Percent-encode a user id as one path segment.
fn path_segment(id: &str) -> String {
    let mut out = String::with_capacity(id.len());
    for b in id.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'.' | b'_' | b'~') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

/// Blocking client for a remote directory.
#[derive(Clone)]
pub struct HttpDirectory {
    base: String,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpDirectory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpDirectory").field("base", &self.base).finish()
    }
}

impl HttpDirectory {
    pub fn new(base_url: &str) -> Self {
        Self::with_timeout(base_url, Duration::from_secs(5))
    }

    pub fn with_timeout(base_url: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { base: base_url.trim_end_matches('/').to_string(), agent }
    }

    fn url(&self, user: &str) -> String {
        format!("{}/v1/keys/{}", self.base, path_segment(user))
    }

    fn finish<T: for<'de> Deserialize<'de>>(
        user: &str,
        result: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<T, DirectoryError> {
        let mut resp = result.map_err(|e| DirectoryError::Unavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| DirectoryError::Unavailable(e.to_string()))?;
        if status == 200 {
            return serde_json::from_str(&body).map_err(|e| DirectoryError::Unavailable(format!("bad response: {e}")));
        }
        let err: ErrorBody = serde_json::from_str(&body).unwrap_or(ErrorBody {
            error: String::new(),
            message: format!("HTTP {status}"),
        });
        Err(match (status, err.error.as_str()) {
            (404, _) | (_, "not_found") => DirectoryError::NotFound(user.to_string()),
            (400, "rejected") => DirectoryError::Rejected(err.message),
            _ => DirectoryError::Unavailable(format!("HTTP {status}: {}", err.message)),
        })
    }
}

impl KeyDirectory for HttpDirectory {
    fn register(&self, user_id: &str, request: RegisterRequest) -> Result<RegisterOutcome, DirectoryError> {
        let body = serde_json::to_string(&request).expect("requests always serialise");
        let r = self
            .agent
            .post(&self.url(user_id))
            .header("content-type", "application/json")
            .send(body.as_str());
        Self::finish(user_id, r)
    }

    fn fetch_bundle(&self, user_id: &str) -> Result<PreKeyBundle, DirectoryError> {
        Self::finish(user_id, self.agent.get(&self.url(user_id)).call())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_are_escaped() {
        assert_eq!(path_segment("bob"), "bob");
        assert_eq!(path_segment("a b/c"), "a%20b%2Fc");
        assert_eq!(path_segment("zoë"), "zo%C3%AB");
    }

    #[test]
    fn unreachable_directory_is_unavailable() {
        // Port 9 on loopback: nothing listens there in the sandbox.
        let client = HttpDirectory::with_timeout("http://127.0.0.1:9", Duration::from_millis(500));
        assert!(matches!(client.fetch_bundle("bob"), Err(DirectoryError::Unavailable(_))));
    }
}
