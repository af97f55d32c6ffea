//! HTTP/1.1 adapter for the gateway.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, HeaderMap, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use serde_json::Value;
use tokio::sync::{mpsc, oneshot};
use tokio_stream::wrappers::ReceiverStream;
use tower_http::services::ServeDir;

use super::{sse_frame, ApiRequest, ApiResponse, Gateway};

#[derive(Clone)]
struct AppState {
    gateway: Arc<Gateway>,
    closing: Arc<AtomicBool>,
}

fn json_response(r: ApiResponse) -> Response {
    let status = StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, axum::Json(r.body)).into_response()
}

async fn handle(
    State(st): State<AppState>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let mut req = ApiRequest::new(method.as_str(), &uri.to_string());
    req.path = uri
        .path_and_query()
        .map_or_else(|| uri.path().to_string(), |pq| pq.as_str().to_string());
    for (k, v) in &headers {
        if let Ok(v) = v.to_str() {
            req.headers.insert(k.as_str().to_ascii_lowercase(), v.to_string());
        }
    }
    if !body.is_empty() {
        match serde_json::from_slice::<Value>(&body) {
            Ok(v) => req.body = v,
            Err(e) => return json_response(ApiResponse::bad_request(format!("invalid JSON: {e}"))),
        }
    }
    if method == Method::GET && uri.path().trim_end_matches('/') == "/events/stream" {
        return event_stream(st, req).await;
    }
    let gw = st.gateway.clone();
    match tokio::task::spawn_blocking(move || gw.handle(&req)).await {
        Ok(r) => json_response(r),
        Err(e) => json_response(ApiResponse::error(500, "internal", e.to_string())),
    }
}

async fn event_stream(st: AppState, req: ApiRequest) -> Response {
    let gw = st.gateway.clone();
    let feed = match tokio::task::spawn_blocking(move || gw.open_event_stream(&req)).await {
        Ok(Ok(f)) => f,
        Ok(Err(r)) => return json_response(r),
        Err(e) => return json_response(ApiResponse::error(500, "internal", e.to_string())),
    };
    let (tx, rx) = mpsc::channel::<Result<String, Infallible>>(64);
    let closing = st.closing.clone();
    std::thread::spawn(move || {
        if tx.blocking_send(Ok(": connected\n\n".into())).is_err() {
            return;
        }
        while !closing.load(Ordering::SeqCst) && !tx.is_closed() {
            if let Some(e) = feed.next(Duration::from_millis(200)) {
                if tx.blocking_send(Ok(sse_frame(&e))).is_err() {
                    return;
                }
            }
        }
    });
    Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, "text/event-stream")
        .header(header::CACHE_CONTROL, "no-cache")
        .body(Body::from_stream(ReceiverStream::new(rx)))
        .unwrap_or_else(|_| StatusCode::INTERNAL_SERVER_ERROR.into_response())
}

/// A running HTTP listener. Dropping it shuts the listener down.
pub struct HttpServer {
    addr: SocketAddr,
    closing: Arc<AtomicBool>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for HttpServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpServer").field("addr", &self.addr).finish()
    }
}

impl HttpServer {
    /// Binds `addr` (e.g. `127.0.0.1:0`) and serves on a background thread.
    pub fn start(gateway: Arc<Gateway>, addr: &str) -> std::io::Result<Self> {
        Self::start_with_console(gateway, addr, None)
    }

    /// As `start`, also serving the static console build under `/console/`.
    pub fn start_with_console(
        gateway: Arc<Gateway>,
        addr: &str,
        console_dir: Option<PathBuf>,
    ) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let closing = Arc::new(AtomicBool::new(false));
        let state = AppState {
            gateway,
            closing: closing.clone(),
        };
        let (tx, rx) = oneshot::channel::<()>();
        let rt = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .thread_name("gateway-http")
            .build()?;
        let thread = std::thread::Builder::new()
            .name("gateway-http-main".into())
            .spawn(move || {
                rt.block_on(async move {
                    let listener = match tokio::net::TcpListener::from_std(listener) {
                        Ok(l) => l,
                        Err(e) => {
                            tracing::error!(error = %e, "listener setup failed");
                            return;
                        }
                    };
                    let mut app = Router::new();
                    if let Some(dir) = console_dir {
                        app = app.nest_service(
                            "/console",
                            ServeDir::new(dir).append_index_html_on_directories(true),
                        );
                    }
                    let app = app.fallback(handle).with_state(state);
                    let served = axum::serve(listener, app)
                        .with_graceful_shutdown(async {
                            let _ = rx.await;
                        })
                        .await;
                    if let Err(e) = served {
                        tracing::error!(error = %e, "http server failed");
                    }
                });
            })?;
        Ok(Self {
            addr: local,
            closing,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server exits (e.g. for a daemon's main thread).
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.closing.store(true, Ordering::SeqCst);
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.stop();
    }
}
