//! Clients for the gateway API: over HTTP, or in-process.

use std::io::{BufRead, BufReader};
use std::sync::Arc;
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

use super::{ApiRequest, ApiResponse, Gateway};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("unexpected response: {0}")]
    Protocol(String),
}

/// Anything that can carry a gateway call.
pub trait Api {
    fn call(
        &self,
        method: &str,
        path: &str,
        body: Option<&Value>,
        headers: &[(&str, &str)],
    ) -> Result<ApiResponse, ClientError>;

    fn get(&self, path: &str) -> Result<ApiResponse, ClientError> {
        self.call("GET", path, None, &[])
    }

    fn post(&self, path: &str, body: &Value) -> Result<ApiResponse, ClientError> {
        self.call("POST", path, Some(body), &[])
    }
}

/// Calls an in-process gateway with a user bearer token.
#[derive(Clone)]
pub struct LocalClient {
    gateway: Arc<Gateway>,
    bearer: Option<String>,
    identity_token: Option<String>,
}

impl std::fmt::Debug for LocalClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LocalClient").finish_non_exhaustive()
    }
}

impl LocalClient {
    pub fn new(gateway: Arc<Gateway>, bearer: &str) -> Self {
        Self {
            gateway,
            bearer: Some(bearer.to_string()),
            identity_token: None,
        }
    }

    pub fn with_identity_token(gateway: Arc<Gateway>, token: &str) -> Self {
        Self {
            gateway,
            bearer: None,
            identity_token: Some(token.to_string()),
        }
    }
}

impl Api for LocalClient {
    fn call(
        &self,
        method: &str,
        path: &str,
        body: Option<&Value>,
        headers: &[(&str, &str)],
    ) -> Result<ApiResponse, ClientError> {
        let mut req = ApiRequest::new(method, path);
        if let Some(b) = &self.bearer {
            req = req.bearer(b);
        }
        if let Some(t) = &self.identity_token {
            req = req.identity_token(t);
        }
        for (k, v) in headers {
            req = req.header(k, v);
        }
        if let Some(b) = body {
            req.body = b.clone();
        }
        Ok(self.gateway.handle(&req))
    }
}

/// Blocking HTTP client.
#[derive(Clone)]
pub struct HttpClient {
    base: String,
    bearer: Option<String>,
    identity_token: Option<String>,
    http: reqwest::blocking::Client,
}

impl std::fmt::Debug for HttpClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpClient").field("base", &self.base).finish_non_exhaustive()
    }
}

fn transport(e: impl std::fmt::Display) -> ClientError {
    ClientError::Transport(e.to_string())
}

impl HttpClient {
    pub fn new(base: &str) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(transport)?;
        Ok(Self {
            base: base.trim_end_matches('/').to_string(),
            bearer: None,
            identity_token: None,
            http,
        })
    }

    pub fn with_bearer(mut self, token: &str) -> Self {
        self.bearer = Some(token.to_string());
        self
    }

    pub fn with_identity_token(mut self, token: &str) -> Self {
        self.identity_token = Some(token.to_string());
        self
    }

    fn request(&self, method: &str, path: &str) -> Result<reqwest::blocking::RequestBuilder, ClientError> {
        let m = reqwest::Method::from_bytes(method.as_bytes()).map_err(transport)?;
        let mut rb = self.http.request(m, format!("{}{}", self.base, path));
        if let Some(b) = &self.bearer {
            rb = rb.bearer_auth(b);
        }
        if let Some(t) = &self.identity_token {
            rb = rb.header(super::HEADER_IDENTITY_TOKEN, t);
        }
        Ok(rb)
    }

    /// Follows `GET /events/stream`, calling `f(topic, data)` per frame
    /// until it returns false or the stream ends.
    pub fn stream_events(
        &self,
        topics: &[&str],
        mut f: impl FnMut(&str, Value) -> bool,
    ) -> Result<(), ClientError> {
        let path = if topics.is_empty() {
            "/events/stream".to_string()
        } else {
            format!("/events/stream?topics={}", topics.join(","))
        };
        let streaming = reqwest::blocking::Client::builder()
            .timeout(None)
            .build()
            .map_err(transport)?;
        let m = reqwest::Method::GET;
        let mut rb = streaming.request(m, format!("{}{}", self.base, path));
        if let Some(b) = &self.bearer {
            rb = rb.bearer_auth(b);
        }
        if let Some(t) = &self.identity_token {
            rb = rb.header(super::HEADER_IDENTITY_TOKEN, t);
        }
        let resp = rb.send().map_err(transport)?;
        if !resp.status().is_success() {
            let status = resp.status().as_u16();
            let body: Value = resp.json().unwrap_or(Value::Null);
            return Err(ClientError::Protocol(format!("{status}: {body}")));
        }
        let mut topic = String::new();
        let mut data = String::new();
        for line in BufReader::new(resp).lines() {
            let line = line.map_err(transport)?;
            if line.is_empty() {
                if !data.is_empty() {
                    let v = serde_json::from_str(&data).unwrap_or(Value::String(data.clone()));
                    if !f(&topic, v) {
                        return Ok(());
                    }
                }
                topic.clear();
                data.clear();
            } else if let Some(t) = line.strip_prefix("event: ") {
                topic = t.to_string();
            } else if let Some(d) = line.strip_prefix("data: ") {
                data.push_str(d);
            }
        }
        Ok(())
    }
}

impl Api for HttpClient {
    fn call(
        &self,
        method: &str,
        path: &str,
        body: Option<&Value>,
        headers: &[(&str, &str)],
    ) -> Result<ApiResponse, ClientError> {
        let mut rb = self.request(method, path)?;
        for (k, v) in headers {
            rb = rb.header(*k, *v);
        }
        if let Some(b) = body {
            rb = rb.json(b);
        }
        let resp = rb.send().map_err(transport)?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(transport)?;
        let body = if text.is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text)
                .map_err(|e| ClientError::Protocol(format!("non-JSON body ({e}): {text}")))?
        };
        Ok(ApiResponse { status, body })
    }
}
