//! Scripted container behaviors for the simulated runner.
//!
//! `echo-agent` understands a few commands so tests can drive it:
//!
//! | text              | effect                                              |
//! |-------------------|-----------------------------------------------------|
//! | `remember K=V`    | writes `V` to `<workspace>/kv/K`                    |
//! | `recall K`        | replies with the stored value                       |
//! | `/prompt`         | replies with prompt, model and revision in use      |
//! | `busy N`          | works for N seconds, keep-aliving throughout        |
//! | `ask C TEXT`      | forwards TEXT to sidecar C over loopback            |
//! | `dial S`          | dials service S through the gateway                 |
//! | anything else     | replies `echo: <text>`                              |

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::sim::ContainerContext;

pub const BUILTIN_BEHAVIORS: &[&str] = &["echo-agent", "dialer-agent", "mock-mcp", "noop"];

/// Env var read by echo-agent: seconds to stay busy (keep-aliving) after
/// each message.
pub const AGENT_BUSY_ENV: &str = "AGENT_BUSY_S";

pub trait Behavior: Send + Sync {
    /// Runs until the container is stopped.
    fn run(&self, ctx: ContainerContext);
}

pub(crate) fn builtin_behaviors() -> HashMap<String, Arc<dyn Behavior>> {
    let mut m: HashMap<String, Arc<dyn Behavior>> = HashMap::new();
    m.insert("echo-agent".into(), Arc::new(EchoAgent { dialer: false }));
    m.insert("dialer-agent".into(), Arc::new(EchoAgent { dialer: true }));
    m.insert("mock-mcp".into(), Arc::new(MockMcp));
    m.insert("noop".into(), Arc::new(Noop));
    m
}

struct Noop;

impl Behavior for Noop {
    fn run(&self, ctx: ContainerContext) {
        while !ctx.sleep(Duration::from_secs(3600)) {}
    }
}

/// Answers each loopback request with the env var names it can see.
struct MockMcp;

impl Behavior for MockMcp {
    fn run(&self, ctx: ContainerContext) {
        while !ctx.is_stopped() {
            let Some(req) = ctx.recv_loopback(Duration::from_millis(500)) else {
                continue;
            };
            let reply = json!({
                "container": ctx.name(),
                "request": String::from_utf8_lossy(&req.payload),
                "env_keys": ctx.env().keys().collect::<Vec<_>>(),
            });
            let _ = ctx.send_loopback(&req.from, reply.to_string().as_bytes());
        }
    }
}

struct EchoAgent {
    dialer: bool,
}

struct Session<'a> {
    ctx: &'a ContainerContext,
    thread_id: String,
    instance_id: String,
    keepalive: Duration,
    busy_after: Duration,
    workspace: Option<String>,
}

impl Session<'_> {
    fn keepalive(&self) {
        if !self.instance_id.is_empty() {
            self.ctx
                .proxy()
                .post(&format!("/instances/{}/keepalive", self.instance_id), &json!({}));
        }
    }

    /// Works for `d`, keep-aliving every interval. Returns false if stopped.
    fn stay_busy(&self, d: Duration) -> bool {
        let end = Instant::now() + d;
        loop {
            let now = Instant::now();
            if now >= end {
                return true;
            }
            if self.ctx.sleep(self.keepalive.min(end - now)) {
                return false;
            }
            self.keepalive();
        }
    }

    fn reply(&self, text: &str, in_reply_to: Option<&str>) {
        self.ctx.proxy().post(
            &format!("/threads/{}/messages", self.thread_id),
            &json!({"text": text, "in_reply_to": in_reply_to}),
        );
    }

    fn kv_path(&self, key: &str) -> Option<String> {
        self.workspace.as_ref().map(|w| format!("{w}/kv/{key}"))
    }

    fn dial(&self, service: &str) -> String {
        let r = self
            .ctx
            .proxy()
            .post(&format!("/dial/{service}"), &json!({}));
        format!("dial {service}: {}", r.status)
    }

    fn ask(&self, sidecar: &str, text: &str) -> String {
        if let Err(e) = self.ctx.send_loopback(sidecar, text.as_bytes()) {
            return format!("ask failed: {e}");
        }
        let deadline = Instant::now() + Duration::from_secs(5);
        while let Some(left) = deadline.checked_duration_since(Instant::now()) {
            match self.ctx.recv_loopback(left) {
                Some(m) if m.from == sidecar => {
                    return String::from_utf8_lossy(&m.payload).into_owned()
                }
                Some(_) => continue,
                None => break,
            }
        }
        format!("ask {sidecar}: no answer")
    }

    fn answer(&self, text: &str, dialer: bool) -> Option<String> {
        let text = text.trim();
        if dialer {
            let service = text.strip_prefix("dial ").unwrap_or(text).trim();
            return Some(self.dial(service));
        }
        if let Some(rest) = text.strip_prefix("remember ") {
            let Some((k, v)) = rest.split_once('=') else {
                return Some("usage: remember K=V".into());
            };
            let k = k.trim();
            return Some(match self.kv_path(k) {
                None => "no workspace".into(),
                Some(p) => match self.ctx.fs().write(&p, v.as_bytes()) {
                    Ok(()) => format!("ok {k}"),
                    Err(e) => format!("write failed: {e}"),
                },
            });
        }
        if let Some(k) = text.strip_prefix("recall ") {
            let k = k.trim();
            return Some(match self.kv_path(k).map(|p| self.ctx.fs().read(&p)) {
                None => "no workspace".into(),
                Some(Ok(v)) => format!("{k}={}", String::from_utf8_lossy(&v)),
                Some(Err(_)) => format!("{k} unset"),
            });
        }
        if text == "/prompt" {
            let c = self.ctx.thread_context();
            return Some(format!(
                "prompt={} model={} revision={}",
                c["system_prompt"].as_str().unwrap_or(""),
                c["model"].as_str().unwrap_or(""),
                c["revision"]
            ));
        }
        if let Some(n) = text.strip_prefix("busy ") {
            let secs: f64 = n.trim().parse().unwrap_or(0.0);
            if !self.stay_busy(Duration::from_secs_f64(secs.max(0.0))) {
                return None;
            }
            return Some("done".into());
        }
        if let Some(rest) = text.strip_prefix("ask ") {
            let (sidecar, q) = rest.split_once(' ').unwrap_or((rest, ""));
            return Some(self.ask(sidecar, q));
        }
        if let Some(s) = text.strip_prefix("dial ") {
            return Some(self.dial(s.trim()));
        }
        Some(format!("echo: {text}"))
    }

    fn handle(&self, msg: &Value, dialer: bool) -> bool {
        let text = msg["text"].as_str().unwrap_or("");
        if let Some(ws) = &self.workspace {
            let line = format!("{}\t{}\n", msg["author"].as_str().unwrap_or(""), text);
            let _ = self.ctx.fs().append(&format!("{ws}/history.log"), line.as_bytes());
        }
        let Some(reply) = self.answer(text, dialer) else {
            return false;
        };
        self.reply(&reply, msg["message_id"].as_str());
        self.keepalive();
        if !self.busy_after.is_zero() {
            return self.stay_busy(self.busy_after);
        }
        true
    }
}

impl Behavior for EchoAgent {
    fn run(&self, ctx: ContainerContext) {
        let c = ctx.thread_context().clone();
        let busy_after = ctx
            .env()
            .get(AGENT_BUSY_ENV)
            .and_then(|v| v.parse::<f64>().ok())
            .map(|s| Duration::from_secs_f64(s.max(0.0)))
            .unwrap_or_default();
        let session = Session {
            ctx: &ctx,
            thread_id: c["thread_id"].as_str().unwrap_or("").to_string(),
            instance_id: c["instance_id"].as_str().unwrap_or("").to_string(),
            keepalive: Duration::from_secs(c["keepalive_interval_s"].as_u64().unwrap_or(10).max(1)),
            busy_after,
            workspace: ctx.fs().mount_paths().into_iter().next(),
        };
        if let Some(pending) = c["pending"].as_array() {
            for m in pending {
                if !session.handle(m, self.dialer) {
                    return;
                }
            }
        }
        while !ctx.is_stopped() {
            if let Some(m) = ctx.next_message(Duration::from_millis(500)) {
                if !session.handle(&m, self.dialer) {
                    return;
                }
            }
        }
    }
}
