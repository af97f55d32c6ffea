//! Admin CLI for an agynlite gateway.
//!
//! Exit codes: 0 success (or an empty plan), 1 error, 2 non-empty plan
//! (or a denied `tuple check`).

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use agynlite::configctl::{self, PlanOptions};
use agynlite::gateway::{Api, ApiResponse, HttpClient};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "agynctl", version, about = "Manage agents, access and config through the gateway")]
struct Cli {
    /// Gateway base URL.
    #[arg(long, env = "AGYNLITE_ADDR", default_value = "http://127.0.0.1:7420", global = true)]
    addr: String,
    /// User bearer token.
    #[arg(long, env = "AGYNLITE_TOKEN", hide_env_values = true, global = true)]
    token: Option<String>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Diff definition files against the live registry.
    Plan {
        #[arg(short = 'f', long = "file")]
        path: PathBuf,
        #[arg(long)]
        allow_delete: bool,
    },
    /// Plan, confirm, and apply.
    Apply {
        #[arg(short = 'f', long = "file")]
        path: PathBuf,
        #[arg(long)]
        allow_delete: bool,
        #[arg(long)]
        auto_approve: bool,
    },
    Agents {
        #[command(subcommand)]
        cmd: ListOnly,
    },
    Instances {
        #[command(subcommand)]
        cmd: InstancesCmd,
    },
    Tuple {
        #[command(subcommand)]
        cmd: TupleCmd,
    },
    Identity {
        #[command(subcommand)]
        cmd: ListOnly,
    },
    Policy {
        #[command(subcommand)]
        cmd: PolicyCmd,
    },
    Thread {
        #[command(subcommand)]
        cmd: ThreadCmd,
    },
    Events {
        #[command(subcommand)]
        cmd: EventsCmd,
    },
}

#[derive(Subcommand)]
enum ListOnly {
    List,
}

#[derive(Subcommand)]
enum InstancesCmd {
    List {
        /// Keep printing state changes.
        #[arg(long)]
        watch: bool,
    },
}

#[derive(Subcommand)]
enum TupleCmd {
    /// `object#relation@subject`, e.g. `agent:a#maintainer@user:bob`.
    Write { tuple: String },
    Delete { tuple: String },
    /// `object#permission@subject`; exits 2 when denied.
    Check { tuple: String },
    List,
}

#[derive(Subcommand)]
enum PolicyCmd {
    List,
    /// Allow identities whose attributes match every selector pair to dial
    /// the listed services.
    Put {
        id: String,
        #[arg(long = "selector", value_name = "KEY=VALUE")]
        selector: Vec<String>,
        #[arg(long = "service", required = true)]
        services: Vec<String>,
    },
    Delete { id: String },
}

#[derive(Subcommand)]
enum ThreadCmd {
    Create { agent: String },
    Send { thread: String, text: String },
    Show { thread: String },
}

#[derive(Subcommand)]
enum EventsCmd {
    /// Follow one or more topics.
    Tail {
        #[arg(required = true)]
        topics: Vec<String>,
    },
}

struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

type Outcome = Result<u8, Failure>;

fn expect_ok(r: ApiResponse) -> Result<Value, Failure> {
    if r.is_success() {
        Ok(r.body)
    } else {
        Err(Failure(format!(
            "{} {}: {}",
            r.status,
            r.code().unwrap_or("error"),
            r.body["message"].as_str().unwrap_or_default()
        )))
    }
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

fn split_tuple(s: &str) -> Result<(String, String, String), Failure> {
    let (obj, rest) = s
        .split_once('#')
        .ok_or_else(|| Failure(format!("{s:?}: expected object#permission@subject")))?;
    let (perm, subj) = rest
        .split_once('@')
        .ok_or_else(|| Failure(format!("{s:?}: expected object#permission@subject")))?;
    Ok((obj.into(), perm.into(), subj.into()))
}

fn confirm() -> bool {
    print!("Apply these changes? Only 'yes' is accepted: ");
    let _ = std::io::stdout().flush();
    let mut line = String::new();
    std::io::stdin().lock().read_line(&mut line).is_ok() && line.trim() == "yes"
}

fn instance_row(i: &Value, now_ms: u64) -> String {
    let last = i["last_active_ts"].as_u64().unwrap_or(0);
    let idle_s = i["idle_timeout_s"].as_u64().unwrap_or(0);
    let age = now_ms.saturating_sub(last) / 1000;
    format!(
        "{:<38} {:<16} {:<38} {:<13} {:>4} {:>6}s {:>6}s",
        i["instance_id"].as_str().unwrap_or(""),
        i["agent_id"].as_str().unwrap_or(""),
        i["thread_id"].as_str().unwrap_or(""),
        i["state"].as_str().unwrap_or(""),
        i["definition_revision"].as_u64().unwrap_or(0),
        age,
        idle_s.saturating_sub(age),
    )
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn run(cli: Cli) -> Outcome {
    let mut client = HttpClient::new(&cli.addr)?;
    if let Some(t) = &cli.token {
        client = client.with_bearer(t);
    }
    let api: &dyn Api = &client;
    match cli.cmd {
        Cmd::Plan { path, allow_delete } => {
            let desired = configctl::parse(&configctl::load_path(&path)?)?;
            let live = configctl::fetch_live(api)?;
            let plan = configctl::plan(&desired, &live, PlanOptions { allow_delete });
            if cli.json {
                print_json(&plan.to_json());
            } else {
                print!("{}", plan.render_human());
            }
            Ok(if plan.is_empty() { 0 } else { 2 })
        }
        Cmd::Apply {
            path,
            allow_delete,
            auto_approve,
        } => {
            let desired = configctl::parse(&configctl::load_path(&path)?)?;
            let live = configctl::fetch_live(api)?;
            let plan = configctl::plan(&desired, &live, PlanOptions { allow_delete });
            if !cli.json {
                print!("{}", plan.render_human());
            }
            if plan.is_empty() {
                if cli.json {
                    print_json(&json!({"plan": plan.to_json(), "report": null}));
                }
                return Ok(0);
            }
            if !auto_approve && !confirm() {
                eprintln!("Apply cancelled.");
                return Ok(1);
            }
            let report = configctl::apply(api, &plan);
            if cli.json {
                print_json(&json!({"plan": plan.to_json(), "report": report}));
            } else {
                print!("{}", report.render_human());
            }
            Ok(if report.is_success() { 0 } else { 1 })
        }
        Cmd::Agents { cmd: ListOnly::List } => {
            let body = expect_ok(api.get("/agents")?)?;
            if cli.json {
                print_json(&body);
            } else {
                println!("{:<24} {:>8} {:<16} {:>6}", "AGENT", "REVISION", "MODEL", "IDLE_S");
                for a in body["agents"].as_array().into_iter().flatten() {
                    println!(
                        "{:<24} {:>8} {:<16} {:>6}",
                        a["agent_id"].as_str().unwrap_or(""),
                        a["revision"].as_u64().unwrap_or(0),
                        a["model"].as_str().unwrap_or(""),
                        a["idle_timeout_s"].as_u64().unwrap_or(0),
                    );
                }
            }
            Ok(0)
        }
        Cmd::Instances {
            cmd: InstancesCmd::List { watch },
        } => {
            let body = expect_ok(api.get("/instances")?)?;
            if cli.json {
                print_json(&body);
            } else {
                println!(
                    "{:<38} {:<16} {:<38} {:<13} {:>4} {:>7} {:>7}",
                    "INSTANCE", "AGENT", "THREAD", "STATE", "REV", "AGE", "IDLE_IN"
                );
                let now = now_ms();
                for i in body["instances"].as_array().into_iter().flatten() {
                    println!("{}", instance_row(i, now));
                }
            }
            if watch {
                client.stream_events(&["instance.state"], |_, ev| {
                    if cli.json {
                        println!("{ev}");
                    } else {
                        let p = &ev["payload"];
                        println!(
                            "{} {} {} -> {}",
                            p["instance_id"].as_str().unwrap_or(""),
                            p["agent_id"].as_str().unwrap_or(""),
                            p["thread_id"].as_str().unwrap_or(""),
                            p["state"].as_str().unwrap_or(""),
                        );
                    }
                    std::io::stdout().flush().is_ok()
                })?;
            }
            Ok(0)
        }
        Cmd::Tuple { cmd } => match cmd {
            TupleCmd::Write { tuple } => {
                let b = expect_ok(api.post("/tuples", &json!({"tuple": tuple}))?)?;
                println!("wrote {}", b["tuple"].as_str().unwrap_or(&tuple));
                Ok(0)
            }
            TupleCmd::Delete { tuple } => {
                let b = expect_ok(api.call("DELETE", "/tuples", Some(&json!({"tuple": tuple})), &[])?)?;
                println!("deleted {}", b["tuple"].as_str().unwrap_or(&tuple));
                Ok(0)
            }
            TupleCmd::Check { tuple } => {
                let (object, permission, subject) = split_tuple(&tuple)?;
                let b = expect_ok(api.post(
                    "/tuples/check",
                    &json!({"object": object, "permission": permission, "subject": subject}),
                )?)?;
                let allowed = b["allowed"].as_bool().unwrap_or(false);
                if cli.json {
                    print_json(&b);
                } else {
                    println!("{}", if allowed { "allowed" } else { "denied" });
                }
                Ok(if allowed { 0 } else { 2 })
            }
            TupleCmd::List => {
                let b = expect_ok(api.get("/tuples")?)?;
                if cli.json {
                    print_json(&b);
                } else {
                    for t in b["tuples"].as_array().into_iter().flatten() {
                        println!("{}", t.as_str().unwrap_or(""));
                    }
                }
                Ok(0)
            }
        },
        Cmd::Identity { cmd: ListOnly::List } => {
            let b = expect_ok(api.get("/identities")?)?;
            if cli.json {
                print_json(&b);
            } else {
                println!("{:<40} {:<18} {:<38} LEASE", "IDENTITY", "CLASS", "SUBJECT");
                for i in b["identities"].as_array().into_iter().flatten() {
                    println!(
                        "{:<40} {:<18} {:<38} {}",
                        i["identity_id"].as_str().unwrap_or(""),
                        i["class"].as_str().unwrap_or(""),
                        i["subject"].as_str().unwrap_or(""),
                        i["lease_id"].as_str().unwrap_or("-"),
                    );
                }
            }
            Ok(0)
        }
        Cmd::Policy { cmd } => match cmd {
            PolicyCmd::List => {
                print_json(&expect_ok(api.get("/policies")?)?);
                Ok(0)
            }
            PolicyCmd::Put { id, selector, services } => {
                let mut sel = serde_json::Map::new();
                for kv in selector {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| Failure(format!("selector {kv:?}: expected KEY=VALUE")))?;
                    sel.insert(k.into(), json!(v));
                }
                let body = json!({"selector": sel, "services": services});
                print_json(&expect_ok(api.call("PUT", &format!("/policies/{id}"), Some(&body), &[])?)?);
                Ok(0)
            }
            PolicyCmd::Delete { id } => {
                expect_ok(api.call("DELETE", &format!("/policies/{id}"), None, &[])?)?;
                println!("deleted policy {id}");
                Ok(0)
            }
        },
        Cmd::Thread { cmd } => match cmd {
            ThreadCmd::Create { agent } => {
                let b = expect_ok(api.post("/threads", &json!({"agent_id": agent}))?)?;
                if cli.json {
                    print_json(&b);
                } else {
                    println!("{}", b["thread_id"].as_str().unwrap_or(""));
                }
                Ok(0)
            }
            ThreadCmd::Send { thread, text } => {
                let b = expect_ok(api.post(&format!("/threads/{thread}/messages"), &json!({"text": text}))?)?;
                if cli.json {
                    print_json(&b);
                } else {
                    println!("{}", b["message_id"].as_str().unwrap_or(""));
                }
                Ok(0)
            }
            ThreadCmd::Show { thread } => {
                let b = expect_ok(api.get(&format!("/threads/{thread}/messages"))?)?;
                if cli.json {
                    print_json(&b);
                } else {
                    for m in b["messages"].as_array().into_iter().flatten() {
                        println!(
                            "{:>4} {:<24} {}",
                            m["seq"].as_u64().unwrap_or(0),
                            m["author"].as_str().unwrap_or(""),
                            m["text"].as_str().unwrap_or("")
                        );
                    }
                }
                Ok(0)
            }
        },
        Cmd::Events {
            cmd: EventsCmd::Tail { topics },
        } => {
            let refs: Vec<&str> = topics.iter().map(String::as_str).collect();
            client.stream_events(&refs, |topic, ev| {
                if cli.json {
                    println!("{ev}");
                } else {
                    println!("{topic} {} {}", ev["id"].as_str().unwrap_or(""), ev["payload"]);
                }
                std::io::stdout().flush().is_ok()
            })?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(Failure(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
