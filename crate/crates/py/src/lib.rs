//! Python bindings: run a platform in-process, talk to its gateway, plan and
//! apply definitions, and evaluate relationship checks.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use agynlite::authz::{Authz, ObjectRef, RelationTuple, Subject};
use agynlite::configctl::{self, Document, PlanOptions};
use agynlite::gateway::http::HttpServer;
use agynlite::gateway::{ApiRequest, LocalClient, UserTable};
use agynlite::orchestrator::load_instances;
use agynlite::platform::{Platform as CorePlatform, PlatformConfig};
use agynlite::runner::BUILTIN_BEHAVIORS;
use agynlite::store::Store;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;
use serde_json::Value;

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (v.to_string(),))
}

fn from_py(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn documents(texts: Vec<String>) -> Vec<Document> {
    texts
        .into_iter()
        .enumerate()
        .map(|(i, t)| Document::new(format!("<doc {i}>"), t))
        .collect()
}

/// A running control plane with a simulated runner.
#[pyclass(module = "agynlite")]
struct Platform {
    inner: Arc<CorePlatform>,
    server: Mutex<Option<HttpServer>>,
}

#[pymethods]
impl Platform {
    /// `users_json` is the `{"users": [...]}` document. `master_key` is 64
    /// hex characters; omitted, a random key is used.
    #[new]
    #[pyo3(signature = (runner_root, users_json, master_key=None, data_dir=None))]
    fn new(
        py: Python<'_>,
        runner_root: PathBuf,
        users_json: &str,
        master_key: Option<&str>,
        data_dir: Option<PathBuf>,
    ) -> PyResult<Self> {
        let users = UserTable::from_json(users_json).map_err(value_err)?;
        let key: [u8; 32] = match master_key {
            Some(h) => hex::decode(h)
                .ok()
                .and_then(|b| b.try_into().ok())
                .ok_or_else(|| value_err("master_key must be 64 hex characters"))?,
            None => {
                let os = py.import("os")?;
                let raw: Vec<u8> = os.call_method1("urandom", (32,))?.extract()?;
                raw.try_into().map_err(|_| runtime_err("urandom"))?
            }
        };
        let mut cfg = PlatformConfig::new(runner_root, key, users);
        cfg.data_dir = data_dir;
        let inner = py
            .detach(move || CorePlatform::start(cfg))
            .map_err(runtime_err)?;
        Ok(Self {
            inner,
            server: Mutex::new(None),
        })
    }

    /// One gateway call. Returns `(status, body)`.
    #[pyo3(signature = (method, path, token=None, body=None, identity_token=None))]
    fn request<'py>(
        &self,
        py: Python<'py>,
        method: &str,
        path: &str,
        token: Option<&str>,
        body: Option<&Bound<'py, PyAny>>,
        identity_token: Option<&str>,
    ) -> PyResult<(u16, Bound<'py, PyAny>)> {
        let mut req = ApiRequest::new(method, path);
        if let Some(t) = token {
            req = req.bearer(t);
        }
        if let Some(t) = identity_token {
            req = req.identity_token(t);
        }
        if let Some(b) = body {
            req.body = from_py(py, b)?;
        }
        let gw = self.inner.gateway().clone();
        let r = py.detach(move || gw.handle(&req));
        Ok((r.status, to_py(py, &r.body)?))
    }

    /// Serves the gateway over HTTP; returns the base URL.
    #[pyo3(signature = (addr="127.0.0.1:0"))]
    fn serve(&self, addr: &str) -> PyResult<String> {
        let mut slot = self.server.lock().map_err(runtime_err)?;
        if let Some(s) = slot.as_ref() {
            return Ok(s.base_url());
        }
        let s = HttpServer::start(self.inner.gateway().clone(), addr).map_err(runtime_err)?;
        let url = s.base_url();
        *slot = Some(s);
        Ok(url)
    }

    fn instances<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let all = load_instances(&self.inner.services().store).map_err(runtime_err)?;
        to_py(py, &serde_json::to_value(all).map_err(runtime_err)?)
    }

    /// Host directory backing a volume, named `agent/thread/volume`.
    fn volume_dir(&self, name: &str) -> String {
        self.inner.sim_runner().volume_dir(name).display().to_string()
    }

    fn kill_orchestrator(&self, py: Python<'_>) {
        let p = self.inner.clone();
        py.detach(move || p.kill_orchestrator());
    }

    /// Restarts the orchestrator; returns the recovery actions taken.
    fn restart_orchestrator(&self, py: Python<'_>) -> PyResult<Vec<String>> {
        let p = self.inner.clone();
        let actions = py.detach(move || p.restart_orchestrator()).map_err(runtime_err)?;
        Ok(actions.iter().map(|a| format!("{a:?}")).collect())
    }

    /// Plans `texts` (definition documents) against live state as `token`.
    /// Returns `(plan, rendered)`.
    #[pyo3(signature = (texts, token, allow_delete=false))]
    fn plan<'py>(
        &self,
        py: Python<'py>,
        texts: Vec<String>,
        token: &str,
        allow_delete: bool,
    ) -> PyResult<(Bound<'py, PyAny>, String)> {
        let desired = configctl::parse(&documents(texts)).map_err(value_err)?;
        let api = LocalClient::new(self.inner.gateway().clone(), token);
        let live = configctl::fetch_live(&api).map_err(runtime_err)?;
        let plan = configctl::plan(&desired, &live, PlanOptions { allow_delete });
        Ok((to_py(py, &plan.to_json())?, plan.render_human()))
    }

    /// Plans and applies in one step; returns the apply report.
    #[pyo3(signature = (texts, token, allow_delete=false))]
    fn apply<'py>(
        &self,
        py: Python<'py>,
        texts: Vec<String>,
        token: &str,
        allow_delete: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let desired = configctl::parse(&documents(texts)).map_err(value_err)?;
        let api = LocalClient::new(self.inner.gateway().clone(), token);
        let live = configctl::fetch_live(&api).map_err(runtime_err)?;
        let plan = configctl::plan(&desired, &live, PlanOptions { allow_delete });
        let report = py.detach(move || configctl::apply(&api, &plan));
        to_py(py, &serde_json::to_value(report).map_err(runtime_err)?)
    }

    fn shutdown(&self, py: Python<'_>) {
        if let Ok(mut s) = self.server.lock() {
            if let Some(server) = s.take() {
                py.detach(move || server.shutdown());
            }
        }
        let p = self.inner.clone();
        py.detach(move || p.shutdown());
    }
}

/// In-memory relationship store.
#[pyclass(module = "agynlite", name = "Authz")]
struct PyAuthz {
    inner: Authz,
}

#[pymethods]
impl PyAuthz {
    #[new]
    fn new() -> PyResult<Self> {
        let inner = Authz::open(Arc::new(Store::in_memory())).map_err(runtime_err)?;
        Ok(Self { inner })
    }

    /// `object#relation@subject`
    fn write(&self, tuple: &str) -> PyResult<()> {
        let t: RelationTuple = tuple.parse().map_err(value_err)?;
        self.inner.write_tuple(&t).map_err(runtime_err)
    }

    fn delete(&self, tuple: &str) -> PyResult<()> {
        let t: RelationTuple = tuple.parse().map_err(value_err)?;
        self.inner.delete_tuple(&t).map_err(runtime_err)
    }

    fn check(&self, object: &str, permission: &str, subject: &str) -> PyResult<bool> {
        let o: ObjectRef = object.parse().map_err(value_err)?;
        let s: Subject = subject.parse().map_err(value_err)?;
        self.inner.check(&o, permission, &s).map_err(runtime_err)
    }

    fn tuples(&self) -> Vec<String> {
        self.inner.tuples().iter().map(|t| t.to_string()).collect()
    }
}

/// Parses and expands definition documents. Secret values are not returned.
#[pyfunction]
fn parse_definitions<'py>(py: Python<'py>, texts: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    let d = configctl::parse(&documents(texts)).map_err(value_err)?;
    let v = serde_json::json!({
        "agents": d.agents,
        "secrets": d.secrets.keys().collect::<Vec<_>>(),
    });
    to_py(py, &v)
}

#[pymodule]
#[pyo3(name = "agynlite")]
fn agynlite_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Platform>()?;
    m.add_class::<PyAuthz>()?;
    m.add_function(wrap_pyfunction!(parse_definitions, m)?)?;
    m.add("BEHAVIORS", BUILTIN_BEHAVIORS.to_vec())?;
    Ok(())
}
