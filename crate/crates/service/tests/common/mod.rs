#![allow(dead_code)]

use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::Value;
use tower::ServiceExt;
use urgentflow::engine::{Engine, WorkflowKind, WorkflowStage};
use urgentflow::machine::{MachineConfig, WorkModel};
use urgentflow::platform::Platform;
use urgentflow::simulation::{SimStatus, SimulationRequest};
use urgentflow_service::sources::{Clock, Fetcher, SourceRegistry};
use urgentflow_service::{router, AppState, DataSource};

/// One scripted fetch result: new lines or an error message.
type Reply = Result<Vec<Vec<u8>>, String>;

pub type Log = Arc<Mutex<Vec<(String, Vec<u8>)>>>;

pub struct Harness {
    pub platform: Arc<Platform>,
    pub sources: Arc<SourceRegistry>,
    pub app: Router,
    pub log: Log,
    _root: tempfile::TempDir,
}

/// A fetcher whose results the test scripts per call.
#[derive(Default)]
pub struct Scripted {
    pub replies: Mutex<std::collections::HashMap<String, Vec<Reply>>>,
    pub calls: Mutex<Vec<String>>,
}

impl Scripted {
    pub fn queue(&self, source: &str, reply: Result<Vec<Vec<u8>>, String>) {
        self.replies
            .lock()
            .unwrap()
            .entry(source.to_string())
            .or_default()
            .push(reply);
    }
}

impl Fetcher for Scripted {
    fn fetch(&self, source: &DataSource) -> Result<Vec<Vec<u8>>, String> {
        self.calls.lock().unwrap().push(source.source_id.clone());
        let mut r = self.replies.lock().unwrap();
        let list = r.entry(source.source_id.clone()).or_default();
        if list.is_empty() {
            Ok(Vec::new())
        } else {
            list.remove(0)
        }
    }
}

fn recorder(log: &Log, queue: &str) -> impl Fn(&urgentflow::engine::StageContext<'_>) -> urgentflow::engine::HandlerResult {
    let log = Arc::clone(log);
    let queue = queue.to_string();
    move |ctx| {
        log.lock().unwrap().push((queue.clone(), ctx.payload().to_vec()));
        Ok(())
    }
}

/// Kind `wildfire`: `qa` (entry) and `qb` record payloads; `launch` creates
/// and submits a long synthetic simulation.
pub fn harness(api_key: Option<&str>, fetcher: Option<Arc<Scripted>>) -> Harness {
    let root = tempfile::tempdir().unwrap();
    let log: Log = Arc::default();
    let engine = Engine::new();
    engine
        .register_kind(WorkflowKind::new(
            "wildfire",
            vec![
                WorkflowStage::new("A", "qa", recorder(&log, "qa")),
                WorkflowStage::new("B", "qb", recorder(&log, "qb")),
                WorkflowStage::new("launch", "launch", |ctx| {
                    let p = ctx.service::<Platform>().expect("platform");
                    let sim = p.simulations.create_simulation(
                        SimulationRequest::new(ctx.incident_id().clone(), 4, "01:00:00", "run.sh")
                            .callback(SimStatus::Completed, "qb")
                            .work(WorkModel::Synthetic(Duration::from_secs(600))),
                    )?;
                    p.simulations.submit_simulation(&sim)?;
                    Ok(())
                }),
            ],
            "qa",
        ))
        .unwrap();
    let platform = Platform::new(engine, vec![MachineConfig::new("m1", 8, root.path().join("m1"))]).unwrap();
    let fetcher: Box<dyn Fetcher> = match fetcher {
        Some(f) => Box::new(f),
        None => Box::new(Arc::new(Scripted::default())),
    };
    let sources = Arc::new(
        SourceRegistry::new(Arc::clone(&platform.engine), fetcher).with_max_backoff(Duration::from_secs(8)),
    );
    let tb = Arc::clone(&platform.testbed);
    let clock: Clock = Arc::new(move || tb.now());
    let app = router(AppState {
        platform: Arc::clone(&platform),
        sources: Arc::clone(&sources),
        clock,
        api_key: api_key.map(str::to_string),
    });
    Harness {
        platform,
        sources,
        app,
        log,
        _root: root,
    }
}

impl Harness {
    pub async fn call(&self, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
        self.call_with(method, uri, body, &[]).await
    }

    pub async fn call_with(
        &self,
        method: &str,
        uri: &str,
        body: Option<&str>,
        headers: &[(&str, &str)],
    ) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(uri);
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        let req = req.body(Body::from(body.unwrap_or("").to_string())).unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        (status, value)
    }

    /// Creates and activates a `wildfire` incident; returns its id.
    pub async fn active_incident(&self) -> String {
        let (s, v) = self
            .call("POST", "/incidents", Some(r#"{"name":"storm-7","kind":"wildfire"}"#))
            .await;
        assert_eq!(s, StatusCode::CREATED);
        let id = v["incident_id"].as_str().unwrap().to_string();
        let (s, _) = self.call("POST", &format!("/incidents/{id}/activate"), None).await;
        assert_eq!(s, StatusCode::NO_CONTENT);
        self.platform.engine.run_pending();
        id
    }

    pub fn recorded(&self, queue: &str) -> Vec<Vec<u8>> {
        self.log
            .lock()
            .unwrap()
            .iter()
            .filter(|(q, _)| q == queue)
            .map(|(_, p)| p.clone())
            .collect()
    }
}
