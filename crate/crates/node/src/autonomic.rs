//! Autonomic manager service: monitors HIGH-priority RTT samples, analyzes
//! them with the hysteresis state machine, plans a PEP policy on every state
//! change and executes it through the PEP admin API.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::extract::State;
use axum::http::{header, Method, Request, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use qosmw_core::autonomic::{observe, plan, KnowledgeRecord, Observation, RttSample, StateMachine};
use qosmw_core::metrics::StateChange;
use qosmw_core::model::{AdaptationRules, PepPolicy, RttState};
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;

use crate::clock::ms_since;
use crate::proxy::HttpClient;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            initial_backoff_ms: 50,
            max_backoff_ms: 1_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManagerConfig {
    /// PEP address whose admin API receives new policies.
    pub pep: String,
    pub rules: AdaptationRules,
    pub enter_threshold: u32,
    pub recover_count: u32,
    /// Policy whose delay and scheduling fields every plan keeps.
    pub baseline: PepPolicy,
    /// JSON-lines file the knowledge records are appended to.
    pub knowledge_log: Option<PathBuf>,
    pub retry: RetryPolicy,
    pub sample_buffer: usize,
}

impl ManagerConfig {
    pub fn new(pep: impl Into<String>) -> Self {
        Self {
            pep: pep.into(),
            rules: AdaptationRules::default(),
            enter_threshold: qosmw_core::autonomic::DEFAULT_ENTER_THRESHOLD,
            recover_count: qosmw_core::autonomic::DEFAULT_RECOVER_COUNT,
            baseline: PepPolicy::default(),
            knowledge_log: None,
            retry: RetryPolicy::default(),
            sample_buffer: 4096,
        }
    }
}

/// What the manager learned during its lifetime.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Knowledge {
    pub states: Vec<StateChange>,
    pub records: Vec<KnowledgeRecord>,
    pub executed: u32,
    pub failed: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManagerStatus {
    pub state: RttState,
    pub samples: u64,
    pub states: Vec<StateChange>,
    pub executed: u32,
    pub failed: u32,
}

struct Shared {
    epoch: Instant,
    state: Mutex<RttState>,
    samples: Mutex<u64>,
    knowledge: Mutex<Knowledge>,
    log: Mutex<Option<BufWriter<File>>>,
}

impl Shared {
    fn record(&self, rec: KnowledgeRecord) {
        if let Some(w) = self.log.lock().unwrap().as_mut() {
            let line = serde_json::to_string(&rec).unwrap_or_default();
            if writeln!(w, "{line}").and_then(|_| w.flush()).is_err() {
                tracing::warn!("knowledge log write failed");
            }
        }
        let mut k = self.knowledge.lock().unwrap();
        match &rec {
            KnowledgeRecord::Executed { .. } => k.executed += 1,
            KnowledgeRecord::Failed { .. } => k.failed += 1,
            KnowledgeRecord::Observe { .. } => {}
        }
        k.records.push(rec);
    }

    fn status(&self) -> ManagerStatus {
        let k = self.knowledge.lock().unwrap();
        ManagerStatus {
            state: *self.state.lock().unwrap(),
            samples: *self.samples.lock().unwrap(),
            states: k.states.clone(),
            executed: k.executed,
            failed: k.failed,
        }
    }
}

/// A running manager. Feed it samples through [`ManagerHandle::sender`].
pub struct ManagerHandle {
    samples: mpsc::Sender<RttSample>,
    shared: Arc<Shared>,
    control: JoinHandle<()>,
    executor: JoinHandle<()>,
}

impl ManagerHandle {
    pub fn sender(&self) -> mpsc::Sender<RttSample> {
        self.samples.clone()
    }

    pub fn state(&self) -> RttState {
        *self.shared.state.lock().unwrap()
    }

    pub fn status(&self) -> ManagerStatus {
        self.shared.status()
    }

    /// Admin router: `POST /admin/am/sample`, `GET /admin/am/state`.
    pub fn router(&self) -> Router {
        Router::new()
            .route("/admin/am/sample", post(post_sample))
            .route("/admin/am/state", get(get_state))
            .with_state(AmApi {
                samples: self.samples.clone(),
                shared: self.shared.clone(),
            })
    }

    /// Stops once every sender is gone and pending policy pushes finished.
    pub async fn shutdown(self) -> Knowledge {
        drop(self.samples);
        let _ = self.control.await;
        let _ = self.executor.await;
        if let Some(w) = self.shared.log.lock().unwrap().as_mut() {
            let _ = w.flush();
        }
        self.shared.knowledge.lock().unwrap().clone()
    }
}

#[derive(Clone)]
struct AmApi {
    samples: mpsc::Sender<RttSample>,
    shared: Arc<Shared>,
}

async fn post_sample(State(api): State<AmApi>, Json(sample): Json<RttSample>) -> Response {
    match api.samples.send(sample).await {
        Ok(()) => StatusCode::ACCEPTED.into_response(),
        Err(_) => (StatusCode::SERVICE_UNAVAILABLE, "manager stopped").into_response(),
    }
}

async fn get_state(State(api): State<AmApi>) -> Json<ManagerStatus> {
    Json(api.shared.status())
}

type Planned = Option<(RttState, PepPolicy)>;

pub fn spawn(config: ManagerConfig, client: HttpClient, epoch: Instant) -> std::io::Result<ManagerHandle> {
    let log = match &config.knowledge_log {
        Some(path) => Some(BufWriter::new(File::create(path)?)),
        None => None,
    };
    let shared = Arc::new(Shared {
        epoch,
        state: Mutex::new(RttState::Normal),
        samples: Mutex::new(0),
        knowledge: Mutex::new(Knowledge {
            states: vec![StateChange {
                at_ms: 0.0,
                state: RttState::Normal,
            }],
            ..Default::default()
        }),
        log: Mutex::new(log),
    });
    let (tx, rx) = mpsc::channel(config.sample_buffer.max(1));
    let (plan_tx, plan_rx) = watch::channel::<Planned>(None);
    let control = tokio::spawn(control_loop(config.clone(), shared.clone(), rx, plan_tx));
    let executor = tokio::spawn(execute_loop(config, client, shared.clone(), plan_rx));
    Ok(ManagerHandle {
        samples: tx,
        shared,
        control,
        executor,
    })
}

async fn control_loop(
    config: ManagerConfig,
    shared: Arc<Shared>,
    mut rx: mpsc::Receiver<RttSample>,
    plans: watch::Sender<Planned>,
) {
    let mut sm = StateMachine::new(config.enter_threshold, config.recover_count);
    while let Some(sample) = rx.recv().await {
        *shared.samples.lock().unwrap() += 1;
        let obs = observe(&sample, &mut sm, &config.rules);
        let at_ms = ms_since(shared.epoch);
        let state = sm.current();
        shared.record(KnowledgeRecord::Observe {
            at_ms,
            sample,
            state,
            transition: obs != Observation::Unchanged,
        });
        if let Observation::Transition(next) = obs {
            *shared.state.lock().unwrap() = next;
            shared
                .knowledge
                .lock()
                .unwrap()
                .states
                .push(StateChange { at_ms, state: next });
            match plan(next, &config.rules, &config.baseline) {
                Ok(policy) => {
                    let _ = plans.send(Some((next, policy)));
                }
                Err(e) => shared.record(KnowledgeRecord::Failed {
                    at_ms,
                    state: next,
                    error: e.to_string(),
                    attempts: 0,
                }),
            }
        }
    }
}

async fn execute_loop(
    config: ManagerConfig,
    client: HttpClient,
    shared: Arc<Shared>,
    mut plans: watch::Receiver<Planned>,
) {
    let retry = config.retry;
    while plans.changed().await.is_ok() {
        let Some((state, policy)) = plans.borrow_and_update().clone() else {
            continue;
        };
        let mut backoff = Duration::from_millis(retry.initial_backoff_ms);
        let mut attempts = 0;
        loop {
            attempts += 1;
            match push_policy(&client, &config.pep, &policy).await {
                Ok(()) => {
                    shared.record(KnowledgeRecord::Executed {
                        at_ms: ms_since(shared.epoch),
                        state,
                        policy: policy.clone(),
                        attempts,
                    });
                    break;
                }
                Err(error) => {
                    let superseded = plans.has_changed().unwrap_or(false);
                    if attempts >= retry.max_attempts.max(1) || superseded {
                        shared.record(KnowledgeRecord::Failed {
                            at_ms: ms_since(shared.epoch),
                            state,
                            error: if superseded { format!("superseded after: {error}") } else { error },
                            attempts,
                        });
                        break;
                    }
                    tokio::time::sleep(backoff).await;
                    backoff = (backoff * 2).min(Duration::from_millis(retry.max_backoff_ms));
                }
            }
        }
    }
}

/// `PUT /admin/pep/policy` on `pep`.
pub async fn push_policy(client: &HttpClient, pep: &str, policy: &PepPolicy) -> Result<(), String> {
    let body = serde_json::to_vec(policy).map_err(|e| e.to_string())?;
    let req = Request::builder()
        .method(Method::PUT)
        .uri(format!("http://{pep}/admin/pep/policy"))
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body))
        .map_err(|e| e.to_string())?;
    let resp = tokio::time::timeout(Duration::from_secs(2), client.request(req))
        .await
        .map_err(|_| "timed out".to_string())?
        .map_err(|e| e.to_string())?;
    if resp.status().is_success() {
        Ok(())
    } else {
        Err(format!("PEP answered {}", resp.status()))
    }
}
