//! PEP service: applies the enabled mechanisms in order (reject, delay,
//! schedule) and forwards survivors to the gateway or balancer.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::extract::{ConnectInfo, Request, State};
use axum::http::{HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use qosmw_core::model::{Mechanism, PepPolicy, PerPriority, PriorityLevel, TaggedRequest, PEP_ACTION_HEADER};
use qosmw_core::pep::{effective_priority, PepAction, PepConfig, PepStats, PriorityQueues, PriorityStats, QueueFull, Rejecter, Verdict};
use serde::{Deserialize, Serialize};
use tokio::sync::{oneshot, Notify, OwnedSemaphorePermit, Semaphore};
use tokio::task::JoinHandle;

use crate::clock;
use crate::cmc::INGRESS_HEADER;
use crate::proxy::{self, error_response, HttpClient, BODY_LIMIT};
use crate::server::{serve, ServerHandle};

/// Middleware processing time in microseconds, excluding deliberate delay and
/// queueing, set on every response the PEP forwards.
pub const OVERHEAD_HEADER: &str = "x-qos-overhead-us";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PepServerConfig {
    /// Gateway or balancer address.
    pub upstream: String,
    #[serde(default)]
    pub policy: PepPolicy,
    #[serde(default, flatten)]
    pub config: PepConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyUpdate {
    pub changed: bool,
    pub policy_updates: u64,
}

type Slot = oneshot::Sender<OwnedSemaphorePermit>;

struct Pep {
    upstream: String,
    client: HttpClient,
    config: PepConfig,
    policy: RwLock<Arc<PepPolicy>>,
    rejecter: Mutex<Rejecter>,
    queues: Mutex<PriorityQueues<Slot>>,
    notify: Notify,
    forward_slots: Arc<Semaphore>,
    delay_slots: Arc<Semaphore>,
    stats: Mutex<PerPriority<PriorityStats>>,
    policy_updates: AtomicU64,
}

impl Pep {
    fn policy(&self) -> Arc<PepPolicy> {
        self.policy.read().unwrap().clone()
    }

    fn count(&self, p: PriorityLevel, f: impl FnOnce(&mut PriorityStats)) {
        f(self.stats.lock().unwrap().get_mut(p));
    }

    fn stats(&self) -> PepStats {
        PepStats {
            per_priority: *self.stats.lock().unwrap(),
            queue_lengths: self.queues.lock().unwrap().lengths(),
            rejecter_window: *self.rejecter.lock().unwrap().counters(),
            policy: (*self.policy()).clone(),
            rejection_mode: self.config.rejection_mode,
            policy_updates: self.policy_updates.load(Ordering::Relaxed),
        }
    }

    fn refuse(&self, p: PriorityLevel, action: PepAction) -> Response {
        self.count(p, |s| match action {
            PepAction::Rejected => s.rejected += 1,
            PepAction::DelayOverflow => s.delay_overflow += 1,
            PepAction::QueueOverflow => s.queue_overflow += 1,
        });
        error_response(
            StatusCode::SERVICE_UNAVAILABLE,
            Some((PEP_ACTION_HEADER, action.as_str())),
            format!("{} by policy enforcement", action.as_str()),
        )
    }
}

/// Hands free forwarder slots to queued requests in scheduling order.
async fn dispatcher(pep: Arc<Pep>) {
    loop {
        let Ok(mut permit) = pep.forward_slots.clone().acquire_owned().await else {
            return;
        };
        loop {
            let discipline = pep.policy().discipline;
            let next = pep.queues.lock().unwrap().dispatch(discipline);
            match next {
                Some((p, slot)) => match slot.send(permit) {
                    Ok(()) => {
                        pep.count(p, |s| s.dispatched += 1);
                        break;
                    }
                    Err(back) => permit = back,
                },
                None => pep.notify.notified().await,
            }
        }
    }
}

async fn handle(
    State(pep): State<Arc<Pep>>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    req: Request,
) -> Response {
    let arrived = Instant::now();
    let (parts, body) = req.into_parts();
    let body = match axum::body::to_bytes(body, BODY_LIMIT).await {
        Ok(b) => b,
        Err(e) => return (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
    };
    let target = parts
        .uri
        .path_and_query()
        .map(|pq| pq.as_str().to_string())
        .unwrap_or_else(|| "/".into());
    let req = TaggedRequest::new(
        parts.method,
        target,
        parts.headers,
        body,
        &peer.to_string(),
        clock::monotonic_ns(),
    );
    let priority = effective_priority(&req);
    pep.count(priority, |s| s.seen += 1);
    let policy = pep.policy();
    let mut held = Duration::ZERO;
    let mut applied: Vec<&str> = Vec::new();
    let mut slot: Option<OwnedSemaphorePermit> = None;

    for m in qosmw_core::pep::control(&policy) {
        match m {
            Mechanism::Reject => {
                let pct = *policy.rejection.get(priority);
                if pep.rejecter.lock().unwrap().decide(priority, pct) == Verdict::Rejected {
                    return pep.refuse(priority, PepAction::Rejected);
                }
            }
            Mechanism::Delay => {
                let d = policy.delay_for(priority);
                if d.is_zero() {
                    continue;
                }
                let Ok(_permit) = pep.delay_slots.clone().try_acquire_owned() else {
                    return pep.refuse(priority, PepAction::DelayOverflow);
                };
                let t = Instant::now();
                tokio::time::sleep(d).await;
                held += t.elapsed();
                pep.count(priority, |s| s.delayed += 1);
                applied.push("delayed");
            }
            Mechanism::Schedule => {
                let (tx, rx) = oneshot::channel();
                let queued = pep.queues.lock().unwrap().enqueue(priority, tx, &policy.weights);
                if let Err(QueueFull(_)) = queued {
                    return pep.refuse(priority, PepAction::QueueOverflow);
                }
                pep.count(priority, |s| s.queued += 1);
                pep.notify.notify_one();
                let t = Instant::now();
                match rx.await {
                    Ok(permit) => slot = Some(permit),
                    Err(_) => {
                        return error_response(StatusCode::SERVICE_UNAVAILABLE, None, "PEP shutting down".into())
                    }
                }
                held += t.elapsed();
                applied.push("scheduled");
            }
        }
    }

    let now_us = clock::wall_us();
    let ingress_us = req
        .headers()
        .get(INGRESS_HEADER)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok())
        .filter(|&us| us <= now_us)
        .unwrap_or_else(|| now_us.saturating_sub(arrived.elapsed().as_micros() as u64));
    let overhead_us = now_us
        .saturating_sub(ingress_us)
        .saturating_sub(held.as_micros() as u64);

    let (method, target, headers, body) = req.into_parts();
    let result = proxy::forward(&pep.client, &pep.upstream, method, &target, headers, body).await;
    drop(slot);
    match result {
        Ok(resp) => {
            pep.count(priority, |s| s.forwarded += 1);
            let mut resp = proxy::relay(resp);
            let headers = resp.headers_mut();
            headers.insert(HeaderName::from_static(OVERHEAD_HEADER), HeaderValue::from(overhead_us));
            if !applied.is_empty() {
                if let Ok(v) = HeaderValue::from_str(&applied.join(",")) {
                    headers.insert(HeaderName::from_static(PEP_ACTION_HEADER), v);
                }
            }
            resp
        }
        Err(e) => proxy::bad_gateway(&e),
    }
}

async fn put_policy(State(pep): State<Arc<Pep>>, Json(policy): Json<PepPolicy>) -> Response {
    let policy = match policy.validate() {
        Ok(p) => p,
        Err(e) => return (StatusCode::UNPROCESSABLE_ENTITY, e.to_string()).into_response(),
    };
    let changed = {
        let mut cur = pep.policy.write().unwrap();
        if **cur == policy {
            false
        } else {
            *cur = Arc::new(policy);
            pep.rejecter.lock().unwrap().reset();
            pep.policy_updates.fetch_add(1, Ordering::Relaxed);
            true
        }
    };
    if changed {
        pep.notify.notify_one();
    }
    Json(PolicyUpdate {
        changed,
        policy_updates: pep.policy_updates.load(Ordering::Relaxed),
    })
    .into_response()
}

async fn get_policy(State(pep): State<Arc<Pep>>) -> Json<PepPolicy> {
    Json((*pep.policy()).clone())
}

async fn stats(State(pep): State<Arc<Pep>>) -> Json<PepStats> {
    Json(pep.stats())
}

/// Router plus the dispatcher task that must run alongside it.
pub fn router(config: PepServerConfig, client: HttpClient) -> qosmw_core::Result<(Router, JoinHandle<()>)> {
    let policy = config.policy.validate()?;
    let pep = Arc::new(Pep {
        upstream: config.upstream,
        client,
        policy: RwLock::new(Arc::new(policy)),
        rejecter: Mutex::new(Rejecter::new(config.config.rejection_mode)),
        queues: Mutex::new(PriorityQueues::new(config.config.queue_capacity)),
        notify: Notify::new(),
        forward_slots: Arc::new(Semaphore::new(config.config.forwarder_concurrency.max(1))),
        delay_slots: Arc::new(Semaphore::new(config.config.delay_capacity)),
        stats: Mutex::new(PerPriority::default()),
        policy_updates: AtomicU64::new(0),
        config: config.config,
    });
    let task = tokio::spawn(dispatcher(pep.clone()));
    let router = Router::new()
        .route("/admin/pep/policy", get(get_policy).put(put_policy))
        .route("/admin/pep/stats", get(stats))
        .fallback(handle)
        .with_state(pep);
    Ok((router, task))
}

/// A running PEP: HTTP server plus dispatcher.
#[derive(Debug)]
pub struct PepHandle {
    pub server: ServerHandle,
    dispatcher: JoinHandle<()>,
}

impl PepHandle {
    pub fn addr(&self) -> std::net::SocketAddr {
        self.server.addr()
    }

    pub async fn shutdown(self) {
        self.server.shutdown().await;
        self.dispatcher.abort();
    }
}

pub async fn spawn(listen: &str, config: PepServerConfig, client: HttpClient) -> Result<PepHandle, crate::runner::RunError> {
    let (router, dispatcher) = router(config, client)?;
    let server = serve(listen, router)
        .await
        .map_err(|e| crate::runner::RunError::Startup(format!("PEP on {listen}: {e}")))?;
    Ok(PepHandle { server, dispatcher })
}
