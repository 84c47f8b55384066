//! Stub IoT platform: `POST /{application}/data` creates a resource after a
//! configurable service time on a bounded worker pool.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use qosmw_core::model::{GatewayConfig, GW_ACTION_HEADER};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use crate::proxy::error_response;
use crate::server::{serve, ServerHandle};

#[derive(Debug)]
struct PoolState {
    workers: usize,
    busy: usize,
    waiting: VecDeque<oneshot::Sender<()>>,
    queue_capacity: usize,
    peak_busy: usize,
}

/// Fixed set of workers with a FIFO accept queue in front.
#[derive(Debug)]
pub struct WorkerPool {
    state: Mutex<PoolState>,
}

/// Returned when the accept queue is full.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Overflow;

/// Holds one worker until dropped.
#[derive(Debug)]
pub struct WorkerPermit {
    pool: Arc<WorkerPool>,
}

impl Drop for WorkerPermit {
    fn drop(&mut self) {
        self.pool.release();
    }
}

// Gives back a worker that was handed over after the waiting request was cancelled.
struct Waiting {
    rx: Option<oneshot::Receiver<()>>,
    pool: Arc<WorkerPool>,
}

impl Drop for Waiting {
    fn drop(&mut self) {
        if let Some(mut rx) = self.rx.take() {
            rx.close();
            if rx.try_recv().is_ok() {
                self.pool.release();
            }
        }
    }
}

impl WorkerPool {
    pub fn new(workers: usize, queue_capacity: usize) -> Arc<Self> {
        Arc::new(Self {
            state: Mutex::new(PoolState {
                workers,
                busy: 0,
                waiting: VecDeque::new(),
                queue_capacity,
                peak_busy: 0,
            }),
        })
    }

    /// Waits for a worker in arrival order.
    pub async fn acquire(self: &Arc<Self>) -> Result<WorkerPermit, Overflow> {
        let rx = {
            let mut st = self.state.lock().unwrap();
            if st.busy < st.workers && st.waiting.is_empty() {
                st.busy += 1;
                st.peak_busy = st.peak_busy.max(st.busy);
                return Ok(WorkerPermit { pool: self.clone() });
            }
            st.waiting.retain(|tx| !tx.is_closed());
            if st.waiting.len() >= st.queue_capacity {
                return Err(Overflow);
            }
            let (tx, rx) = oneshot::channel();
            st.waiting.push_back(tx);
            rx
        };
        let mut waiting = Waiting {
            rx: Some(rx),
            pool: self.clone(),
        };
        if let Some(rx) = waiting.rx.as_mut() {
            let _ = rx.await;
        }
        waiting.rx = None;
        Ok(WorkerPermit { pool: self.clone() })
    }

    fn release(&self) {
        let mut st = self.state.lock().unwrap();
        st.busy -= 1;
        Self::hand_over(&mut st);
    }

    fn hand_over(st: &mut PoolState) {
        while st.busy < st.workers {
            let Some(tx) = st.waiting.pop_front() else { break };
            st.busy += 1;
            if tx.send(()).is_err() {
                st.busy -= 1;
            } else {
                st.peak_busy = st.peak_busy.max(st.busy);
            }
        }
    }

    /// Changes the worker count. Requests in service are not interrupted.
    pub fn resize(&self, workers: usize) {
        let mut st = self.state.lock().unwrap();
        st.workers = workers;
        Self::hand_over(&mut st);
    }

    pub fn workers(&self) -> usize {
        self.state.lock().unwrap().workers
    }

    pub fn busy(&self) -> usize {
        self.state.lock().unwrap().busy
    }

    pub fn queued(&self) -> usize {
        self.state.lock().unwrap().waiting.len()
    }

    /// Highest number of requests ever in service at once.
    pub fn peak_busy(&self) -> usize {
        self.state.lock().unwrap().peak_busy
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub workers: usize,
    pub in_service: usize,
    pub peak_in_service: usize,
    pub queued: usize,
    pub accepted: u64,
    pub served: u64,
    pub overflowed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WorkersBody {
    pub workers: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub resource_id: String,
    pub application: String,
}

struct Gateway {
    pool: Arc<WorkerPool>,
    config: GatewayConfig,
    rng: Mutex<StdRng>,
    accepted: AtomicU64,
    served: AtomicU64,
    overflowed: AtomicU64,
}

impl Gateway {
    fn service_time(&self) -> Duration {
        let base = self.config.service_time_ms as i64;
        let j = self.config.service_time_jitter_ms as i64;
        let ms = if j == 0 {
            base
        } else {
            base + self.rng.lock().unwrap().random_range(-j..=j)
        };
        Duration::from_millis(ms.max(0) as u64)
    }

    fn stats(&self) -> GatewayStats {
        let st = self.pool.state.lock().unwrap();
        GatewayStats {
            workers: st.workers,
            in_service: st.busy,
            peak_in_service: st.peak_busy,
            queued: st.waiting.len(),
            accepted: self.accepted.load(Ordering::Relaxed),
            served: self.served.load(Ordering::Relaxed),
            overflowed: self.overflowed.load(Ordering::Relaxed),
        }
    }
}

async fn create(State(gw): State<Arc<Gateway>>, Path(application): Path<String>) -> Response {
    let permit = match gw.pool.acquire().await {
        Ok(p) => p,
        Err(Overflow) => {
            gw.overflowed.fetch_add(1, Ordering::Relaxed);
            return error_response(
                StatusCode::SERVICE_UNAVAILABLE,
                Some((GW_ACTION_HEADER, "overflow")),
                "accept queue full".into(),
            );
        }
    };
    gw.accepted.fetch_add(1, Ordering::Relaxed);
    tokio::time::sleep(gw.service_time()).await;
    let n = gw.served.fetch_add(1, Ordering::Relaxed) + 1;
    drop(permit);
    let body = Created {
        resource_id: format!("{application}-{n}"),
        application,
    };
    (StatusCode::CREATED, Json(body)).into_response()
}

async fn set_workers(State(gw): State<Arc<Gateway>>, Json(body): Json<WorkersBody>) -> Response {
    if body.workers == 0 {
        return (StatusCode::BAD_REQUEST, "workers must be >= 1").into_response();
    }
    gw.pool.resize(body.workers);
    Json(gw.stats()).into_response()
}

async fn stats(State(gw): State<Arc<Gateway>>) -> Json<GatewayStats> {
    Json(gw.stats())
}

/// Builds the gateway router. The returned pool can be resized directly.
pub fn router(config: GatewayConfig) -> qosmw_core::Result<(Router, Arc<WorkerPool>)> {
    config.validate()?;
    let pool = WorkerPool::new(config.worker_pool_size as usize, config.accept_queue_capacity);
    let gw = Arc::new(Gateway {
        pool: pool.clone(),
        rng: Mutex::new(StdRng::seed_from_u64(config.seed)),
        config,
        accepted: AtomicU64::new(0),
        served: AtomicU64::new(0),
        overflowed: AtomicU64::new(0),
    });
    let router = Router::new()
        .route("/{application}/data", post(create))
        .route("/admin/gw/workers", put(set_workers))
        .route("/admin/gw/stats", get(stats))
        .with_state(gw);
    Ok((router, pool))
}

pub async fn spawn(listen: &str, config: GatewayConfig) -> Result<(ServerHandle, Arc<WorkerPool>), crate::runner::RunError> {
    let (router, pool) = router(config)?;
    let handle = serve(listen, router)
        .await
        .map_err(|e| crate::runner::RunError::Startup(format!("gateway on {listen}: {e}")))?;
    Ok((handle, pool))
}

#[derive(Debug, thiserror::Error)]
#[error("gateway {address} unreachable: {reason}")]
pub struct GatewayUnreachable {
    pub address: String,
    pub reason: String,
}

/// `PUT /admin/gw/workers` on the gateway at `address`.
pub async fn resize_workers(
    client: &crate::proxy::HttpClient,
    address: &str,
    workers: usize,
) -> Result<GatewayStats, GatewayUnreachable> {
    let fail = |reason: String| GatewayUnreachable {
        address: address.to_string(),
        reason,
    };
    let body = serde_json::to_vec(&WorkersBody { workers }).map_err(|e| fail(e.to_string()))?;
    let mut headers = axum::http::HeaderMap::new();
    headers.insert(
        axum::http::header::CONTENT_TYPE,
        axum::http::HeaderValue::from_static("application/json"),
    );
    let resp = crate::proxy::forward(
        client,
        address,
        axum::http::Method::PUT,
        "/admin/gw/workers",
        headers,
        body.into(),
    )
    .await
    .map_err(|e| fail(e.to_string()))?;
    if !resp.status().is_success() {
        return Err(fail(format!("answered {}", resp.status())));
    }
    serde_json::from_slice(resp.body()).map_err(|e| fail(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn fifo_handover() {
        let pool = WorkerPool::new(1, 10);
        let first = pool.acquire().await.unwrap();
        let order = Arc::new(Mutex::new(Vec::new()));
        let mut tasks = Vec::new();
        for i in 0..5 {
            let pool = pool.clone();
            let order = order.clone();
            tasks.push(tokio::spawn(async move {
                let _p = pool.acquire().await.unwrap();
                order.lock().unwrap().push(i);
            }));
            tokio::task::yield_now().await;
        }
        assert_eq!(pool.queued(), 5);
        drop(first);
        for t in tasks {
            t.await.unwrap();
        }
        assert_eq!(*order.lock().unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(pool.busy(), 0);
    }

    #[tokio::test]
    async fn overflow_when_queue_full() {
        let pool = WorkerPool::new(1, 1);
        let _a = pool.acquire().await.unwrap();
        let p2 = pool.clone();
        let waiter = tokio::spawn(async move { p2.acquire().await.map(|_| ()) });
        tokio::task::yield_now().await;
        assert_eq!(pool.acquire().await.err(), Some(Overflow));
        drop(_a);
        assert!(waiter.await.unwrap().is_ok());
    }

    #[tokio::test]
    async fn resize_releases_waiters() {
        let pool = WorkerPool::new(1, 10);
        let _a = pool.acquire().await.unwrap();
        let p2 = pool.clone();
        let waiter = tokio::spawn(async move { p2.acquire().await.map(|_| ()) });
        tokio::task::yield_now().await;
        pool.resize(2);
        assert!(waiter.await.unwrap().is_ok());
        assert_eq!(pool.workers(), 2);
    }
}
