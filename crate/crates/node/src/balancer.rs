//! Load balancer service in front of several gateway instances.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Request, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use qosmw_core::cluster::{InstancePool, InstanceStats, PoolConfig, Strategy};
use serde::{Deserialize, Serialize};

use crate::proxy::{self, HttpClient, BODY_LIMIT};
use crate::server::{serve, ServerHandle};

/// An instance that does not answer within this is marked unhealthy.
pub const FORWARD_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalancerStats {
    pub strategy: Strategy,
    pub instances: Vec<InstanceStats>,
}

struct Balancer {
    pool: Mutex<InstancePool>,
    client: HttpClient,
    started: Instant,
}

impl Balancer {
    fn now_ms(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }

    fn stats(&self) -> BalancerStats {
        let pool = self.pool.lock().unwrap();
        BalancerStats {
            strategy: pool.strategy(),
            instances: pool.stats(),
        }
    }
}

async fn handle(State(lb): State<Arc<Balancer>>, req: Request) -> Response {
    let (parts, body) = req.into_parts();
    let body = match axum::body::to_bytes(body, BODY_LIMIT).await {
        Ok(b) => b,
        Err(e) => return (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
    };
    let picked = {
        let mut pool = lb.pool.lock().unwrap();
        pool.pick(lb.now_ms())
            .map(|idx| (idx, pool.address(idx).to_string()))
    };
    let (idx, address) = match picked {
        Ok(p) => p,
        Err(e) => return (StatusCode::SERVICE_UNAVAILABLE, e.to_string()).into_response(),
    };
    let target = parts
        .uri
        .path_and_query()
        .map(|pq| pq.as_str().to_string())
        .unwrap_or_else(|| "/".into());
    let result = tokio::time::timeout(
        FORWARD_TIMEOUT,
        proxy::forward(&lb.client, &address, parts.method, &target, parts.headers, body),
    )
    .await
    .unwrap_or_else(|_| {
        Err(proxy::ForwardError::Unreachable {
            upstream: address.clone(),
            reason: "timed out".into(),
        })
    });
    lb.pool
        .lock()
        .unwrap()
        .release(idx, result.is_ok(), lb.now_ms());
    match result {
        Ok(resp) => proxy::relay(resp),
        Err(e) => proxy::bad_gateway(&e),
    }
}

async fn put_pool(State(lb): State<Arc<Balancer>>, Json(config): Json<PoolConfig>) -> Response {
    match InstancePool::new(config) {
        Ok(pool) => {
            *lb.pool.lock().unwrap() = pool;
            Json(lb.stats()).into_response()
        }
        Err(e) => (StatusCode::UNPROCESSABLE_ENTITY, e.to_string()).into_response(),
    }
}

async fn stats(State(lb): State<Arc<Balancer>>) -> Json<BalancerStats> {
    Json(lb.stats())
}

pub fn router(config: PoolConfig, client: HttpClient) -> qosmw_core::Result<Router> {
    let lb = Arc::new(Balancer {
        pool: Mutex::new(InstancePool::new(config)?),
        client,
        started: Instant::now(),
    });
    Ok(Router::new()
        .route("/admin/lb/pool", axum::routing::put(put_pool))
        .route("/admin/lb/stats", get(stats))
        .fallback(handle)
        .with_state(lb))
}

pub async fn spawn(listen: &str, config: PoolConfig, client: HttpClient) -> Result<ServerHandle, crate::runner::RunError> {
    let router = router(config, client)?;
    serve(listen, router)
        .await
        .map_err(|e| crate::runner::RunError::Startup(format!("balancer on {listen}: {e}")))
}
