//! CMC service: marks unmarked requests and forwards them to the PEP, or
//! straight to the gateway while deactivated.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::{ConnectInfo, Request, State};
use axum::http::{HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use qosmw_core::cmc::{process, CmcState};
use qosmw_core::model::CmcPolicy;
use serde::{Deserialize, Serialize};

use crate::clock;
use crate::proxy::{self, HttpClient, BODY_LIMIT};
use crate::server::{serve, ServerHandle};

/// Wall-clock microseconds at which the request first entered the middleware.
pub const INGRESS_HEADER: &str = "x-qos-ingress-us";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CmcConfig {
    /// PEP address, used while activated.
    pub pep: String,
    /// Gateway address, used while deactivated.
    pub gateway: String,
    pub policy: CmcPolicy,
    #[serde(default = "yes")]
    pub activated: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CmcStats {
    pub activated: bool,
    pub received: u64,
    pub classified: u64,
    pub forward_errors: u64,
    /// Mean time from arrival to handing the request to the next hop.
    pub mean_processing_us: u64,
}

struct Cmc {
    state: RwLock<CmcState>,
    pep: String,
    gateway: String,
    client: HttpClient,
    received: AtomicU64,
    classified: AtomicU64,
    forward_errors: AtomicU64,
    processing_us: AtomicU64,
}

impl Cmc {
    fn snapshot(&self) -> CmcState {
        self.state.read().unwrap().clone()
    }

    fn set_activated(&self, on: bool) {
        let mut st = self.state.write().unwrap();
        st.activated = on;
        st.next_hop = if on { self.pep.clone() } else { self.gateway.clone() };
    }

    fn stats(&self) -> CmcStats {
        let received = self.received.load(Ordering::Relaxed);
        CmcStats {
            activated: self.state.read().unwrap().activated,
            received,
            classified: self.classified.load(Ordering::Relaxed),
            forward_errors: self.forward_errors.load(Ordering::Relaxed),
            mean_processing_us: self
                .processing_us
                .load(Ordering::Relaxed)
                .checked_div(received)
                .unwrap_or(0),
        }
    }
}

async fn handle(
    State(cmc): State<Arc<Cmc>>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    req: Request,
) -> Response {
    let ingress_ns = clock::monotonic_ns();
    let ingress_us = clock::wall_us();
    cmc.received.fetch_add(1, Ordering::Relaxed);
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
    let tagged = qosmw_core::TaggedRequest::new(
        parts.method,
        target,
        parts.headers,
        body,
        &peer.to_string(),
        ingress_ns,
    );
    let state = cmc.snapshot();
    let mut marked = process(tagged, &state);
    if marked.class.is_some() {
        cmc.classified.fetch_add(1, Ordering::Relaxed);
    }
    let ingress = HeaderName::from_static(INGRESS_HEADER);
    if !marked.request.headers().contains_key(&ingress) {
        marked
            .request
            .set_header(ingress, HeaderValue::from(ingress_us));
    }
    let (method, target, headers, body) = marked.request.into_parts();
    let elapsed_us = (clock::monotonic_ns().saturating_sub(ingress_ns)) / 1000;
    cmc.processing_us.fetch_add(elapsed_us, Ordering::Relaxed);
    match proxy::forward(&cmc.client, &state.next_hop, method, &target, headers, body).await {
        Ok(resp) => proxy::relay(resp),
        Err(e) => {
            cmc.forward_errors.fetch_add(1, Ordering::Relaxed);
            proxy::bad_gateway(&e)
        }
    }
}

async fn put_policy(State(cmc): State<Arc<Cmc>>, Json(policy): Json<CmcPolicy>) -> Json<CmcPolicy> {
    cmc.state.write().unwrap().policy = Arc::new(policy.clone());
    Json(policy)
}

async fn get_policy(State(cmc): State<Arc<Cmc>>) -> Json<CmcPolicy> {
    Json((*cmc.snapshot().policy).clone())
}

async fn activate(State(cmc): State<Arc<Cmc>>) -> Json<CmcStats> {
    cmc.set_activated(true);
    Json(cmc.stats())
}

async fn deactivate(State(cmc): State<Arc<Cmc>>) -> Json<CmcStats> {
    cmc.set_activated(false);
    Json(cmc.stats())
}

async fn stats(State(cmc): State<Arc<Cmc>>) -> Json<CmcStats> {
    Json(cmc.stats())
}

pub fn router(config: CmcConfig, client: HttpClient) -> Router {
    let next_hop = if config.activated {
        config.pep.clone()
    } else {
        config.gateway.clone()
    };
    let cmc = Arc::new(Cmc {
        state: RwLock::new(CmcState {
            activated: config.activated,
            policy: Arc::new(config.policy),
            next_hop,
        }),
        pep: config.pep,
        gateway: config.gateway,
        client,
        received: AtomicU64::new(0),
        classified: AtomicU64::new(0),
        forward_errors: AtomicU64::new(0),
        processing_us: AtomicU64::new(0),
    });
    Router::new()
        .route("/admin/cmc/policy", get(get_policy).put(put_policy))
        .route("/admin/cmc/activate", post(activate))
        .route("/admin/cmc/deactivate", post(deactivate))
        .route("/admin/cmc/stats", get(stats))
        .fallback(handle)
        .with_state(cmc)
}

pub async fn spawn(listen: &str, config: CmcConfig, client: HttpClient) -> std::io::Result<ServerHandle> {
    serve(listen, router(config, client)).await
}

