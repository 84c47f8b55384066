#![allow(dead_code)]

use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{HeaderMap, Method, Request, StatusCode};
use qosmw_core::model::{GatewayConfig, TOS_HTTP_HEADER};
use qosmw_core::PriorityLevel;
use qosmw_node::proxy::{self, HttpClient};

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: bytes::Bytes,
    pub rtt: Duration,
}

impl Reply {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.get(name).and_then(|v| v.to_str().ok())
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).expect("json body")
    }
}

pub async fn send(
    client: &HttpClient,
    method: Method,
    addr: &str,
    path: &str,
    headers: &[(&str, &str)],
    body: &str,
) -> Reply {
    let mut req = Request::builder()
        .method(method)
        .uri(format!("http://{addr}{path}"));
    for (k, v) in headers {
        req = req.header(*k, *v);
    }
    let req = req.body(Body::from(body.to_string())).unwrap();
    let t0 = Instant::now();
    let resp = client.request(req).await.expect("request");
    let (parts, body) = resp.into_parts();
    let body = axum::body::to_bytes(Body::new(body), proxy::BODY_LIMIT).await.unwrap();
    Reply {
        status: parts.status,
        headers: parts.headers,
        body,
        rtt: t0.elapsed(),
    }
}

pub async fn post(client: &HttpClient, addr: &str, path: &str, headers: &[(&str, &str)]) -> Reply {
    send(client, Method::POST, addr, path, headers, "{}").await
}

pub async fn post_marked(client: &HttpClient, addr: &str, p: PriorityLevel) -> Reply {
    post(client, addr, "/app/data", &[(TOS_HTTP_HEADER.as_str(), p.as_wire())]).await
}

pub async fn put_json(client: &HttpClient, addr: &str, path: &str, value: &impl serde::Serialize) -> Reply {
    let body = serde_json::to_string(value).unwrap();
    send(client, Method::PUT, addr, path, &[("content-type", "application/json")], &body).await
}

pub async fn get_json(client: &HttpClient, addr: &str, path: &str) -> serde_json::Value {
    send(client, Method::GET, addr, path, &[], "").await.json()
}

pub fn gateway_config(service_time_ms: u64, workers: u32) -> GatewayConfig {
    GatewayConfig {
        service_time_ms,
        worker_pool_size: workers,
        ..GatewayConfig::default()
    }
}

pub async fn gateway(service_time_ms: u64, workers: u32) -> (qosmw_node::ServerHandle, String) {
    let (h, _) = qosmw_node::gateway::spawn("127.0.0.1:0", gateway_config(service_time_ms, workers))
        .await
        .unwrap();
    let addr = h.addr().to_string();
    (h, addr)
}

/// An address nothing listens on.
pub async fn dead_address() -> String {
    let l = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = l.local_addr().unwrap().to_string();
    drop(l);
    addr
}

/// Upstream that answers 200 with its name and the request headers it saw.
pub async fn echo(name: &'static str) -> (qosmw_node::ServerHandle, String) {
    use axum::extract::Request;
    let router = axum::Router::new().fallback(move |req: Request| async move {
        let headers: serde_json::Map<String, serde_json::Value> = req
            .headers()
            .iter()
            .map(|(k, v)| (k.as_str().to_string(), v.to_str().unwrap_or_default().into()))
            .collect();
        axum::Json(serde_json::json!({
            "server": name,
            "path": req.uri().path(),
            "headers": headers,
        }))
    });
    let h = qosmw_node::server::serve("127.0.0.1:0", router).await.unwrap();
    let addr = h.addr().to_string();
    (h, addr)
}
