//! Outbound HTTP: a pooled client and request relaying.

use std::time::Duration;

use axum::body::Body;
use axum::http::{header, HeaderMap, HeaderValue, Method, Request, Response, StatusCode, Uri};
use bytes::Bytes;
use hyper_util::client::legacy::connect::HttpConnector;
use hyper_util::client::legacy::Client;
use hyper_util::rt::TokioExecutor;

/// Largest body accepted from peers.
pub const BODY_LIMIT: usize = 4 * 1024 * 1024;

pub type HttpClient = Client<HttpConnector, Body>;

pub fn client() -> HttpClient {
    let mut connector = HttpConnector::new();
    connector.set_connect_timeout(Some(Duration::from_secs(2)));
    connector.set_nodelay(true);
    Client::builder(TokioExecutor::new())
        .pool_idle_timeout(Duration::from_secs(30))
        .pool_max_idle_per_host(256)
        .build(connector)
}

#[derive(Debug, thiserror::Error)]
pub enum ForwardError {
    #[error("invalid upstream uri {0:?}")]
    Uri(String),
    #[error("upstream {upstream} unreachable: {reason}")]
    Unreachable { upstream: String, reason: String },
    #[error("reading upstream body: {0}")]
    Body(String),
}

const HOP_BY_HOP: [header::HeaderName; 4] = [
    header::CONNECTION,
    header::TRANSFER_ENCODING,
    header::UPGRADE,
    header::TE,
];

/// Sends the request to `upstream` (`host:port`) and returns the response
/// with its body fully read.
pub async fn forward(
    client: &HttpClient,
    upstream: &str,
    method: Method,
    target: &str,
    mut headers: HeaderMap,
    body: Bytes,
) -> Result<Response<Bytes>, ForwardError> {
    let uri: Uri = format!("http://{upstream}{target}")
        .parse()
        .map_err(|_| ForwardError::Uri(format!("{upstream}{target}")))?;
    for h in HOP_BY_HOP {
        headers.remove(h);
    }
    headers.remove(header::CONTENT_LENGTH);
    let mut req = Request::builder()
        .method(method)
        .uri(uri)
        .body(Body::from(body))
        .map_err(|e| ForwardError::Uri(e.to_string()))?;
    *req.headers_mut() = headers;
    let resp = client
        .request(req)
        .await
        .map_err(|e| ForwardError::Unreachable {
            upstream: upstream.to_string(),
            reason: e.to_string(),
        })?;
    let (parts, incoming) = resp.into_parts();
    let bytes = axum::body::to_bytes(Body::new(incoming), BODY_LIMIT)
        .await
        .map_err(|e| ForwardError::Body(e.to_string()))?;
    Ok(Response::from_parts(parts, bytes))
}

/// Turns a fully read upstream response into one we can send downstream.
pub fn relay(resp: Response<Bytes>) -> Response<Body> {
    let (mut parts, body) = resp.into_parts();
    for h in HOP_BY_HOP {
        parts.headers.remove(h);
    }
    Response::from_parts(parts, Body::from(body))
}

/// Plain-text error response with an optional action header.
pub fn error_response(status: StatusCode, action: Option<(&'static str, &'static str)>, msg: String) -> Response<Body> {
    let mut resp = Response::new(Body::from(msg));
    *resp.status_mut() = status;
    if let Some((name, value)) = action {
        resp.headers_mut()
            .insert(header::HeaderName::from_static(name), HeaderValue::from_static(value));
    }
    resp
}

pub fn bad_gateway(err: &ForwardError) -> Response<Body> {
    error_response(StatusCode::BAD_GATEWAY, None, err.to_string())
}
