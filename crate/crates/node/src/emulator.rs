//! Open-loop traffic injectors. Each request is sent at its scheduled time
//! whether or not earlier ones have completed.

use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, HeaderName, Method, Request, StatusCode};
use qosmw_core::emulator::InjectorSpec;
use qosmw_core::metrics::{MetricsRecord, Outcome};
use qosmw_core::model::{GW_ACTION_HEADER, PEP_ACTION_HEADER, SOURCE_ID_HEADER};
use qosmw_core::pep::PepAction;
use tokio::net::TcpStream;
use tokio::task::JoinSet;
use tokio_util::sync::CancellationToken;

use crate::clock::ms_since;
use crate::metrics::Recorder;
use crate::pep::OVERHEAD_HEADER;
use crate::proxy::{HttpClient, BODY_LIMIT};

#[derive(Debug, Clone, Copy)]
pub struct EmulatorOptions {
    pub request_timeout: Duration,
    /// How long in-flight requests may still complete after an abort.
    pub abort_grace: Duration,
}

impl Default for EmulatorOptions {
    fn default() -> Self {
        Self {
            request_timeout: Duration::from_secs(60),
            abort_grace: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InjectorReport {
    pub injector: String,
    pub sent: u64,
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmulatorOutcome {
    pub reports: Vec<InjectorReport>,
    pub truncated: bool,
}

/// Stops a running emulator; cloneable so a signal handler can hold one.
#[derive(Debug, Clone)]
pub struct Aborter {
    stop: CancellationToken,
    hard: CancellationToken,
    grace: Duration,
}

impl Aborter {
    /// Stops scheduling new requests. In-flight requests get the grace period.
    pub fn abort(&self) {
        if self.stop.is_cancelled() {
            return;
        }
        self.stop.cancel();
        let hard = self.hard.clone();
        let grace = self.grace;
        tokio::spawn(async move {
            tokio::time::sleep(grace).await;
            hard.cancel();
        });
    }
}

pub struct EmulatorHandle {
    aborter: Aborter,
    tasks: JoinSet<InjectorReport>,
}

impl EmulatorHandle {
    pub fn aborter(&self) -> Aborter {
        self.aborter.clone()
    }

    pub fn abort(&self) {
        self.aborter.abort();
    }

    pub async fn wait(mut self) -> EmulatorOutcome {
        let mut reports = Vec::new();
        while let Some(r) = self.tasks.join_next().await {
            if let Ok(r) = r {
                reports.push(r);
            }
        }
        reports.sort_by(|a, b| a.injector.cmp(&b.injector));
        let truncated = reports.iter().any(|r| r.aborted);
        EmulatorOutcome { reports, truncated }
    }
}

/// Fails fast when some target does not accept connections.
pub async fn check_targets<'a>(targets: impl IntoIterator<Item = &'a str>) -> Result<(), String> {
    for t in targets {
        match tokio::time::timeout(Duration::from_secs(2), TcpStream::connect(t)).await {
            Ok(Ok(_)) => {}
            Ok(Err(e)) => return Err(format!("{t}: {e}")),
            Err(_) => return Err(format!("{t}: connect timed out")),
        }
    }
    Ok(())
}

/// Starts every injector. Each spec must carry its target and seed.
pub fn start(
    injectors: Vec<InjectorSpec>,
    client: HttpClient,
    recorder: Recorder,
    epoch: Instant,
    options: EmulatorOptions,
) -> EmulatorHandle {
    let stop = CancellationToken::new();
    let hard = CancellationToken::new();
    let mut tasks = JoinSet::new();
    let start_at = tokio::time::Instant::now();
    for spec in injectors {
        recorder.register(&spec.profile.name);
        tasks.spawn(run_injector(
            spec,
            client.clone(),
            recorder.clone(),
            epoch,
            start_at,
            stop.clone(),
            hard.clone(),
            options.request_timeout,
        ));
    }
    EmulatorHandle {
        aborter: Aborter {
            stop,
            hard,
            grace: options.abort_grace,
        },
        tasks,
    }
}

#[allow(clippy::too_many_arguments)]
async fn run_injector(
    spec: InjectorSpec,
    client: HttpClient,
    recorder: Recorder,
    epoch: Instant,
    start_at: tokio::time::Instant,
    stop: CancellationToken,
    hard: CancellationToken,
    timeout: Duration,
) -> InjectorReport {
    let name = spec.profile.name.clone();
    let mut report = InjectorReport {
        injector: name.clone(),
        sent: 0,
        aborted: false,
    };
    let schedule = match spec.schedule() {
        Ok(s) => s,
        Err(e) => {
            tracing::error!(injector = %name, error = %e, "invalid injector");
            return report;
        }
    };
    let path = spec.path();
    let mut sends = JoinSet::new();
    for (index, offset) in schedule.enumerate() {
        tokio::select! {
            biased;
            _ = stop.cancelled() => {
                report.aborted = true;
                break;
            }
            _ = tokio::time::sleep_until(start_at + offset) => {}
        }
        report.sent += 1;
        recorder.sent(&name);
        let req = Request::builder()
            .method(Method::POST)
            .uri(format!("http://{}{}", spec.target, path))
            .header(SOURCE_ID_HEADER, spec.source_id())
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(format!(
                "{{\"injector\":\"{}\",\"seq\":{}}}",
                name, index
            )))
            .expect("valid request");
        let job = SendJob {
            injector: name.clone(),
            index: index as u64,
            priority: spec.profile.priority_hint,
        };
        sends.spawn(job.run(client.clone(), req, recorder.clone(), epoch, hard.clone(), timeout));
    }
    while sends.join_next().await.is_some() {}
    report
}

struct SendJob {
    injector: String,
    index: u64,
    priority: qosmw_core::PriorityLevel,
}

impl SendJob {
    async fn run(
        self,
        client: HttpClient,
        req: Request<Body>,
        recorder: Recorder,
        epoch: Instant,
        hard: CancellationToken,
        timeout: Duration,
    ) {
        let timestamp_ms = ms_since(epoch);
        let t0 = Instant::now();
        let exchange = async {
            let resp = client.request(req).await.map_err(|e| e.to_string())?;
            let (parts, body) = resp.into_parts();
            axum::body::to_bytes(Body::new(body), BODY_LIMIT)
                .await
                .map_err(|e| e.to_string())?;
            Ok::<_, String>(parts)
        };
        let result = tokio::select! {
            r = tokio::time::timeout(timeout, exchange) => r.unwrap_or_else(|_| Err("timeout".into())),
            _ = hard.cancelled() => Err("aborted".into()),
        };
        let rtt = ms_since(t0);
        let mut rec = MetricsRecord {
            timestamp_ms,
            injector: self.injector,
            request_index: self.index,
            priority: self.priority,
            outcome: Outcome::Failed,
            rtt_ms: None,
            pep_overhead_ms: None,
            detail: None,
        };
        match result {
            Ok(parts) => {
                let (outcome, detail) = classify_response(parts.status, &parts.headers);
                rec.outcome = outcome;
                rec.detail = detail;
                rec.rtt_ms = (outcome == Outcome::Served).then_some(rtt);
                rec.pep_overhead_ms = parts
                    .headers
                    .get(OVERHEAD_HEADER)
                    .and_then(|v| v.to_str().ok())
                    .and_then(|v| v.parse::<f64>().ok())
                    .map(|us| us / 1000.0);
            }
            Err(e) => rec.detail = Some(e),
        }
        recorder.record(rec);
    }
}

/// Maps a response onto the outcome taxonomy.
pub fn classify_response(status: StatusCode, headers: &axum::http::HeaderMap) -> (Outcome, Option<String>) {
    let header = |name: &'static str| {
        headers
            .get(HeaderName::from_static(name))
            .and_then(|v| v.to_str().ok())
            .map(str::to_string)
    };
    if status.is_success() {
        return (Outcome::Served, None);
    }
    if status == StatusCode::SERVICE_UNAVAILABLE {
        if let Some(action) = header(PEP_ACTION_HEADER) {
            let outcome = if action == PepAction::Rejected.as_str() {
                Outcome::Rejected
            } else {
                Outcome::Overflowed
            };
            return (outcome, Some(action));
        }
        if let Some(action) = header(GW_ACTION_HEADER) {
            return (Outcome::Overflowed, Some(format!("gateway {action}")));
        }
    }
    (Outcome::Failed, Some(format!("status {}", status.as_u16())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use axum::http::{HeaderMap, HeaderValue};

    fn with(name: &'static str, v: &'static str) -> HeaderMap {
        let mut h = HeaderMap::new();
        h.insert(HeaderName::from_static(name), HeaderValue::from_static(v));
        h
    }

    #[test]
    fn outcome_taxonomy() {
        assert_eq!(classify_response(StatusCode::CREATED, &HeaderMap::new()).0, Outcome::Served);
        assert_eq!(
            classify_response(StatusCode::SERVICE_UNAVAILABLE, &with(PEP_ACTION_HEADER, "rejected")).0,
            Outcome::Rejected
        );
        assert_eq!(
            classify_response(StatusCode::SERVICE_UNAVAILABLE, &with(PEP_ACTION_HEADER, "queue-overflow")).0,
            Outcome::Overflowed
        );
        assert_eq!(
            classify_response(StatusCode::SERVICE_UNAVAILABLE, &with(GW_ACTION_HEADER, "overflow")).0,
            Outcome::Overflowed
        );
        assert_eq!(classify_response(StatusCode::SERVICE_UNAVAILABLE, &HeaderMap::new()).0, Outcome::Failed);
        assert_eq!(classify_response(StatusCode::BAD_GATEWAY, &HeaderMap::new()).0, Outcome::Failed);
    }
}
