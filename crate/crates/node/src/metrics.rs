//! Run-time collection: outcome records from the injectors, RTT samples for
//! the manager, and periodic resource snapshots read from `/proc`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use qosmw_core::autonomic::RttSample;
use qosmw_core::metrics::{summarize, Dataset, MetricsRecord, Outcome, ResourceSnapshot};
use qosmw_core::PriorityLevel;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;

use crate::clock::ms_since;

#[derive(Default)]
struct Shared {
    records: Mutex<Vec<MetricsRecord>>,
    sent: Mutex<BTreeMap<String, u64>>,
    dropped: AtomicU64,
    samples_dropped: AtomicU64,
}

/// Cheap, cloneable handle the injectors report through.
#[derive(Clone)]
pub struct Recorder {
    tx: mpsc::Sender<MetricsRecord>,
    shared: Arc<Shared>,
}

impl Recorder {
    /// Never blocks; a full buffer counts the record as dropped.
    pub fn record(&self, rec: MetricsRecord) {
        if self.tx.try_send(rec).is_err() {
            self.shared.dropped.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn sent(&self, injector: &str) {
        *self
            .shared
            .sent
            .lock()
            .unwrap()
            .entry(injector.to_string())
            .or_default() += 1;
    }

    /// Registers an injector so it appears in summaries even if it sends nothing.
    pub fn register(&self, injector: &str) {
        self.shared
            .sent
            .lock()
            .unwrap()
            .entry(injector.to_string())
            .or_default();
    }
}

pub struct CollectorHandle {
    recorder: Recorder,
    shared: Arc<Shared>,
    task: JoinHandle<()>,
    epoch: Instant,
}

/// What the collector gathered once every recorder is gone.
#[derive(Debug, Clone, Default)]
pub struct Collected {
    pub records: Vec<MetricsRecord>,
    pub sent: BTreeMap<String, u64>,
    pub dropped: u64,
    pub samples_dropped: u64,
}

/// Starts the collector. Served HIGH requests are also passed to `manager`
/// as RTT samples.
pub fn spawn_collector(capacity: usize, manager: Option<mpsc::Sender<RttSample>>, epoch: Instant) -> CollectorHandle {
    let (tx, mut rx) = mpsc::channel::<MetricsRecord>(capacity.max(1));
    let shared = Arc::new(Shared::default());
    let s = shared.clone();
    let task = tokio::spawn(async move {
        while let Some(rec) = rx.recv().await {
            if let (Some(am), PriorityLevel::High, Outcome::Served, Some(rtt)) =
                (&manager, rec.priority, rec.outcome, rec.rtt_ms)
            {
                let sample = RttSample {
                    request_id: format!("{}-{}", rec.injector, rec.request_index),
                    priority: rec.priority,
                    rtt_ms: rtt,
                    completed_at_ms: rec.timestamp_ms + rtt,
                };
                if am.try_send(sample).is_err() {
                    s.samples_dropped.fetch_add(1, Ordering::Relaxed);
                }
            }
            s.records.lock().unwrap().push(rec);
        }
    });
    CollectorHandle {
        recorder: Recorder {
            tx,
            shared: shared.clone(),
        },
        shared,
        task,
        epoch,
    }
}

impl CollectorHandle {
    pub fn recorder(&self) -> Recorder {
        self.recorder.clone()
    }

    /// Snapshot of everything collected so far.
    pub fn dataset(&self) -> Dataset {
        snapshot(&self.shared, self.epoch)
    }

    /// `GET /admin/metrics/summary` over the live data.
    pub fn router(&self) -> Router {
        Router::new()
            .route("/admin/metrics/summary", get(summary))
            .with_state((self.shared.clone(), self.epoch))
    }

    /// Waits for outstanding records once all recorder clones are dropped.
    pub async fn finish(self) -> Collected {
        drop(self.recorder);
        let _ = self.task.await;
        Collected {
            records: std::mem::take(&mut *self.shared.records.lock().unwrap()),
            sent: self.shared.sent.lock().unwrap().clone(),
            dropped: self.shared.dropped.load(Ordering::Relaxed),
            samples_dropped: self.shared.samples_dropped.load(Ordering::Relaxed),
        }
    }
}

fn snapshot(shared: &Shared, epoch: Instant) -> Dataset {
    let mut data = Dataset {
        records: shared.records.lock().unwrap().clone(),
        sent: shared.sent.lock().unwrap().clone(),
        dropped: shared.dropped.load(Ordering::Relaxed),
        duration_ms: ms_since(epoch),
        ..Default::default()
    };
    data.sort();
    data
}

async fn summary(State((shared, epoch)): State<(Arc<Shared>, Instant)>) -> Response {
    match summarize(&snapshot(&shared, epoch)) {
        Ok(s) => Json(s).into_response(),
        Err(e) => (StatusCode::NOT_FOUND, e.to_string()).into_response(),
    }
}

/// A process whose CPU and memory are sampled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Monitored {
    pub component: String,
    pub pid: u32,
}

impl Monitored {
    pub fn this_process(component: &str) -> Self {
        Self {
            component: component.to_string(),
            pid: std::process::id(),
        }
    }
}

/// CPU ticks (user + system) and resident bytes of `pid`.
pub fn read_proc(pid: u32) -> Option<(u64, u64)> {
    let stat = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    let ticks = parse_stat_ticks(&stat)?;
    let statm = std::fs::read_to_string(format!("/proc/{pid}/statm")).ok()?;
    let pages: u64 = statm.split_whitespace().nth(1)?.parse().ok()?;
    Some((ticks, pages * page_size()))
}

/// utime + stime from a `/proc/<pid>/stat` line.
pub fn parse_stat_ticks(stat: &str) -> Option<u64> {
    // the command name may contain spaces; fields resume after the last ')'
    let rest = &stat[stat.rfind(')')? + 1..];
    let fields: Vec<&str> = rest.split_whitespace().collect();
    // rest starts at field 3 (state); utime and stime are fields 14 and 15
    let utime: u64 = fields.get(11)?.parse().ok()?;
    let stime: u64 = fields.get(12)?.parse().ok()?;
    Some(utime + stime)
}

fn page_size() -> u64 {
    // SAFETY: sysconf has no preconditions.
    let v = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if v > 0 {
        v as u64
    } else {
        4096
    }
}

fn ticks_per_second() -> f64 {
    // SAFETY: sysconf has no preconditions.
    let v = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if v > 0 {
        v as f64
    } else {
        100.0
    }
}

pub struct SamplerHandle {
    stop: CancellationToken,
    task: JoinHandle<Vec<ResourceSnapshot>>,
}

impl SamplerHandle {
    pub async fn stop(self) -> Vec<ResourceSnapshot> {
        self.stop.cancel();
        self.task.await.unwrap_or_default()
    }
}

/// Samples every component each `interval` until stopped.
pub fn spawn_sampler(components: Vec<Monitored>, interval: Duration, epoch: Instant) -> SamplerHandle {
    let stop = CancellationToken::new();
    let token = stop.clone();
    let task = tokio::spawn(async move {
        let hz = ticks_per_second();
        let mut out = Vec::new();
        let mut last: Vec<Option<(u64, Instant)>> = vec![None; components.len()];
        let mut tick = tokio::time::interval(interval.max(Duration::from_millis(10)));
        loop {
            tokio::select! {
                _ = token.cancelled() => break,
                _ = tick.tick() => {}
            }
            let at_ms = ms_since(epoch);
            for (i, c) in components.iter().enumerate() {
                let now = Instant::now();
                let snap = match read_proc(c.pid) {
                    Some((ticks, rss)) => {
                        let cpu = last[i].map(|(t0, i0)| {
                            let wall = now.duration_since(i0).as_secs_f64();
                            if wall > 0.0 {
                                ticks.saturating_sub(t0) as f64 / hz / wall
                            } else {
                                0.0
                            }
                        });
                        last[i] = Some((ticks, now));
                        ResourceSnapshot {
                            at_ms,
                            component: c.component.clone(),
                            pid: c.pid,
                            available: true,
                            cpu_fraction: cpu,
                            rss_bytes: Some(rss),
                        }
                    }
                    None => ResourceSnapshot {
                        at_ms,
                        component: c.component.clone(),
                        pid: c.pid,
                        available: false,
                        cpu_fraction: None,
                        rss_bytes: None,
                    },
                };
                out.push(snap);
            }
        }
        out
    });
    SamplerHandle { stop, task }
}
