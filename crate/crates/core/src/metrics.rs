//! Per-request dataset, resource snapshots, and run summaries.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PriorityLevel, RttState};

pub const REQUESTS_SCHEMA: &str = "# qosmw requests v1";
pub const RESOURCES_SCHEMA: &str = "# qosmw resources v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Outcome {
    Served,
    Rejected,
    Overflowed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Send time, ms since the start of the run.
    pub timestamp_ms: f64,
    pub injector: String,
    pub request_index: u64,
    pub priority: PriorityLevel,
    pub outcome: Outcome,
    /// Present iff `outcome` is `Served`.
    pub rtt_ms: Option<f64>,
    /// Time added by CMC and PEP, excluding deliberate delay and queueing.
    pub pep_overhead_ms: Option<f64>,
    /// Failure class or HTTP status for non-served outcomes.
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSnapshot {
    pub at_ms: f64,
    pub component: String,
    pub pid: u32,
    pub available: bool,
    /// Fraction of one core used since the previous snapshot.
    pub cpu_fraction: Option<f64>,
    pub rss_bytes: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateChange {
    pub at_ms: f64,
    pub state: RttState,
}

/// Everything a run produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<MetricsRecord>,
    pub resources: Vec<ResourceSnapshot>,
    pub states: Vec<StateChange>,
    /// Requests each injector put on the wire.
    pub sent: BTreeMap<String, u64>,
    pub duration_ms: f64,
    /// Set when the run was aborted before its bound.
    pub truncated: bool,
    /// Records lost to collector backpressure.
    pub dropped: u64,
}

impl Dataset {
    /// Orders records by injector then request index.
    pub fn sort(&mut self) {
        self.records.sort_by(|a, b| {
            a.injector
                .cmp(&b.injector)
                .then(a.request_index.cmp(&b.request_index))
        });
    }

    pub fn for_injector<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a MetricsRecord> + 'a {
        self.records.iter().filter(move |r| r.injector == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectorSummary {
    pub injector: String,
    pub priority: Option<PriorityLevel>,
    pub sent: u64,
    pub served: u64,
    pub rejected: u64,
    pub overflowed: u64,
    pub failed: u64,
    pub loss_fraction: f64,
    pub rtt_mean_ms: Option<f64>,
    pub rtt_median_ms: Option<f64>,
    pub rtt_max_ms: Option<f64>,
    pub overhead_median_ms: Option<f64>,
    pub overhead_mean_ms: Option<f64>,
}

impl InjectorSummary {
    pub fn accounted(&self) -> u64 {
        self.served + self.rejected + self.overflowed + self.failed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub component: String,
    pub samples: usize,
    pub mean_cpu_percent: Option<f64>,
    pub peak_rss_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub injectors: Vec<InjectorSummary>,
    /// Fraction of the run spent in each RTT state; empty when no controller ran.
    pub state_shares: BTreeMap<RttState, f64>,
    pub components: Vec<ComponentSummary>,
    pub duration_ms: f64,
    pub truncated: bool,
    pub dropped: u64,
}

impl Summary {
    pub fn injector(&self, name: &str) -> Option<&InjectorSummary> {
        self.injectors.iter().find(|i| i.injector == name)
    }
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let mid = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    })
}

/// Least-squares slope of `ys` against their index.
pub fn slope(ys: &[f64]) -> Option<f64> {
    let n = ys.len();
    if n < 2 {
        return None;
    }
    let xm = (n - 1) as f64 / 2.0;
    let ym = ys.iter().sum::<f64>() / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - xm;
        num += dx * (y - ym);
        den += dx * dx;
    }
    Some(num / den)
}

pub fn summarize(data: &Dataset) -> Result<Summary> {
    if data.records.is_empty() && data.sent.values().all(|n| *n == 0) {
        return Err(Error::EmptyDataset);
    }
    let mut names: Vec<&str> = data.records.iter().map(|r| r.injector.as_str()).collect();
    names.extend(data.sent.keys().map(String::as_str));
    names.sort_unstable();
    names.dedup();

    let injectors = names
        .into_iter()
        .map(|name| {
            let mut counts: BTreeMap<Outcome, u64> = BTreeMap::new();
            let mut rtts = Vec::new();
            let mut overheads = Vec::new();
            let mut priority = None;
            for r in data.for_injector(name) {
                *counts.entry(r.outcome).or_default() += 1;
                priority.get_or_insert(r.priority);
                if let Some(rtt) = r.rtt_ms {
                    rtts.push(rtt);
                }
                if let Some(o) = r.pep_overhead_ms {
                    overheads.push(o);
                }
            }
            let get = |o| counts.get(&o).copied().unwrap_or(0);
            let recorded: u64 = counts.values().sum();
            let sent = data.sent.get(name).copied().unwrap_or(recorded);
            let lost = get(Outcome::Rejected) + get(Outcome::Overflowed) + get(Outcome::Failed);
            InjectorSummary {
                injector: name.to_string(),
                priority,
                sent,
                served: get(Outcome::Served),
                rejected: get(Outcome::Rejected),
                overflowed: get(Outcome::Overflowed),
                failed: get(Outcome::Failed),
                loss_fraction: if sent == 0 { 0.0 } else { lost as f64 / sent as f64 },
                rtt_mean_ms: mean(&rtts),
                rtt_median_ms: median(&rtts),
                rtt_max_ms: rtts.iter().copied().reduce(f64::max),
                overhead_median_ms: median(&overheads),
                overhead_mean_ms: mean(&overheads),
            }
        })
        .collect();

    Ok(Summary {
        injectors,
        state_shares: state_shares(&data.states, data.duration_ms),
        components: component_summaries(&data.resources),
        duration_ms: data.duration_ms,
        truncated: data.truncated,
        dropped: data.dropped,
    })
}

fn state_shares(states: &[StateChange], duration_ms: f64) -> BTreeMap<RttState, f64> {
    let mut shares = BTreeMap::new();
    if states.is_empty() || duration_ms <= 0.0 {
        return shares;
    }
    for (i, s) in states.iter().enumerate() {
        let end = states.get(i + 1).map_or(duration_ms, |n| n.at_ms).min(duration_ms);
        let span = (end - s.at_ms.min(duration_ms)).max(0.0);
        *shares.entry(s.state).or_insert(0.0) += span / duration_ms;
    }
    shares
}

fn component_summaries(snaps: &[ResourceSnapshot]) -> Vec<ComponentSummary> {
    let mut by: BTreeMap<&str, Vec<&ResourceSnapshot>> = BTreeMap::new();
    for s in snaps {
        by.entry(s.component.as_str()).or_default().push(s);
    }
    by.into_iter()
        .map(|(component, v)| {
            let cpu: Vec<f64> = v.iter().filter_map(|s| s.cpu_fraction).collect();
            ComponentSummary {
                component: component.to_string(),
                samples: v.len(),
                mean_cpu_percent: mean(&cpu).map(|c| c * 100.0),
                peak_rss_bytes: v.iter().filter_map(|s| s.rss_bytes).max(),
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, schema: &str, rows: &[T]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{schema}")?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path, schema: &str) -> Result<Vec<T>> {
    let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.trim_end() != schema {
        return Err(Error::Io(format!(
            "{}: expected schema row {schema:?}, found {:?}",
            path.display(),
            first.trim_end()
        )));
    }
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// One row per request event, preceded by the schema row.
pub fn write_requests_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    write_csv(path, REQUESTS_SCHEMA, records)
}

pub fn read_requests_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    read_csv(path, REQUESTS_SCHEMA)
}

pub fn write_resources_csv(path: &Path, snaps: &[ResourceSnapshot]) -> Result<()> {
    write_csv(path, RESOURCES_SCHEMA, snaps)
}

pub fn read_resources_csv(path: &Path) -> Result<Vec<ResourceSnapshot>> {
    read_csv(path, RESOURCES_SCHEMA)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(inj: &str, i: u64, outcome: Outcome, rtt: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            timestamp_ms: i as f64 * 10.0,
            injector: inj.into(),
            request_index: i,
            priority: PriorityLevel::High,
            outcome,
            rtt_ms: rtt,
            pep_overhead_ms: None,
            detail: None,
        }
    }

    #[test]
    fn constant_rtt() {
        let data = Dataset {
            records: (0..10).map(|i| rec("a", i, Outcome::Served, Some(100.0))).collect(),
            duration_ms: 100.0,
            ..Default::default()
        };
        let s = summarize(&data).unwrap();
        let a = s.injector("a").unwrap();
        assert_eq!(a.rtt_mean_ms, Some(100.0));
        assert_eq!(a.rtt_median_ms, Some(100.0));
        assert_eq!(a.rtt_max_ms, Some(100.0));
        assert_eq!(a.loss_fraction, 0.0);
    }

    #[test]
    fn loss_fraction() {
        let records = (0..100)
            .map(|i| {
                if i < 40 {
                    rec("a", i, Outcome::Rejected, None)
                } else {
                    rec("a", i, Outcome::Served, Some(5.0))
                }
            })
            .collect();
        let data = Dataset {
            records,
            sent: BTreeMap::from([("a".to_string(), 100)]),
            ..Default::default()
        };
        let s = summarize(&data).unwrap();
        assert!((s.injector("a").unwrap().loss_fraction - 0.40).abs() < 1e-12);
        assert_eq!(s.injector("a").unwrap().accounted(), 100);
    }

    #[test]
    fn empty_dataset() {
        assert_eq!(summarize(&Dataset::default()), Err(Error::EmptyDataset));
    }

    #[test]
    fn summary_is_pure() {
        let data = Dataset {
            records: (0..50)
                .map(|i| rec(if i % 2 == 0 { "a" } else { "b" }, i, Outcome::Served, Some(i as f64)))
                .collect(),
            states: vec![
                StateChange { at_ms: 0.0, state: RttState::Normal },
                StateChange { at_ms: 25.0, state: RttState::Critical },
                StateChange { at_ms: 75.0, state: RttState::Normal },
            ],
            duration_ms: 100.0,
            ..Default::default()
        };
        let s1 = summarize(&data).unwrap();
        assert_eq!(s1, summarize(&data).unwrap());
        assert_eq!(s1.state_shares[&RttState::Normal], 0.5);
        assert_eq!(s1.state_shares[&RttState::Critical], 0.5);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn slope_sign() {
        assert!(slope(&[1.0, 2.0, 3.0, 5.0]).unwrap() > 0.0);
        assert_eq!(slope(&[2.0, 2.0, 2.0]), Some(0.0));
        assert_eq!(slope(&[1.0]), None);
    }

    #[test]
    fn ten_thousand_rows_gap_free() {
        let dir = std::env::temp_dir().join(format!("qosmw-metrics-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("requests.csv");
        let mut records: Vec<_> = (0..10_000u64)
            .map(|i| {
                let inj = ["a", "b", "c"][(i % 3) as usize];
                let mut r = rec(inj, i / 3, Outcome::Served, Some(1.0));
                if i % 7 == 0 {
                    r.outcome = Outcome::Failed;
                    r.rtt_ms = None;
                    r.detail = Some("connect".into());
                }
                r
            })
            .collect();
        records.reverse();
        let mut data = Dataset { records, ..Default::default() };
        data.sort();
        write_requests_csv(&path, &data.records).unwrap();
        let back = read_requests_csv(&path).unwrap();
        assert_eq!(back.len(), 10_000);
        assert_eq!(back, data.records);
        for inj in ["a", "b", "c"] {
            let idx: Vec<u64> = back.iter().filter(|r| r.injector == inj).map(|r| r.request_index).collect();
            assert!(idx.iter().enumerate().all(|(i, v)| *v == i as u64));
        }
        let head = std::fs::read_to_string(&path).unwrap();
        assert!(head.starts_with(REQUESTS_SCHEMA));
        std::fs::remove_dir_all(&dir).ok();
    }
}
