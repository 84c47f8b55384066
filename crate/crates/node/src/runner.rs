//! Scenario runner: starts the components a scenario needs, drives the
//! injectors, shuts everything down in order and writes the results.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use qosmw_core::cluster::{InstanceSpec, PoolConfig};
use qosmw_core::metrics::{self, Dataset, StateChange, Summary};
use qosmw_core::model::RttState;
use qosmw_core::scenario::{AssertionResult, Mode, Scenario, Topology};
use serde::{Deserialize, Serialize};
use tokio_util::sync::CancellationToken;

use crate::autonomic::{self, Knowledge, ManagerConfig};
use crate::cmc::{self, CmcConfig};
use crate::emulator::{self, EmulatorOptions};
use crate::metrics::{spawn_collector, spawn_sampler, Monitored};
use crate::pep::{self, PepServerConfig};
use crate::proxy;
use crate::server::{serve, ServerHandle};
use crate::{balancer, gateway};

const LOOPBACK: &str = "127.0.0.1:0";
const SHUTDOWN_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Invalid(#[from] qosmw_core::Error),
    #[error("component startup failed: {0}")]
    Startup(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub mode: Option<Mode>,
    pub out_dir: Option<PathBuf>,
    /// Overrides the scenario seed.
    pub seed: Option<u64>,
    pub emulator: EmulatorOptions,
    /// Cancelling this aborts the run; partial results are still written.
    pub abort: Option<CancellationToken>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub scenario: String,
    pub mode: Mode,
    pub seed: u64,
    pub dataset: Dataset,
    pub summary: Summary,
    pub assertions: Vec<AssertionResult>,
    pub knowledge: Option<Knowledge>,
    pub files: Vec<PathBuf>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed) && !self.dataset.truncated
    }
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryFile {
    pub scenario: String,
    pub mode: Mode,
    pub seed: u64,
    pub passed: bool,
    pub summary: Summary,
    pub assertions: Vec<AssertionResult>,
    pub states: Vec<StateChange>,
    pub samples_dropped: u64,
}

#[derive(Default)]
struct Components {
    gateways: Vec<ServerHandle>,
    balancer: Option<ServerHandle>,
    pep: Option<pep::PepHandle>,
    cmc: Option<ServerHandle>,
    metrics: Option<ServerHandle>,
}

impl Components {
    // front to back
    async fn shutdown(self) {
        let bounded = |f| tokio::time::timeout(SHUTDOWN_TIMEOUT, f);
        if let Some(s) = self.metrics {
            let _ = bounded(Box::pin(s.shutdown())).await;
        }
        if let Some(s) = self.cmc {
            let _ = bounded(Box::pin(s.shutdown())).await;
        }
        if let Some(p) = self.pep {
            let _ = tokio::time::timeout(SHUTDOWN_TIMEOUT, p.shutdown()).await;
        }
        if let Some(s) = self.balancer {
            let _ = bounded(Box::pin(s.shutdown())).await;
        }
        for g in self.gateways {
            let _ = bounded(Box::pin(g.shutdown())).await;
        }
    }
}

/// Runs `scenario` once in the requested mode (managed by default).
pub async fn run(scenario: &Scenario, opts: RunOptions) -> Result<RunReport, RunError> {
    let mode = opts.mode.unwrap_or(Mode::Managed);
    let mut scenario = scenario.clone();
    if let Some(seed) = opts.seed {
        scenario.seed = seed;
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let epoch = Instant::now();
    let client = proxy::client();
    let mut parts = Components::default();

    let started = start_components(&scenario, mode, &client, &mut parts).await;
    let (target, pep_addr) = match started {
        Ok(t) => t,
        Err(e) => {
            parts.shutdown().await;
            return Err(e);
        }
    };

    let manager = match (mode, &pep_addr) {
        (Mode::Managed, Some(pep)) if scenario.autonomic.enabled => {
            let config = ManagerConfig {
                pep: pep.clone(),
                rules: scenario.autonomic.rules.clone(),
                enter_threshold: scenario.autonomic.enter_threshold,
                recover_count: scenario.autonomic.recover_count,
                baseline: scenario.pep.policy.clone(),
                knowledge_log: opts.out_dir.as_ref().map(|d| d.join("knowledge.jsonl")),
                ..ManagerConfig::new(pep.clone())
            };
            Some(autonomic::spawn(config, client.clone(), epoch)?)
        }
        _ => None,
    };
    let collector = spawn_collector(1 << 16, manager.as_ref().map(|m| m.sender()), epoch);
    if let Some(listen) = &scenario.metrics.listen {
        match serve(listen, collector.router()).await {
            Ok(h) => parts.metrics = Some(h),
            Err(e) => {
                parts.shutdown().await;
                return Err(RunError::Startup(format!("metrics on {listen}: {e}")));
            }
        }
    }
    let sampler = spawn_sampler(
        vec![Monitored::this_process("middleware")],
        Duration::from_millis(scenario.metrics.resource_interval_ms),
        epoch,
    );

    if let Err(e) = emulator::check_targets([target.as_str()]).await {
        sampler.stop().await;
        parts.shutdown().await;
        return Err(RunError::Startup(format!("target unreachable: {e}")));
    }

    let injectors = scenario
        .injectors
        .iter()
        .enumerate()
        .map(|(i, inj)| {
            let mut inj = inj.clone();
            inj.target = target.clone();
            inj.seed = scenario.injector_seed(i);
            inj
        })
        .collect();
    let emu = emulator::start(injectors, client.clone(), collector.recorder(), epoch, opts.emulator);
    let watcher = opts.abort.clone().map(|token| {
        let aborter = emu.aborter();
        tokio::spawn(async move {
            token.cancelled().await;
            aborter.abort();
        })
    });
    let outcome = emu.wait().await;
    if let Some(w) = watcher {
        w.abort();
    }
    let duration_ms = crate::clock::ms_since(epoch);

    let collected = collector.finish().await;
    let knowledge = match manager {
        Some(m) => Some(m.shutdown().await),
        None => None,
    };
    let resources = sampler.stop().await;
    parts.shutdown().await;

    let mut dataset = Dataset {
        records: collected.records,
        resources,
        states: knowledge.as_ref().map(|k| k.states.clone()).unwrap_or_default(),
        sent: collected.sent,
        duration_ms,
        truncated: outcome.truncated,
        dropped: collected.dropped,
    };
    if dataset.states.is_empty() && mode == Mode::Managed {
        dataset.states.push(StateChange {
            at_ms: 0.0,
            state: RttState::Normal,
        });
    }
    dataset.sort();
    let summary = metrics::summarize(&dataset)?;
    let assertions = scenario.evaluate(mode, &dataset, &summary);

    let mut report = RunReport {
        scenario: scenario.name.clone(),
        mode,
        seed: scenario.seed,
        dataset,
        summary,
        assertions,
        knowledge,
        files: Vec::new(),
    };
    if let Some(dir) = &opts.out_dir {
        report.files = write_outputs(dir, &report, collected.samples_dropped)?;
    }
    Ok(report)
}

/// Returns the injector target and, in managed mode, the PEP address.
async fn start_components(
    scenario: &Scenario,
    mode: Mode,
    client: &proxy::HttpClient,
    parts: &mut Components,
) -> Result<(String, Option<String>), RunError> {
    match &scenario.topology {
        Topology::External { gateway, cmc, pep } => match mode {
            Mode::Baseline => Ok((gateway.clone(), None)),
            Mode::Managed => {
                let cmc = cmc.clone().ok_or_else(|| {
                    RunError::Startup("managed mode over an external topology needs a CMC address".into())
                })?;
                Ok((cmc, pep.clone()))
            }
        },
        Topology::InProcess => {
            let mut addrs = Vec::new();
            for i in 0..scenario.gateway.instances {
                let mut config = scenario.gateway.config.clone();
                config.seed = config.seed.wrapping_add(u64::from(i));
                let (h, _) = gateway::spawn(LOOPBACK, config).await?;
                addrs.push(h.addr().to_string());
                parts.gateways.push(h);
            }
            let upstream = if addrs.len() > 1 || scenario.balancer.always {
                let weights = &scenario.balancer.weights;
                let pool = PoolConfig {
                    instances: addrs
                        .iter()
                        .enumerate()
                        .map(|(i, a)| InstanceSpec {
                            address: a.clone(),
                            weight: weights.get(i).copied().unwrap_or(1),
                        })
                        .collect(),
                    strategy: scenario.balancer.strategy,
                    cooldown_ms: scenario.balancer.cooldown_ms,
                };
                let h = balancer::spawn(LOOPBACK, pool, client.clone()).await?;
                let a = h.addr().to_string();
                parts.balancer = Some(h);
                a
            } else {
                addrs[0].clone()
            };
            if mode == Mode::Baseline {
                return Ok((upstream, None));
            }
            let p = pep::spawn(
                LOOPBACK,
                PepServerConfig {
                    upstream: upstream.clone(),
                    policy: scenario.pep.policy.clone(),
                    config: scenario.pep.config.clone(),
                },
                client.clone(),
            )
            .await?;
            let pep_addr = p.addr().to_string();
            parts.pep = Some(p);
            let c = cmc::spawn(
                LOOPBACK,
                CmcConfig {
                    pep: pep_addr.clone(),
                    gateway: upstream,
                    policy: scenario.effective_cmc_policy(),
                    activated: true,
                },
                client.clone(),
            )
            .await
            .map_err(|e| RunError::Startup(format!("CMC: {e}")))?;
            let cmc_addr = c.addr().to_string();
            parts.cmc = Some(c);
            Ok((cmc_addr, Some(pep_addr)))
        }
    }
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn write_outputs(dir: &Path, report: &RunReport, samples_dropped: u64) -> Result<Vec<PathBuf>, RunError> {
    let mut files = Vec::new();
    let data = &report.dataset;
    let all = dir.join("requests.csv");
    metrics::write_requests_csv(&all, &data.records)?;
    files.push(all);
    for name in data.sent.keys() {
        let path = dir.join(format!("requests-{}.csv", file_safe(name)));
        let rows: Vec<_> = data.for_injector(name).cloned().collect();
        metrics::write_requests_csv(&path, &rows)?;
        files.push(path);
    }
    let res = dir.join("resources.csv");
    metrics::write_resources_csv(&res, &data.resources)?;
    files.push(res);
    let summary = SummaryFile {
        scenario: report.scenario.clone(),
        mode: report.mode,
        seed: report.seed,
        passed: report.passed(),
        summary: report.summary.clone(),
        assertions: report.assertions.clone(),
        states: data.states.clone(),
        samples_dropped,
    };
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| RunError::Io(e.into()))?;
    std::fs::write(&path, text)?;
    files.push(path);
    let knowledge = dir.join("knowledge.jsonl");
    if knowledge.exists() {
        files.push(knowledge);
    }
    Ok(files)
}
