use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use qosmw_core::cluster::{InstanceSpec, PoolConfig, Strategy};
use qosmw_core::metrics::{summarize, Dataset};
use qosmw_core::model::{CmcPolicy, GatewayConfig, PepPolicy};
use qosmw_core::pep::{PepConfig, RejectionMode};
use qosmw_core::scenario::{Mode, Scenario, BUNDLED};
use qosmw_node::autonomic::ManagerConfig;
use qosmw_node::cmc::CmcConfig;
use qosmw_node::emulator::{self, EmulatorOptions};
use qosmw_node::pep::PepServerConfig;
use qosmw_node::runner::{self, RunOptions, RunReport};
use qosmw_node::{balancer, gateway, proxy, server};
use tokio_util::sync::CancellationToken;

#[derive(Parser)]
#[command(name = "qosmw", version, about = "QoS middleware for IoT platforms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and check its assertions.
    Run(RunArgs),
    /// List the bundled scenarios.
    Scenarios,
    /// Parse a scenario and print it as JSON.
    Validate {
        #[arg(long)]
        scenario: String,
    },
    /// Serve the stub gateway.
    RunGateway(GatewayArgs),
    /// Serve the classification and marking component.
    RunCmc(CmcArgs),
    /// Serve the policy enforcement point.
    RunPep(PepArgs),
    /// Serve the load balancer.
    RunBalancer(BalancerArgs),
    /// Serve the autonomic manager; samples arrive on POST /admin/am/sample.
    RunAm(AmArgs),
    /// Drive a scenario's injectors against an already running target.
    RunEmulator(EmulatorArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Managed,
    Both,
}

#[derive(Args)]
struct RunArgs {
    /// Bundled scenario name or path to a TOML file.
    #[arg(long)]
    scenario: String,
    #[arg(long, value_enum, default_value = "managed")]
    mode: ModeArg,
    /// Output directory; one subdirectory per mode.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GatewayArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: String,
    #[arg(long, default_value_t = 50)]
    service_time_ms: u64,
    #[arg(long, default_value_t = 0)]
    jitter_ms: u64,
    #[arg(long, default_value_t = 1)]
    workers: u32,
    #[arg(long, default_value_t = 500)]
    queue: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CmcArgs {
    #[arg(long, default_value = "127.0.0.1:8081")]
    listen: String,
    #[arg(long)]
    pep: String,
    #[arg(long)]
    gateway: String,
    /// CMC policy as JSON.
    #[arg(long, conflicts_with = "scenario")]
    policy: Option<PathBuf>,
    /// Take the policy from a scenario.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    deactivated: bool,
}

#[derive(Args)]
struct PepArgs {
    #[arg(long, default_value = "127.0.0.1:8082")]
    listen: String,
    /// Gateway or balancer address.
    #[arg(long)]
    upstream: String,
    /// Initial PEP policy as JSON.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Use seeded probabilistic rejection instead of the deterministic counter.
    #[arg(long)]
    probabilistic_seed: Option<u64>,
    #[arg(long, default_value_t = 1000)]
    queue_capacity: usize,
    #[arg(long, default_value_t = 4)]
    forwarder_concurrency: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    RoundRobin,
    WeightedRoundRobin,
    LoadOriented,
}

#[derive(Args)]
struct BalancerArgs {
    #[arg(long, default_value = "127.0.0.1:8083")]
    listen: String,
    /// `host:port` or `host:port=weight`; repeat for each instance.
    #[arg(long = "instance", required = true)]
    instances: Vec<String>,
    #[arg(long, value_enum, default_value = "round-robin")]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 2000)]
    cooldown_ms: u64,
}

#[derive(Args)]
struct AmArgs {
    #[arg(long, default_value = "127.0.0.1:8084")]
    listen: String,
    #[arg(long)]
    pep: String,
    /// Scenario supplying rules, thresholds and the baseline policy.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    knowledge_log: Option<PathBuf>,
}

#[derive(Args)]
struct EmulatorArgs {
    #[arg(long)]
    scenario: String,
    /// CMC, PEP or gateway address the injectors send to.
    #[arg(long)]
    target: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match rt.block_on(dispatch(cli.command)) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

async fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Run(a) => run(a).await,
        Command::Scenarios => {
            for (name, _) in BUNDLED {
                println!("{name}");
            }
            Ok(true)
        }
        Command::Validate { scenario } => {
            let s = Scenario::load_named_or_path(&scenario)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
            Ok(true)
        }
        Command::RunGateway(a) => {
            let config = GatewayConfig {
                service_time_ms: a.service_time_ms,
                service_time_jitter_ms: a.jitter_ms,
                worker_pool_size: a.workers,
                accept_queue_capacity: a.queue,
                seed: a.seed,
            };
            let (h, _) = gateway::spawn(&a.listen, config).await?;
            serve_until_ctrl_c("gateway", h).await
        }
        Command::RunCmc(a) => {
            let policy = match (&a.policy, &a.scenario) {
                (Some(p), _) => read_json::<CmcPolicy>(p)?,
                (None, Some(s)) => Scenario::load_named_or_path(s)?.effective_cmc_policy(),
                (None, None) => CmcPolicy::default(),
            };
            let config = CmcConfig {
                pep: a.pep,
                gateway: a.gateway,
                policy,
                activated: !a.deactivated,
            };
            let h = qosmw_node::cmc::spawn(&a.listen, config, proxy::client()).await?;
            serve_until_ctrl_c("cmc", h).await
        }
        Command::RunPep(a) => {
            let policy = match &a.policy {
                Some(p) => read_json::<PepPolicy>(p)?,
                None => PepPolicy::default(),
            };
            let config = PepServerConfig {
                upstream: a.upstream,
                policy,
                config: PepConfig {
                    rejection_mode: match a.probabilistic_seed {
                        Some(seed) => RejectionMode::Probabilistic { seed },
                        None => RejectionMode::Deterministic,
                    },
                    queue_capacity: a.queue_capacity,
                    forwarder_concurrency: a.forwarder_concurrency,
                    ..PepConfig::default()
                },
            };
            let h = qosmw_node::pep::spawn(&a.listen, config, proxy::client()).await?;
            println!("pep listening on {}", h.addr());
            tokio::signal::ctrl_c().await?;
            h.shutdown().await;
            Ok(true)
        }
        Command::RunBalancer(a) => {
            let instances = a
                .instances
                .iter()
                .map(|s| parse_instance(s))
                .collect::<Result<Vec<_>>>()?;
            let config = PoolConfig {
                instances,
                strategy: match a.strategy {
                    StrategyArg::RoundRobin => Strategy::RoundRobin,
                    StrategyArg::WeightedRoundRobin => Strategy::WeightedRoundRobin,
                    StrategyArg::LoadOriented => Strategy::LoadOriented,
                },
                cooldown_ms: a.cooldown_ms,
            };
            let h = balancer::spawn(&a.listen, config, proxy::client()).await?;
            serve_until_ctrl_c("balancer", h).await
        }
        Command::RunAm(a) => {
            let mut config = ManagerConfig::new(a.pep.clone());
            if let Some(s) = &a.scenario {
                let s = Scenario::load_named_or_path(s)?;
                config.rules = s.autonomic.rules;
                config.enter_threshold = s.autonomic.enter_threshold;
                config.recover_count = s.autonomic.recover_count;
                config.baseline = s.pep.policy;
            }
            config.knowledge_log = a.knowledge_log;
            let am = qosmw_node::autonomic::spawn(config, proxy::client(), Instant::now())?;
            let h = server::serve(&a.listen, am.router()).await?;
            println!("am listening on {}", h.addr());
            tokio::signal::ctrl_c().await?;
            h.shutdown().await;
            let k = am.shutdown().await;
            println!("executed {} policies, {} failed", k.executed, k.failed);
            Ok(true)
        }
        Command::RunEmulator(a) => run_emulator(a).await,
    }
}

async fn serve_until_ctrl_c(what: &str, h: server::ServerHandle) -> Result<bool> {
    println!("{what} listening on {}", h.addr());
    tokio::signal::ctrl_c().await?;
    h.shutdown().await;
    Ok(true)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn parse_instance(s: &str) -> Result<InstanceSpec> {
    match s.rsplit_once('=') {
        Some((address, w)) => Ok(InstanceSpec {
            address: address.to_string(),
            weight: w.parse().with_context(|| format!("weight in {s:?}"))?,
        }),
        None => Ok(InstanceSpec {
            address: s.to_string(),
            weight: 1,
        }),
    }
}

fn ctrl_c_token() -> CancellationToken {
    let token = CancellationToken::new();
    let t = token.clone();
    tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            eprintln!("interrupted; stopping injectors");
            t.cancel();
        }
    });
    token
}

async fn run(a: RunArgs) -> Result<bool> {
    let scenario = Scenario::load_named_or_path(&a.scenario)?;
    let modes = match a.mode {
        ModeArg::Baseline => vec![Mode::Baseline],
        ModeArg::Managed => vec![Mode::Managed],
        ModeArg::Both => vec![Mode::Baseline, Mode::Managed],
    };
    let abort = ctrl_c_token();
    let mut all_passed = true;
    for mode in modes {
        let opts = RunOptions {
            mode: Some(mode),
            out_dir: a.out.as_ref().map(|d| d.join(mode.to_string())),
            seed: a.seed,
            emulator: EmulatorOptions::default(),
            abort: Some(abort.clone()),
        };
        let report = runner::run(&scenario, opts).await?;
        print_report(&report);
        all_passed &= report.passed();
        if abort.is_cancelled() {
            break;
        }
    }
    Ok(all_passed)
}

fn print_report(r: &RunReport) {
    println!("== {} [{}] seed {}", r.scenario, r.mode, r.seed);
    println!(
        "{:<14} {:>6} {:>6} {:>6} {:>6} {:>6} {:>7} {:>10} {:>10} {:>10}",
        "injector", "sent", "served", "rej", "ovf", "fail", "loss", "mean ms", "median ms", "max ms"
    );
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".into());
    for i in &r.summary.injectors {
        println!(
            "{:<14} {:>6} {:>6} {:>6} {:>6} {:>6} {:>7.3} {:>10} {:>10} {:>10}",
            i.injector,
            i.sent,
            i.served,
            i.rejected,
            i.overflowed,
            i.failed,
            i.loss_fraction,
            fmt(i.rtt_mean_ms),
            fmt(i.rtt_median_ms),
            fmt(i.rtt_max_ms)
        );
    }
    if !r.summary.state_shares.is_empty() {
        let shares: Vec<String> = r
            .summary
            .state_shares
            .iter()
            .map(|(s, f)| format!("{s} {:.0}%", f * 100.0))
            .collect();
        println!("states: {}", shares.join(", "));
    }
    for c in &r.summary.components {
        println!(
            "resources {}: cpu {} %, peak rss {} KiB",
            c.component,
            fmt(c.mean_cpu_percent),
            c.peak_rss_bytes.map(|b| (b / 1024).to_string()).unwrap_or_else(|| "-".into())
        );
    }
    if r.dataset.truncated {
        println!("run truncated by abort");
    }
    for a in &r.assertions {
        println!("[{}] {}: {}", if a.passed { "PASS" } else { "FAIL" }, a.name, a.detail);
    }
    for f in &r.files {
        println!("wrote {}", f.display());
    }
}

async fn run_emulator(a: EmulatorArgs) -> Result<bool> {
    let mut scenario = Scenario::load_named_or_path(&a.scenario)?;
    if let Some(seed) = a.seed {
        scenario.seed = seed;
    }
    if let Err(e) = emulator::check_targets([a.target.as_str()]).await {
        bail!("target unreachable: {e}");
    }
    let epoch = Instant::now();
    let collector = qosmw_node::metrics::spawn_collector(1 << 16, None, epoch);
    let injectors = scenario
        .injectors
        .iter()
        .enumerate()
        .map(|(i, inj)| {
            let mut inj = inj.clone();
            inj.target = a.target.clone();
            inj.seed = scenario.injector_seed(i);
            inj
        })
        .collect();
    let emu = emulator::start(
        injectors,
        proxy::client(),
        collector.recorder(),
        epoch,
        EmulatorOptions::default(),
    );
    let abort = ctrl_c_token();
    let aborter = emu.aborter();
    tokio::spawn(async move {
        abort.cancelled().await;
        aborter.abort();
    });
    let outcome = emu.wait().await;
    let duration_ms = epoch.elapsed().as_secs_f64() * 1000.0;
    let got = collector.finish().await;
    let mut data = Dataset {
        records: got.records,
        sent: got.sent,
        duration_ms,
        truncated: outcome.truncated,
        dropped: got.dropped,
        ..Default::default()
    };
    data.sort();
    let summary = summarize(&data)?;
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        qosmw_core::metrics::write_requests_csv(&dir.join("requests.csv"), &data.records)?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(!outcome.truncated)
}
