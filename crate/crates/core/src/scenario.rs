//! Scenario files: topology, component settings, injectors, and the
//! assertions a run must satisfy.
//!
//! Scenarios are TOML. A minimal file:
//!
//! ```toml
//! name = "tiny"
//! duration_ms = 2000
//!
//! [gateway]
//! service_time_ms = 20
//!
//! [[injectors]]
//! profile = { name = "PostOp_Inj", rate = 6.0, arrival = { kind = "periodic" }, priority_hint = "HIGH" }
//!
//! [[assertions]]
//! kind = "accounting_closure"
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cluster::Strategy;
use crate::emulator::InjectorSpec;
use crate::error::{Error, Result};
use crate::metrics::{slope, Dataset, Outcome, Summary};
use crate::model::{
    AdaptationRules, ClassificationPolicy, ClassificationRule, CmcPolicy, GatewayConfig,
    MarkingPolicy, PepPolicy, PriorityLevel, RttState,
};
use crate::pep::PepConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Injectors talk to the gateway directly.
    Baseline,
    /// Injectors → CMC → PEP → (balancer) → gateway, with the manager running.
    Managed,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Managed => "managed",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "managed" => Ok(Mode::Managed),
            _ => Err(Error::InvalidScenario(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Topology {
    /// Every component runs inside the runner on loopback ports.
    #[default]
    InProcess,
    /// Components were started separately (e.g. with `qosmw run-gateway`).
    External {
        gateway: String,
        #[serde(default)]
        cmc: Option<String>,
        #[serde(default)]
        pep: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewaySettings {
    #[serde(flatten)]
    pub config: GatewayConfig,
    /// Number of gateway instances; more than one puts a balancer in front.
    pub instances: u32,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        Self {
            config: GatewayConfig::default(),
            instances: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalancerSettings {
    pub strategy: Strategy,
    /// One weight per gateway instance; all 1 when empty.
    pub weights: Vec<u32>,
    pub cooldown_ms: u64,
    /// Use the balancer even with a single gateway instance.
    pub always: bool,
}

impl Default for BalancerSettings {
    fn default() -> Self {
        Self {
            strategy: Strategy::RoundRobin,
            weights: Vec::new(),
            cooldown_ms: 2_000,
            always: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PepSettings {
    /// Policy in force before the manager pushes anything.
    pub policy: PepPolicy,
    #[serde(flatten)]
    pub config: PepConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutonomicSettings {
    pub enabled: bool,
    pub enter_threshold: u32,
    pub recover_count: u32,
    pub rules: AdaptationRules,
}

impl Default for AutonomicSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            enter_threshold: crate::autonomic::DEFAULT_ENTER_THRESHOLD,
            recover_count: crate::autonomic::DEFAULT_RECOVER_COUNT,
            rules: AdaptationRules::three_band(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsSettings {
    pub resource_interval_ms: u64,
    /// Serve `GET /admin/metrics/summary` on this address during the run.
    pub listen: Option<String>,
}

impl Default for MetricsSettings {
    fn default() -> Self {
        Self {
            resource_interval_ms: 1_000,
            listen: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Check {
    MeanRttBelow { injector: String, ms: f64 },
    MaxRttAbove { injector: String, ms: f64 },
    /// Positive least-squares slope over the served RTTs from the first one
    /// above `from_ms` to the end of the run.
    RttTrendIncreasing { injector: String, from_ms: f64 },
    /// Leaves NORMAL, reaches `via`, and comes back to NORMAL.
    StateCycle { via: RttState },
    AccountingClosure,
    LossAtMost { injector: String, fraction: f64 },
    OverheadMedianBelow { ms: f64 },
    ServedShareAtLeast { injector: String, fraction: f64 },
    /// Mean RTT of `injector` is strictly below that of `than`.
    MeanRttOrder { injector: String, than: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    #[serde(flatten)]
    pub check: Check,
    /// Modes the assertion applies to; all when empty.
    #[serde(default)]
    pub modes: Vec<Mode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Bound for injectors that set neither `total_requests` nor `duration_ms`.
    #[serde(default)]
    pub duration_ms: Option<u64>,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default)]
    pub gateway: GatewaySettings,
    #[serde(default)]
    pub balancer: BalancerSettings,
    #[serde(default)]
    pub cmc: CmcPolicy,
    #[serde(default)]
    pub pep: PepSettings,
    #[serde(default)]
    pub autonomic: AutonomicSettings,
    #[serde(default)]
    pub metrics: MetricsSettings,
    #[serde(default)]
    pub injectors: Vec<InjectorSpec>,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

const NURSING_HOME: &str = include_str!("../scenarios/nursing-home.toml");
const WFQ_DEMO: &str = include_str!("../scenarios/wfq-demo.toml");
const BALANCER_DEMO: &str = include_str!("../scenarios/balancer-demo.toml");

/// Names and sources of the scenarios shipped with the crate.
pub const BUNDLED: [(&str, &str); 3] = [
    ("nursing-home", NURSING_HOME),
    ("wfq-demo", WFQ_DEMO),
    ("balancer-demo", BALANCER_DEMO),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

impl Scenario {
    /// Parses and validates. Syntax errors carry line and column.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut s: Scenario =
            toml::from_str(text).map_err(|e| Error::InvalidScenario(e.to_string()))?;
        s.resolve()?;
        Ok(s)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::InvalidScenario(format!("{}: {e}", path.display())))
    }

    /// A bundled scenario name or a path to a file.
    pub fn load_named_or_path(name_or_path: &str) -> Result<Self> {
        match bundled(name_or_path) {
            Some(text) => Self::from_toml_str(text),
            None => Self::load(std::path::Path::new(name_or_path)),
        }
    }

    fn resolve(&mut self) -> Result<()> {
        let invalid = |m: String| Error::InvalidScenario(m);
        self.gateway.config.validate().map_err(|e| invalid(format!("gateway: {e}")))?;
        if self.gateway.instances == 0 {
            return Err(invalid("gateway.instances must be >= 1".into()));
        }
        if !self.balancer.weights.is_empty()
            && self.balancer.weights.len() != self.gateway.instances as usize
        {
            return Err(invalid(format!(
                "balancer.weights has {} entries for {} gateway instances",
                self.balancer.weights.len(),
                self.gateway.instances
            )));
        }
        self.pep.policy = self
            .pep
            .policy
            .clone()
            .validate()
            .map_err(|e| invalid(format!("pep.policy: {e}")))?;
        let mut names = std::collections::BTreeSet::new();
        for (i, inj) in self.injectors.iter_mut().enumerate() {
            if inj.total_requests.is_none() && inj.duration_ms.is_none() {
                inj.duration_ms = self.duration_ms;
            }
            inj.validate()
                .map_err(|e| invalid(format!("injectors[{i}]: {e}")))?;
            if !names.insert(inj.profile.name.clone()) {
                return Err(invalid(format!(
                    "injectors[{i}]: duplicate name {:?}",
                    inj.profile.name
                )));
            }
        }
        Ok(())
    }

    /// Seed used by injector `i`.
    pub fn injector_seed(&self, i: usize) -> u64 {
        self.seed
            .wrapping_mul(1_000_003)
            .wrapping_add(self.injectors[i].seed)
            .wrapping_add(i as u64)
    }

    /// CMC policy that marks each injector by its priority hint, used when the
    /// scenario does not define classification rules.
    pub fn effective_cmc_policy(&self) -> CmcPolicy {
        if !self.cmc.classification.rules.is_empty() {
            return self.cmc.clone();
        }
        let mut marking = MarkingPolicy {
            default_priority: self.cmc.marking.default_priority,
            ..Default::default()
        };
        let rules = self
            .injectors
            .iter()
            .map(|inj| {
                let class = inj.profile.name.to_lowercase();
                marking.classes.insert(class.clone(), inj.profile.priority_hint);
                ClassificationRule::source_exact(inj.source_id(), &class)
            })
            .collect();
        CmcPolicy {
            classification: ClassificationPolicy {
                rules,
                default_class: self.cmc.classification.default_class.clone(),
            },
            marking,
        }
    }

    pub fn applicable(&self, mode: Mode) -> impl Iterator<Item = &Assertion> {
        self.assertions
            .iter()
            .filter(move |a| a.modes.is_empty() || a.modes.contains(&mode))
    }

    pub fn evaluate(&self, mode: Mode, data: &Dataset, summary: &Summary) -> Vec<AssertionResult> {
        self.applicable(mode)
            .map(|a| evaluate(&a.check, data, summary))
            .collect()
    }

    pub fn priority_of(&self, injector: &str) -> Option<PriorityLevel> {
        self.injectors
            .iter()
            .find(|i| i.profile.name == injector)
            .map(|i| i.profile.priority_hint)
    }
}

fn result(name: String, passed: bool, detail: String) -> AssertionResult {
    AssertionResult {
        name,
        passed,
        detail,
    }
}

/// Did the recorded state sequence leave NORMAL, reach `via`, and return?
pub fn has_state_cycle(states: &[RttState], via: RttState) -> bool {
    let mut from_normal = false;
    let mut reached = false;
    for s in states {
        match *s {
            RttState::Normal if reached => return true,
            RttState::Normal => from_normal = true,
            s if s == via && from_normal => reached = true,
            _ => {}
        }
    }
    false
}

pub fn evaluate(check: &Check, data: &Dataset, summary: &Summary) -> AssertionResult {
    let missing = |name: String, inj: &str| result(name, false, format!("no data for injector {inj:?}"));
    match check {
        Check::MeanRttBelow { injector, ms } => {
            let name = format!("mean RTT of {injector} < {ms} ms");
            match summary.injector(injector).and_then(|s| s.rtt_mean_ms) {
                Some(m) => result(name, m < *ms, format!("mean {m:.1} ms")),
                None => missing(name, injector),
            }
        }
        Check::MaxRttAbove { injector, ms } => {
            let name = format!("RTT of {injector} exceeds {ms} ms");
            match summary.injector(injector).and_then(|s| s.rtt_max_ms) {
                Some(m) => {
                    let first = data
                        .for_injector(injector)
                        .find(|r| r.rtt_ms.is_some_and(|v| v > *ms))
                        .map(|r| r.request_index + 1);
                    let detail = match first {
                        Some(i) => format!("max {m:.1} ms, first exceeded at request {i}"),
                        None => format!("max {m:.1} ms"),
                    };
                    result(name, m > *ms, detail)
                }
                None => missing(name, injector),
            }
        }
        Check::RttTrendIncreasing { injector, from_ms } => {
            let name = format!("RTT trend of {injector} increasing after {from_ms} ms");
            let rtts: Vec<f64> = data
                .for_injector(injector)
                .filter(|r| r.outcome == Outcome::Served)
                .filter_map(|r| r.rtt_ms)
                .collect();
            match rtts.iter().position(|v| v > from_ms) {
                Some(start) => match slope(&rtts[start..]) {
                    Some(k) => result(
                        name,
                        k > 0.0,
                        format!("slope {k:.2} ms/request over {} samples", rtts.len() - start),
                    ),
                    None => result(name, false, "saturated window too short".into()),
                },
                None => result(name, false, "never saturated".into()),
            }
        }
        Check::StateCycle { via } => {
            let name = format!("state cycle NORMAL -> {via} -> NORMAL");
            let states: Vec<RttState> = data.states.iter().map(|s| s.state).collect();
            let seq = states.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" -> ");
            result(name, has_state_cycle(&states, *via), seq)
        }
        Check::AccountingClosure => {
            let name = "accounting closure".to_string();
            let mut bad = Vec::new();
            for inj in &summary.injectors {
                if inj.sent != inj.accounted() {
                    bad.push(format!("{}: sent {} accounted {}", inj.injector, inj.sent, inj.accounted()));
                }
            }
            if data.dropped > 0 {
                bad.push(format!("{} records dropped", data.dropped));
            }
            let total: u64 = summary.injectors.iter().map(|i| i.sent).sum();
            if bad.is_empty() {
                result(name, true, format!("{total} requests accounted"))
            } else {
                result(name, false, bad.join("; "))
            }
        }
        Check::LossAtMost { injector, fraction } => {
            let name = format!("loss of {injector} <= {fraction}");
            match summary.injector(injector) {
                Some(s) => result(name, s.loss_fraction <= *fraction, format!("loss {:.4}", s.loss_fraction)),
                None => missing(name, injector),
            }
        }
        Check::OverheadMedianBelow { ms } => {
            let name = format!("median CMC+PEP overhead < {ms} ms");
            let all: Vec<f64> = data.records.iter().filter_map(|r| r.pep_overhead_ms).collect();
            match crate::metrics::median(&all) {
                Some(m) => result(name, m < *ms, format!("median {m:.3} ms over {} requests", all.len())),
                None => result(name, false, "no overhead measurements".into()),
            }
        }
        Check::MeanRttOrder { injector, than } => {
            let name = format!("mean RTT of {injector} < mean RTT of {than}");
            let mean_of = |n: &str| summary.injector(n).and_then(|s| s.rtt_mean_ms);
            match (mean_of(injector), mean_of(than)) {
                (Some(a), Some(b)) => result(name, a < b, format!("{a:.1} ms vs {b:.1} ms")),
                (None, _) => missing(name, injector),
                (_, None) => missing(name, than),
            }
        }
        Check::ServedShareAtLeast { injector, fraction } => {
            let name = format!("served share of {injector} >= {fraction}");
            let total: u64 = summary.injectors.iter().map(|i| i.served).sum();
            match summary.injector(injector) {
                Some(s) if total > 0 => {
                    let share = s.served as f64 / total as f64;
                    result(name, share >= *fraction, format!("share {share:.4}"))
                }
                _ => missing(name, injector),
            }
        }
    }
}
