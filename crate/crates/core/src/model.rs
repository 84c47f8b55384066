//! Domain types shared by every stage of the pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use bytes::Bytes;
use http::{HeaderMap, HeaderName, HeaderValue, Method};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the header carrying the request priority mark.
pub const TOS_HTTP: &str = "TOS_HTTP";
/// [`TOS_HTTP`] as a header name; names are case-insensitive on the wire.
pub const TOS_HTTP_HEADER: HeaderName = HeaderName::from_static("tos_http");
/// Header an injector may set to identify itself independently of its address.
pub const SOURCE_ID_HEADER: &str = "x-source-id";
/// Observability header naming the class the CMC assigned.
pub const CMC_CLASS_HEADER: &str = "x-cmc-class";
/// Response header describing any non-passthrough PEP outcome.
pub const PEP_ACTION_HEADER: &str = "x-pep-action";
/// Response header set by the gateway when its accept queue overflows.
pub const GW_ACTION_HEADER: &str = "x-gw-action";

/// Priority carried in `TOS_HTTP`. Ordered `Low < Medium < High`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PriorityLevel {
    Low,
    Medium,
    High,
}

impl PriorityLevel {
    /// Highest first.
    pub const ALL: [PriorityLevel; 3] = [PriorityLevel::High, PriorityLevel::Medium, PriorityLevel::Low];

    pub fn as_wire(self) -> &'static str {
        match self {
            PriorityLevel::High => "PRIORITY_HIGH",
            PriorityLevel::Medium => "PRIORITY_MEDIUM",
            PriorityLevel::Low => "PRIORITY_LOW",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PriorityLevel::High => "HIGH",
            PriorityLevel::Medium => "MEDIUM",
            PriorityLevel::Low => "LOW",
        }
    }

    /// Position in [`PriorityLevel::ALL`].
    pub fn index(self) -> usize {
        match self {
            PriorityLevel::High => 0,
            PriorityLevel::Medium => 1,
            PriorityLevel::Low => 2,
        }
    }
}

impl fmt::Display for PriorityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parses an exact `TOS_HTTP` wire value.
pub fn parse_priority(header_value: &str) -> Result<PriorityLevel> {
    match header_value {
        "PRIORITY_HIGH" => Ok(PriorityLevel::High),
        "PRIORITY_MEDIUM" => Ok(PriorityLevel::Medium),
        "PRIORITY_LOW" => Ok(PriorityLevel::Low),
        other => Err(Error::MalformedPriority(other.to_string())),
    }
}

impl FromStr for PriorityLevel {
    type Err = Error;

    /// Accepts either the wire form (`PRIORITY_HIGH`) or the short form (`HIGH`).
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HIGH" => Ok(PriorityLevel::High),
            "MEDIUM" | "MED" => Ok(PriorityLevel::Medium),
            "LOW" => Ok(PriorityLevel::Low),
            _ => parse_priority(s),
        }
    }
}

/// A total map from [`PriorityLevel`] to `T`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerPriority<T> {
    pub high: T,
    pub medium: T,
    pub low: T,
}

impl<T> PerPriority<T> {
    pub fn new(high: T, medium: T, low: T) -> Self {
        Self { high, medium, low }
    }

    pub fn get(&self, p: PriorityLevel) -> &T {
        match p {
            PriorityLevel::High => &self.high,
            PriorityLevel::Medium => &self.medium,
            PriorityLevel::Low => &self.low,
        }
    }

    pub fn get_mut(&mut self, p: PriorityLevel) -> &mut T {
        match p {
            PriorityLevel::High => &mut self.high,
            PriorityLevel::Medium => &mut self.medium,
            PriorityLevel::Low => &mut self.low,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (PriorityLevel, &T)> {
        PriorityLevel::ALL.into_iter().map(move |p| (p, self.get(p)))
    }

    pub fn map<U>(&self, mut f: impl FnMut(PriorityLevel, &T) -> U) -> PerPriority<U> {
        PerPriority {
            high: f(PriorityLevel::High, &self.high),
            medium: f(PriorityLevel::Medium, &self.medium),
            low: f(PriorityLevel::Low, &self.low),
        }
    }
}

/// An HTTP request as seen by the pipeline, with its priority mark and
/// ingress timestamp.
///
/// `priority` is present exactly when a well-formed `TOS_HTTP` header is
/// present: a malformed mark is stripped on construction so the request is
/// treated as unmarked.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedRequest {
    pub method: Method,
    /// Path plus optional query.
    pub target: String,
    pub body: Bytes,
    pub source_id: String,
    pub destination: String,
    headers: HeaderMap,
    priority: Option<PriorityLevel>,
    ingress_ns: u64,
}

impl TaggedRequest {
    /// `peer` is the remote network address as text; only its host part is
    /// kept when no `X-Source-Id` header is supplied.
    pub fn new(
        method: Method,
        target: impl Into<String>,
        mut headers: HeaderMap,
        body: Bytes,
        peer: &str,
        ingress_ns: u64,
    ) -> Self {
        let priority = match headers.get(TOS_HTTP).map(|v| v.to_str().map(parse_priority)) {
            Some(Ok(Ok(p))) => Some(p),
            Some(_) => {
                headers.remove(TOS_HTTP);
                None
            }
            None => None,
        };
        let source_id = source_id_for(&headers, peer);
        let destination = headers
            .get(http::header::HOST)
            .and_then(|v| v.to_str().ok())
            .unwrap_or_default()
            .to_string();
        Self {
            method,
            target: target.into(),
            body,
            source_id,
            destination,
            headers,
            priority,
            ingress_ns,
        }
    }

    pub fn headers(&self) -> &HeaderMap {
        &self.headers
    }

    pub fn priority(&self) -> Option<PriorityLevel> {
        self.priority
    }

    pub fn ingress_ns(&self) -> u64 {
        self.ingress_ns
    }

    /// URL path without the query string.
    pub fn path(&self) -> &str {
        self.target.split('?').next().unwrap_or_default()
    }

    /// Stamps `TOS_HTTP`. Leaves every other field untouched.
    pub fn with_priority(mut self, p: PriorityLevel) -> Self {
        self.headers
            .insert(TOS_HTTP_HEADER, HeaderValue::from_static(p.as_wire()));
        self.priority = Some(p);
        self
    }

    /// Adds or replaces a non-`TOS_HTTP` header.
    pub fn set_header(&mut self, name: HeaderName, value: HeaderValue) {
        debug_assert!(name != TOS_HTTP_HEADER);
        self.headers.insert(name, value);
    }

    pub fn into_parts(self) -> (Method, String, HeaderMap, Bytes) {
        (self.method, self.target, self.headers, self.body)
    }
}

/// Source identity: `X-Source-Id` when present, else the peer host.
pub fn source_id_for(headers: &HeaderMap, peer: &str) -> String {
    if let Some(id) = headers.get(SOURCE_ID_HEADER).and_then(|v| v.to_str().ok()) {
        return id.to_string();
    }
    match peer.parse::<std::net::SocketAddr>() {
        Ok(addr) => addr.ip().to_string(),
        Err(_) => peer.to_string(),
    }
}

/// Predicate over one request attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchExpr {
    Exact(String),
    Prefix(String),
}

impl MatchExpr {
    pub fn matches(&self, value: &str) -> bool {
        match self {
            MatchExpr::Exact(s) => value == s,
            MatchExpr::Prefix(s) => value.starts_with(s.as_str()),
        }
    }
}

/// One classification rule. All present predicates must hold; a rule with no
/// predicate matches everything.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<MatchExpr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub destination: Option<MatchExpr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<MatchExpr>,
    pub class: String,
}

impl ClassificationRule {
    pub fn source_exact(source: &str, class: &str) -> Self {
        Self {
            source: Some(MatchExpr::Exact(source.to_string())),
            destination: None,
            path: None,
            class: class.to_string(),
        }
    }

    pub fn matches(&self, req: &TaggedRequest) -> bool {
        let check = |m: &Option<MatchExpr>, v: &str| m.as_ref().is_none_or(|m| m.matches(v));
        check(&self.source, &req.source_id)
            && check(&self.destination, &req.destination)
            && check(&self.path, req.path())
    }
}

/// Ordered rules followed by the terminal default class, which always matches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationPolicy {
    #[serde(default)]
    pub rules: Vec<ClassificationRule>,
    #[serde(default = "default_class_name")]
    pub default_class: String,
}

fn default_class_name() -> String {
    "default".to_string()
}

impl Default for ClassificationPolicy {
    fn default() -> Self {
        Self {
            rules: Vec::new(),
            default_class: default_class_name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkingPolicy {
    #[serde(default)]
    pub classes: BTreeMap<String, PriorityLevel>,
    pub default_priority: PriorityLevel,
}

impl MarkingPolicy {
    pub fn priority_for(&self, class: &str) -> PriorityLevel {
        self.classes
            .get(class)
            .copied()
            .unwrap_or(self.default_priority)
    }
}

impl Default for MarkingPolicy {
    fn default() -> Self {
        Self {
            classes: BTreeMap::new(),
            default_priority: PriorityLevel::Low,
        }
    }
}

/// Classification rules and class marking, replaced together on update.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CmcPolicy {
    #[serde(default)]
    pub classification: ClassificationPolicy,
    #[serde(default)]
    pub marking: MarkingPolicy,
}

/// PEP mechanisms, in the order they are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mechanism {
    Reject,
    Delay,
    Schedule,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Discipline {
    #[default]
    PriorityFirst,
    Wfq,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PepPolicy {
    /// Percentage in `0..=100` per priority.
    pub rejection: PerPriority<u32>,
    pub delay_ms: PerPriority<u64>,
    pub discipline: Discipline,
    pub weights: PerPriority<u32>,
    pub mechanisms: BTreeSet<Mechanism>,
}

impl Default for PepPolicy {
    /// Pure passthrough.
    fn default() -> Self {
        Self {
            rejection: PerPriority::default(),
            delay_ms: PerPriority::default(),
            discipline: Discipline::PriorityFirst,
            weights: PerPriority::new(4, 2, 1),
            mechanisms: BTreeSet::new(),
        }
    }
}

impl PepPolicy {
    pub fn validate(self) -> Result<Self> {
        for (p, pct) in self.rejection.iter() {
            if *pct > 100 {
                return Err(Error::policy(
                    format!("rejection.{}", p.as_str().to_lowercase()),
                    format!("{pct} is out of range 0..=100"),
                ));
            }
        }
        for (p, w) in self.weights.iter() {
            if *w == 0 {
                return Err(Error::policy(
                    format!("weights.{}", p.as_str().to_lowercase()),
                    "non-positive weight",
                ));
            }
        }
        Ok(self)
    }

    pub fn is_enabled(&self, m: Mechanism) -> bool {
        self.mechanisms.contains(&m)
    }

    pub fn delay_for(&self, p: PriorityLevel) -> Duration {
        Duration::from_millis(*self.delay_ms.get(p))
    }
}

/// Free-function form of [`PepPolicy::validate`].
pub fn validate_policy(p: PepPolicy) -> Result<PepPolicy> {
    p.validate()
}

/// RTT state of the protected flow. Ordered by severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RttState {
    Normal,
    Warning,
    Critical,
}

impl RttState {
    pub const ALL: [RttState; 3] = [RttState::Normal, RttState::Warning, RttState::Critical];

    pub fn as_str(self) -> &'static str {
        match self {
            RttState::Normal => "NORMAL",
            RttState::Warning => "WARNING",
            RttState::Critical => "CRITICAL",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for RttState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RttState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NORMAL" => Ok(RttState::Normal),
            "WARNING" => Ok(RttState::Warning),
            "CRITICAL" => Ok(RttState::Critical),
            _ => Err(Error::UnknownState(s.to_string())),
        }
    }
}

/// RTT band `[from_ms, to_ms)` mapped to a state and its rejection percentages.
/// `to_ms = None` means unbounded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptationRule {
    pub from_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to_ms: Option<u64>,
    pub state: RttState,
    pub med_rejection: u32,
    pub low_rejection: u32,
}

impl AdaptationRule {
    pub fn contains(&self, rtt: Duration) -> bool {
        rtt >= Duration::from_millis(self.from_ms)
            && self.to_ms.is_none_or(|to| rtt < Duration::from_millis(to))
    }
}

/// Validated rule set whose bands partition `[0, ∞)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<AdaptationRule>", into = "Vec<AdaptationRule>")]
pub struct AdaptationRules(Vec<AdaptationRule>);

impl AdaptationRules {
    /// Sorts by lower bound and checks the partition, state uniqueness and
    /// percentage ranges.
    pub fn new(mut rules: Vec<AdaptationRule>) -> Result<Self> {
        if rules.is_empty() {
            return Err(Error::InvalidRules("no rules".into()));
        }
        rules.sort_by_key(|r| r.from_ms);
        if rules[0].from_ms != 0 {
            return Err(Error::InvalidRules(format!(
                "first band starts at {} ms, not 0",
                rules[0].from_ms
            )));
        }
        let mut seen = BTreeSet::new();
        for (i, r) in rules.iter().enumerate() {
            if !seen.insert(r.state) {
                return Err(Error::InvalidRules(format!("state {} appears twice", r.state)));
            }
            if r.med_rejection > 100 || r.low_rejection > 100 {
                return Err(Error::InvalidRules(format!(
                    "rejection for {} out of range 0..=100",
                    r.state
                )));
            }
            match (r.to_ms, rules.get(i + 1)) {
                (Some(to), Some(next)) if to == next.from_ms && to > r.from_ms => {}
                (Some(to), Some(next)) => {
                    return Err(Error::InvalidRules(format!(
                        "band [{}, {}) does not meet next band at {}",
                        r.from_ms, to, next.from_ms
                    )))
                }
                (None, None) => {}
                (Some(to), None) => {
                    return Err(Error::InvalidRules(format!(
                        "last band ends at {to} ms instead of being unbounded"
                    )))
                }
                (None, Some(_)) => {
                    return Err(Error::InvalidRules("unbounded band is not last".into()))
                }
            }
        }
        Ok(Self(rules))
    }

    /// `[0,300) NORMAL 0/0`, `[300,400) WARNING 30/70`, `[400,∞) CRITICAL 40/80`.
    pub fn three_band() -> Self {
        Self(vec![
            AdaptationRule {
                from_ms: 0,
                to_ms: Some(300),
                state: RttState::Normal,
                med_rejection: 0,
                low_rejection: 0,
            },
            AdaptationRule {
                from_ms: 300,
                to_ms: Some(400),
                state: RttState::Warning,
                med_rejection: 30,
                low_rejection: 70,
            },
            AdaptationRule {
                from_ms: 400,
                to_ms: None,
                state: RttState::Critical,
                med_rejection: 40,
                low_rejection: 80,
            },
        ])
    }

    pub fn rules(&self) -> &[AdaptationRule] {
        &self.0
    }

    /// State whose band contains `rtt`.
    pub fn classify(&self, rtt: Duration) -> RttState {
        self.0
            .iter()
            .find(|r| r.contains(rtt))
            .map(|r| r.state)
            .expect("bands partition [0, inf)")
    }

    pub fn rule_for(&self, state: RttState) -> Option<&AdaptationRule> {
        self.0.iter().find(|r| r.state == state)
    }
}

impl Default for AdaptationRules {
    fn default() -> Self {
        Self::three_band()
    }
}

impl TryFrom<Vec<AdaptationRule>> for AdaptationRules {
    type Error = Error;

    fn try_from(v: Vec<AdaptationRule>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<AdaptationRules> for Vec<AdaptationRule> {
    fn from(r: AdaptationRules) -> Self {
        r.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArrivalModel {
    /// Constant inter-arrival `1 / rate`.
    Periodic,
    /// Poisson arrivals with mean rate `rate`.
    Stochastic,
    /// `size` back-to-back requests every `period_ms`.
    Burst { size: u32, period_ms: u64 },
}

/// Traffic profile of one monitoring application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppProfile {
    pub name: String,
    /// Requests per second.
    pub rate: f64,
    pub arrival: ArrivalModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptable_rtt_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptable_loss: Option<f64>,
    pub priority_hint: PriorityLevel,
}

impl AppProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Error::InvalidProfile {
            name: self.name.clone(),
            reason: reason.to_string(),
        };
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(bad("rate must be > 0"));
        }
        if let ArrivalModel::Burst { size, period_ms } = self.arrival {
            if size < 1 {
                return Err(bad("burst size must be >= 1"));
            }
            if period_ms == 0 {
                return Err(bad("burst period must be > 0"));
            }
        }
        if let Some(loss) = self.acceptable_loss {
            if !(0.0..=1.0).contains(&loss) {
                return Err(bad("acceptable loss must be in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Stub gateway parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub service_time_ms: u64,
    /// Uniform jitter in `[-jitter, +jitter]` added to each service time.
    pub service_time_jitter_ms: u64,
    pub worker_pool_size: u32,
    pub accept_queue_capacity: usize,
    pub seed: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            service_time_ms: 50,
            service_time_jitter_ms: 0,
            worker_pool_size: 1,
            accept_queue_capacity: 500,
            seed: 0,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.service_time_ms == 0 {
            return Err(Error::policy("service_time_ms", "must be > 0"));
        }
        if self.worker_pool_size == 0 {
            return Err(Error::policy("worker_pool_size", "must be >= 1"));
        }
        Ok(())
    }
}
