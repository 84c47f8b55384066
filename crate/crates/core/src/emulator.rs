//! Injector specifications and their open-loop arrival schedules.

use std::time::Duration;

use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AppProfile, ArrivalModel};

/// How long an injector runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunBound {
    Requests(u64),
    Duration(Duration),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectorSpec {
    pub profile: AppProfile,
    /// `host:port` the requests are sent to. Filled in by the scenario runner
    /// when left empty.
    #[serde(default)]
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_requests: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_ms: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    /// Value of `X-Source-Id`; defaults to the profile name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    /// Request path; defaults to `/{profile name}/data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl InjectorSpec {
    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        self.bound().map(|_| ())
    }

    pub fn bound(&self) -> Result<RunBound> {
        match (self.total_requests, self.duration_ms) {
            (Some(n), None) => Ok(RunBound::Requests(n)),
            (None, Some(ms)) => Ok(RunBound::Duration(Duration::from_millis(ms))),
            _ => Err(Error::InvalidProfile {
                name: self.profile.name.clone(),
                reason: "exactly one of total_requests and duration_ms must be set".into(),
            }),
        }
    }

    pub fn source_id(&self) -> &str {
        self.source_id.as_deref().unwrap_or(&self.profile.name)
    }

    pub fn path(&self) -> String {
        self.path
            .clone()
            .unwrap_or_else(|| format!("/{}/data", self.profile.name))
    }

    pub fn schedule(&self) -> Result<ArrivalSchedule> {
        self.validate()?;
        Ok(ArrivalSchedule::new(&self.profile, self.bound()?, self.seed))
    }
}

/// Send offsets from the injector start, in order.
#[derive(Debug)]
pub struct ArrivalSchedule {
    model: ArrivalModel,
    rate: f64,
    bound: RunBound,
    index: u64,
    clock: f64,
    rng: StdRng,
    exp: Option<Exp<f64>>,
}

impl ArrivalSchedule {
    pub fn new(profile: &AppProfile, bound: RunBound, seed: u64) -> Self {
        Self {
            model: profile.arrival,
            rate: profile.rate,
            bound,
            index: 0,
            clock: 0.0,
            rng: StdRng::seed_from_u64(seed),
            exp: Exp::new(profile.rate).ok(),
        }
    }

    fn offset_secs(&mut self) -> f64 {
        let i = self.index;
        match self.model {
            ArrivalModel::Periodic => i as f64 / self.rate,
            ArrivalModel::Stochastic => {
                if i > 0 {
                    let gap = self
                        .exp
                        .as_ref()
                        .map(|e| e.sample(&mut self.rng))
                        .unwrap_or(1.0 / self.rate);
                    self.clock += gap;
                }
                self.clock
            }
            ArrivalModel::Burst { size, period_ms } => {
                let burst = i / u64::from(size.max(1));
                (burst * period_ms) as f64 / 1000.0
            }
        }
    }
}

impl Iterator for ArrivalSchedule {
    type Item = Duration;

    fn next(&mut self) -> Option<Duration> {
        if let RunBound::Requests(n) = self.bound {
            if self.index >= n {
                return None;
            }
        }
        let at = Duration::from_secs_f64(self.offset_secs());
        if let RunBound::Duration(d) = self.bound {
            if at >= d {
                return None;
            }
        }
        self.index += 1;
        Some(at)
    }
}
