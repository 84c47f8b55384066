//! Load balancing over gateway instances.
//!
//! Federation (moving platform components such as the database to their own
//! hosts) is not modeled; an instance here is always a whole gateway. Adding
//! a placement strategy for split components would extend [`Strategy`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    #[default]
    RoundRobin,
    WeightedRoundRobin,
    LoadOriented,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub address: String,
    #[serde(default = "one")]
    pub weight: u32,
}

fn one() -> u32 {
    1
}

/// Body of `PUT /admin/lb/pool`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub instances: Vec<InstanceSpec>,
    #[serde(default)]
    pub strategy: Strategy,
    /// How long a failed instance is skipped before it is tried again.
    #[serde(default = "default_cooldown")]
    pub cooldown_ms: u64,
}

fn default_cooldown() -> u64 {
    2_000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceStats {
    pub address: String,
    pub weight: u32,
    pub healthy: bool,
    pub in_flight: u64,
    pub picks: u64,
}

#[derive(Debug, Clone)]
struct Instance {
    address: String,
    weight: u32,
    in_flight: u64,
    healthy: bool,
    failed_at_ms: u64,
    picks: u64,
    // smooth WRR running weight
    current: i64,
}

#[derive(Debug, Clone)]
pub struct InstancePool {
    instances: Vec<Instance>,
    strategy: Strategy,
    cooldown_ms: u64,
    rr_cursor: usize,
}

impl InstancePool {
    pub fn new(config: PoolConfig) -> Result<Self> {
        if config.instances.is_empty() {
            return Err(Error::InvalidPool("at least one instance is required".into()));
        }
        if let Some(bad) = config.instances.iter().find(|i| i.weight == 0) {
            return Err(Error::InvalidPool(format!("weight of {} must be >= 1", bad.address)));
        }
        Ok(Self {
            instances: config
                .instances
                .into_iter()
                .map(|s| Instance {
                    address: s.address,
                    weight: s.weight,
                    in_flight: 0,
                    healthy: true,
                    failed_at_ms: 0,
                    picks: 0,
                    current: 0,
                })
                .collect(),
            strategy: config.strategy,
            cooldown_ms: config.cooldown_ms,
            rr_cursor: 0,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn address(&self, idx: usize) -> &str {
        &self.instances[idx].address
    }

    fn eligible(&self, idx: usize, now_ms: u64) -> bool {
        let i = &self.instances[idx];
        i.healthy || now_ms.saturating_sub(i.failed_at_ms) >= self.cooldown_ms
    }

    /// Chooses an instance and counts the request as in flight on it.
    pub fn pick(&mut self, now_ms: u64) -> Result<usize> {
        let n = self.instances.len();
        let idx = match self.strategy {
            Strategy::RoundRobin => {
                let idx = (0..n)
                    .map(|off| (self.rr_cursor + off) % n)
                    .find(|&i| self.eligible(i, now_ms))
                    .ok_or(Error::NoHealthyInstance)?;
                self.rr_cursor = (idx + 1) % n;
                idx
            }
            Strategy::WeightedRoundRobin => {
                let eligible: Vec<usize> = (0..n).filter(|&i| self.eligible(i, now_ms)).collect();
                if eligible.is_empty() {
                    return Err(Error::NoHealthyInstance);
                }
                let total: i64 = eligible.iter().map(|&i| i64::from(self.instances[i].weight)).sum();
                let mut best = eligible[0];
                for &i in &eligible {
                    self.instances[i].current += i64::from(self.instances[i].weight);
                    if self.instances[i].current > self.instances[best].current {
                        best = i;
                    }
                }
                self.instances[best].current -= total;
                best
            }
            Strategy::LoadOriented => (0..n)
                .filter(|&i| self.eligible(i, now_ms))
                .min_by_key(|&i| self.instances[i].in_flight)
                .ok_or(Error::NoHealthyInstance)?,
        };
        let inst = &mut self.instances[idx];
        inst.in_flight += 1;
        inst.picks += 1;
        Ok(idx)
    }

    /// Ends an in-flight request and records the instance's health.
    pub fn release(&mut self, idx: usize, success: bool, now_ms: u64) {
        let inst = &mut self.instances[idx];
        inst.in_flight = inst.in_flight.saturating_sub(1);
        if success {
            inst.healthy = true;
        } else {
            inst.healthy = false;
            inst.failed_at_ms = now_ms;
        }
    }

    /// Overrides the in-flight gauge; used to replay externally observed loads.
    pub fn set_in_flight(&mut self, idx: usize, in_flight: u64) {
        self.instances[idx].in_flight = in_flight;
    }

    pub fn set_healthy(&mut self, idx: usize, healthy: bool, now_ms: u64) {
        self.instances[idx].healthy = healthy;
        if !healthy {
            self.instances[idx].failed_at_ms = now_ms;
        }
    }

    pub fn stats(&self) -> Vec<InstanceStats> {
        self.instances
            .iter()
            .map(|i| InstanceStats {
                address: i.address.clone(),
                weight: i.weight,
                healthy: i.healthy,
                in_flight: i.in_flight,
                picks: i.picks,
            })
            .collect()
    }
}
