use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::model::{PerPriority, PriorityLevel};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RejectionMode {
    /// Request `k` at percentage `p` is rejected iff `floor(k·p/100)` steps up.
    #[default]
    Deterministic,
    /// Each request is rejected with probability `p/100`.
    Probabilistic { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Rejected,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counter {
    pub seen: u64,
    pub rejected: u64,
}

/// Per-priority rejection state. Counters cover the current policy window.
#[derive(Debug, Clone)]
pub struct Rejecter {
    mode: RejectionMode,
    counters: PerPriority<Counter>,
    rng: Option<StdRng>,
}

impl Rejecter {
    pub fn new(mode: RejectionMode) -> Self {
        let rng = match mode {
            RejectionMode::Deterministic => None,
            RejectionMode::Probabilistic { seed } => Some(StdRng::seed_from_u64(seed)),
        };
        Self {
            mode,
            counters: PerPriority::default(),
            rng,
        }
    }

    pub fn mode(&self) -> RejectionMode {
        self.mode
    }

    pub fn decide(&mut self, priority: PriorityLevel, percent: u32) -> Verdict {
        let percent = u64::from(percent.min(100));
        let counter = self.counters.get_mut(priority);
        counter.seen += 1;
        let reject = match &mut self.rng {
            None => {
                let k = counter.seen;
                k * percent / 100 > (k - 1) * percent / 100
            }
            Some(rng) => rng.random_bool(percent as f64 / 100.0),
        };
        if reject {
            counter.rejected += 1;
            Verdict::Rejected
        } else {
            Verdict::Pass
        }
    }

    /// Starts a fresh percentage window. The random stream is not reseeded.
    pub fn reset(&mut self) {
        self.counters = PerPriority::default();
    }

    pub fn counters(&self) -> &PerPriority<Counter> {
        &self.counters
    }
}
