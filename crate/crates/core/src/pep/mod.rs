//! Performance enhancing proxy: per-priority rejection, delaying and
//! scheduling of marked requests.

mod queues;
mod rejecter;

pub use queues::{PriorityQueues, QueueFull, QueueLengths, QueueSnapshot};
pub use rejecter::{Counter, Rejecter, RejectionMode, Verdict};

use serde::{Deserialize, Serialize};

use crate::model::{Mechanism, PepPolicy, PerPriority, PriorityLevel, TaggedRequest};

/// Priority the PEP acts on. Unmarked requests are handled as `LOW`.
pub fn effective_priority(req: &TaggedRequest) -> PriorityLevel {
    req.priority().unwrap_or(PriorityLevel::Low)
}

/// The enabled mechanisms in application order: reject, delay, schedule.
/// Empty means straight to the forwarder.
pub fn control(policy: &PepPolicy) -> Vec<Mechanism> {
    policy.mechanisms.iter().copied().collect()
}

/// Value of the `X-PEP-Action` header for each non-passthrough outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PepAction {
    Rejected,
    DelayOverflow,
    QueueOverflow,
}

impl PepAction {
    pub fn as_str(self) -> &'static str {
        match self {
            PepAction::Rejected => "rejected",
            PepAction::DelayOverflow => "delay-overflow",
            PepAction::QueueOverflow => "queue-overflow",
        }
    }
}

/// Per-priority counters exposed by `GET /admin/pep/stats`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorityStats {
    pub seen: u64,
    pub rejected: u64,
    pub delayed: u64,
    pub delay_overflow: u64,
    pub queued: u64,
    pub queue_overflow: u64,
    pub dispatched: u64,
    pub forwarded: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PepStats {
    pub per_priority: PerPriority<PriorityStats>,
    /// Currently waiting in the scheduler queues.
    pub queue_lengths: PerPriority<usize>,
    /// Seen/rejected counts of the rejecter's current window.
    pub rejecter_window: PerPriority<Counter>,
    pub policy: PepPolicy,
    pub rejection_mode: RejectionMode,
    pub policy_updates: u64,
}

/// Server-side settings that are not part of the policy pushed by the manager.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PepConfig {
    pub rejection_mode: RejectionMode,
    /// Per-priority scheduler queue bound.
    pub queue_capacity: usize,
    /// Requests the scheduler lets through to the gateway at once.
    pub forwarder_concurrency: usize,
    /// Requests that may be held by the delayer at once.
    pub delay_capacity: usize,
}

impl Default for PepConfig {
    fn default() -> Self {
        Self {
            rejection_mode: RejectionMode::Deterministic,
            queue_capacity: 1000,
            forwarder_concurrency: 4,
            delay_capacity: 10_000,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn with(ms: &[Mechanism]) -> PepPolicy {
        PepPolicy {
            mechanisms: ms.iter().copied().collect::<BTreeSet<_>>(),
            ..PepPolicy::default()
        }
    }

    #[test]
    fn chain_order_is_fixed() {
        assert_eq!(control(&with(&[Mechanism::Reject])), vec![Mechanism::Reject]);
        assert!(control(&with(&[])).is_empty());
        assert_eq!(
            control(&with(&[Mechanism::Schedule, Mechanism::Reject])),
            vec![Mechanism::Reject, Mechanism::Schedule]
        );
        assert_eq!(
            control(&with(&[Mechanism::Schedule, Mechanism::Delay, Mechanism::Reject])),
            vec![Mechanism::Reject, Mechanism::Delay, Mechanism::Schedule]
        );
    }
}
