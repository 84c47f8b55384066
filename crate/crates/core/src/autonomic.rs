//! RTT-driven state detection and policy planning.
//!
//! The protected (HIGH priority) flow's round-trip times are classified into
//! the bands of an [`AdaptationRules`] table. A degraded state is entered after
//! `enter_threshold` consecutive samples in its band; NORMAL is re-entered
//! after `recover_count` consecutive samples in the NORMAL band. Each state
//! maps to a rejection-only PEP policy.

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    AdaptationRules, Mechanism, PepPolicy, PerPriority, PriorityLevel, RttState,
};

pub const DEFAULT_ENTER_THRESHOLD: u32 = 5;
pub const DEFAULT_RECOVER_COUNT: u32 = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RttSample {
    pub request_id: String,
    pub priority: PriorityLevel,
    /// Milliseconds, fractional.
    pub rtt_ms: f64,
    /// Milliseconds since the start of the run.
    pub completed_at_ms: f64,
}

impl RttSample {
    pub fn rtt(&self) -> Duration {
        Duration::from_secs_f64(self.rtt_ms.max(0.0) / 1000.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observation {
    Unchanged,
    Transition(RttState),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateMachine {
    current: RttState,
    enter_threshold: u32,
    recover_count: u32,
    streaks: [u32; 3],
}

impl Default for StateMachine {
    fn default() -> Self {
        Self::new(DEFAULT_ENTER_THRESHOLD, DEFAULT_RECOVER_COUNT)
    }
}

impl StateMachine {
    pub fn new(enter_threshold: u32, recover_count: u32) -> Self {
        Self {
            current: RttState::Normal,
            enter_threshold: enter_threshold.max(1),
            recover_count: recover_count.max(1),
            streaks: [0; 3],
        }
    }

    pub fn current(&self) -> RttState {
        self.current
    }

    pub fn streak(&self, state: RttState) -> u32 {
        self.streaks[state.index()]
    }

    fn required(&self, candidate: RttState) -> u32 {
        match candidate {
            RttState::Normal => self.recover_count,
            RttState::Warning | RttState::Critical => self.enter_threshold,
        }
    }

    /// Feeds one RTT. Only the band's own streak survives a sample.
    pub fn observe_rtt(&mut self, rtt: Duration, rules: &AdaptationRules) -> Observation {
        let band = rules.classify(rtt);
        for s in RttState::ALL {
            if s == band {
                self.streaks[s.index()] = self.streaks[s.index()].saturating_add(1);
            } else {
                self.streaks[s.index()] = 0;
            }
        }
        if band != self.current && self.streaks[band.index()] >= self.required(band) {
            self.current = band;
            Observation::Transition(band)
        } else {
            Observation::Unchanged
        }
    }
}

/// Feeds a HIGH-priority sample to the machine. Samples of other priorities
/// do not drive the loop and are ignored.
pub fn observe(sample: &RttSample, sm: &mut StateMachine, rules: &AdaptationRules) -> Observation {
    if sample.priority != PriorityLevel::High {
        return Observation::Unchanged;
    }
    sm.observe_rtt(sample.rtt(), rules)
}

/// Rejection-only policy for `state`, keeping the baseline's delay and
/// scheduling fields. HIGH is never rejected.
pub fn plan(state: RttState, rules: &AdaptationRules, baseline: &PepPolicy) -> Result<PepPolicy> {
    let rule = rules
        .rule_for(state)
        .ok_or_else(|| Error::UnknownState(state.to_string()))?;
    Ok(PepPolicy {
        rejection: PerPriority::new(0, rule.med_rejection, rule.low_rejection),
        mechanisms: BTreeSet::from([Mechanism::Reject]),
        ..baseline.clone()
    })
}

/// One line of the knowledge log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KnowledgeRecord {
    /// A sample and the state after processing it.
    Observe {
        at_ms: f64,
        sample: RttSample,
        state: RttState,
        transition: bool,
    },
    /// A planned policy was delivered to the PEP.
    Executed {
        at_ms: f64,
        state: RttState,
        policy: PepPolicy,
        attempts: u32,
    },
    /// Delivery gave up after bounded retries.
    Failed {
        at_ms: f64,
        state: RttState,
        error: String,
        attempts: u32,
    },
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn feed(sm: &mut StateMachine, rtts: &[u64]) -> Vec<Observation> {
        let rules = AdaptationRules::three_band();
        rtts.iter()
            .map(|ms| sm.observe_rtt(Duration::from_millis(*ms), &rules))
            .collect()
    }

    fn transitions(obs: &[Observation]) -> Vec<(usize, RttState)> {
        obs.iter()
            .enumerate()
            .filter_map(|(i, o)| match o {
                Observation::Transition(s) => Some((i, *s)),
                Observation::Unchanged => None,
            })
            .collect()
    }

    #[test]
    fn critical_on_fifth() {
        let mut sm = StateMachine::default();
        let obs = feed(&mut sm, &[410, 420, 430, 440, 450]);
        assert_eq!(transitions(&obs), vec![(4, RttState::Critical)]);
    }

    #[test]
    fn streak_resets_on_out_of_band() {
        let mut sm = StateMachine::default();
        let obs = feed(&mut sm, &[410, 420, 290, 430, 440, 450, 460]);
        assert!(transitions(&obs).is_empty());
        assert_eq!(sm.streak(RttState::Critical), 4);
        let obs = feed(&mut sm, &[470]);
        assert_eq!(obs, vec![Observation::Transition(RttState::Critical)]);
    }

    #[test]
    fn recovery_after_twelve() {
        let mut sm = StateMachine::default();
        feed(&mut sm, &[500; 5]);
        assert_eq!(sm.current(), RttState::Critical);
        let obs = feed(&mut sm, &[100; 12]);
        assert_eq!(transitions(&obs), vec![(11, RttState::Normal)]);
    }

    #[test]
    fn eleven_normal_samples_are_not_enough() {
        let mut sm = StateMachine::default();
        feed(&mut sm, &[500; 5]);
        let mut seq = vec![100; 11];
        seq.push(350);
        seq.extend([100; 11]);
        assert!(transitions(&feed(&mut sm, &seq)).is_empty());
        assert_eq!(sm.current(), RttState::Critical);
    }

    #[test]
    fn stable_normal() {
        let mut sm = StateMachine::default();
        let obs = feed(&mut sm, &[100; 1000]);
        assert!(obs.iter().all(|o| *o == Observation::Unchanged));
    }

    #[test]
    fn warning_and_critical_switch_directly() {
        let mut sm = StateMachine::default();
        let obs = feed(&mut sm, &[350, 350, 350, 350, 350, 450, 450, 450, 450, 450, 350, 350, 350, 350, 350]);
        assert_eq!(
            transitions(&obs),
            vec![(4, RttState::Warning), (9, RttState::Critical), (14, RttState::Warning)]
        );
    }

    #[test]
    fn non_high_samples_ignored() {
        let rules = AdaptationRules::three_band();
        let mut sm = StateMachine::default();
        for i in 0..10 {
            let s = RttSample {
                request_id: i.to_string(),
                priority: PriorityLevel::Medium,
                rtt_ms: 900.0,
                completed_at_ms: 0.0,
            };
            assert_eq!(observe(&s, &mut sm, &rules), Observation::Unchanged);
        }
        assert_eq!(sm.streak(RttState::Critical), 0);
    }

    #[test]
    fn plans_match_table() {
        let rules = AdaptationRules::three_band();
        let base = PepPolicy::default();
        let got = |s| plan(s, &rules, &base).unwrap().rejection;
        assert_eq!(got(RttState::Critical), PerPriority::new(0, 40, 80));
        assert_eq!(got(RttState::Warning), PerPriority::new(0, 30, 70));
        assert_eq!(got(RttState::Normal), PerPriority::new(0, 0, 0));
        let p = plan(RttState::Critical, &rules, &base).unwrap();
        assert_eq!(p.mechanisms, BTreeSet::from([Mechanism::Reject]));
        assert_eq!(p.weights, base.weights);
        assert!(p.validate().is_ok());
    }

    #[test]
    fn plan_unknown_state() {
        let rules = AdaptationRules::new(vec![
            crate::model::AdaptationRule {
                from_ms: 0,
                to_ms: Some(400),
                state: RttState::Normal,
                med_rejection: 0,
                low_rejection: 0,
            },
            crate::model::AdaptationRule {
                from_ms: 400,
                to_ms: None,
                state: RttState::Critical,
                med_rejection: 50,
                low_rejection: 90,
            },
        ])
        .unwrap();
        assert_eq!(
            plan(RttState::Warning, &rules, &PepPolicy::default()),
            Err(Error::UnknownState("WARNING".into()))
        );
    }

    #[test]
    fn shipped_mapping_is_monotone() {
        let rules = AdaptationRules::three_band();
        let base = PepPolicy::default();
        let plans: Vec<_> = RttState::ALL
            .iter()
            .map(|s| plan(*s, &rules, &base).unwrap().rejection)
            .collect();
        for w in plans.windows(2) {
            assert!(w[0].medium <= w[1].medium && w[0].low <= w[1].low);
            assert_eq!(w[1].high, 0);
        }
    }

    proptest! {
        #[test]
        fn replay_is_deterministic(rtts in proptest::collection::vec(0u64..800, 0..300)) {
            let a = feed(&mut StateMachine::default(), &rtts);
            let b = feed(&mut StateMachine::default(), &rtts);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn hysteresis_holds(rtts in proptest::collection::vec(0u64..800, 0..300)) {
            let rules = AdaptationRules::three_band();
            let obs = feed(&mut StateMachine::default(), &rtts);
            for (i, s) in transitions(&obs) {
                let need = if s == RttState::Normal { 12 } else { 5 };
                prop_assert!(i + 1 >= need);
                for ms in &rtts[i + 1 - need..=i] {
                    prop_assert_eq!(rules.classify(Duration::from_millis(*ms)), s);
                }
            }
        }
    }
}
