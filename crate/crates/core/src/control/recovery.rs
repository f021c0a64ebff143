use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::heartbeat::RuleKind;
use crate::diagnostics::TestKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RecoveryPhase {
    Running,
    Suspending,
    Diagnosing,
    Evicting,
    Rescheduling,
    Resuming,
}

impl RecoveryPhase {
    pub fn next(self) -> RecoveryPhase {
        use RecoveryPhase::*;
        match self {
            Running => Suspending,
            Suspending => Diagnosing,
            Diagnosing => Evicting,
            Evicting => Rescheduling,
            Rescheduling => Resuming,
            Resuming => Running,
        }
    }

    pub fn as_str(self) -> &'static str {
        use RecoveryPhase::*;
        match self {
            Running => "RUNNING",
            Suspending => "SUSPENDING",
            Diagnosing => "DIAGNOSING",
            Evicting => "EVICTING",
            Rescheduling => "RESCHEDULING",
            Resuming => "RESUMING",
        }
    }
}

impl fmt::Display for RecoveryPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Why a node was evicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Evidence {
    DiagnosticFailure { tests: Vec<TestKind> },
    /// No heartbeats, or awaited by peers' timeout logs while logging
    /// nothing itself.
    Silent { source: String },
    Manual { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<RuleKind>,
    pub nodes: BTreeSet<usize>,
    pub manual: bool,
    pub at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub from: RecoveryPhase,
    pub to: RecoveryPhase,
    pub at: f64,
    pub reason: String,
}

/// Recovery workflow state. Moves only along the fixed chain, except that a
/// manual eviction jumps from RUNNING straight to EVICTING.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryMachine {
    pub phase: RecoveryPhase,
    pub trigger: Option<Trigger>,
    pub evidence: BTreeMap<usize, Vec<Evidence>>,
    pub trace: Vec<Transition>,
    /// Set while waiting in RESCHEDULING for capacity.
    pub alert: Option<String>,
    pub cycles: usize,
}

impl Default for RecoveryMachine {
    fn default() -> Self {
        RecoveryMachine {
            phase: RecoveryPhase::Running,
            trigger: None,
            evidence: BTreeMap::new(),
            trace: Vec::new(),
            alert: None,
            cycles: 0,
        }
    }
}

impl RecoveryMachine {
    fn mv(&mut self, to: RecoveryPhase, at: f64, reason: String) {
        self.trace.push(Transition { from: self.phase, to, at, reason });
        self.phase = to;
    }

    pub fn begin(&mut self, trigger: Trigger) -> Result<()> {
        if self.phase != RecoveryPhase::Running {
            return Err(Error::AlreadyRecovering(self.phase.to_string()));
        }
        self.evidence.clear();
        self.alert = None;
        let (at, reason) = (trigger.at, trigger.reason.clone());
        self.trigger = Some(trigger);
        self.mv(RecoveryPhase::Suspending, at, reason);
        Ok(())
    }

    pub fn manual_evict(&mut self, node: usize, reason: &str, at: f64) -> Result<()> {
        if self.phase != RecoveryPhase::Running {
            return Err(Error::AlreadyRecovering(self.phase.to_string()));
        }
        self.evidence.clear();
        self.alert = None;
        self.evidence.entry(node).or_default().push(Evidence::Manual { reason: reason.to_string() });
        self.trigger = Some(Trigger {
            reason: format!("manual eviction of node {node}: {reason}"),
            rule: None,
            nodes: BTreeSet::from([node]),
            manual: true,
            at,
        });
        self.mv(RecoveryPhase::Evicting, at, format!("manual eviction of node {node}"));
        Ok(())
    }

    pub fn advance(&mut self, to: RecoveryPhase, at: f64, reason: impl Into<String>) -> Result<()> {
        if self.phase == RecoveryPhase::Running || to != self.phase.next() {
            return Err(Error::IllegalTransition { from: self.phase.to_string(), to: to.to_string() });
        }
        if to == RecoveryPhase::Running {
            self.cycles += 1;
            self.alert = None;
        }
        self.mv(to, at, reason.into());
        Ok(())
    }

    pub fn add_evidence(&mut self, node: usize, e: Evidence) {
        self.evidence.entry(node).or_default().push(e);
    }

    /// Transitions of the latest recovery cycle.
    pub fn last_cycle(&self) -> &[Transition] {
        let start = self
            .trace
            .iter()
            .rposition(|t| t.from == RecoveryPhase::Running)
            .unwrap_or(self.trace.len());
        &self.trace[start..]
    }
}

/// Checks a transition log against the allowed chain.
pub fn trace_is_valid(trace: &[Transition]) -> bool {
    let mut at = f64::NEG_INFINITY;
    let mut phase = RecoveryPhase::Running;
    for t in trace {
        let ok_edge = t.to == t.from.next() || (t.from == RecoveryPhase::Running && t.to == RecoveryPhase::Evicting);
        if t.from != phase || !ok_edge || t.at < at {
            return false;
        }
        phase = t.to;
        at = t.at;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use RecoveryPhase::*;

    fn trig(at: f64) -> Trigger {
        Trigger { reason: "test".into(), rule: Some(RuleKind::TrafficZero), nodes: BTreeSet::new(), manual: false, at }
    }

    #[test]
    fn full_cycle() {
        let mut m = RecoveryMachine::default();
        m.begin(trig(1.0)).unwrap();
        for (i, p) in [Diagnosing, Evicting, Rescheduling, Resuming, Running].into_iter().enumerate() {
            m.advance(p, 2.0 + i as f64, "").unwrap();
        }
        assert_eq!(m.cycles, 1);
        assert_eq!(m.trace.len(), 6);
        assert!(trace_is_valid(&m.trace));
        assert_eq!(m.last_cycle().len(), 6);
    }

    #[test]
    fn manual_skips_diagnosis_and_rejects_second_request() {
        let mut m = RecoveryMachine::default();
        m.manual_evict(3, "operator", 0.0).unwrap();
        assert_eq!(m.phase, Evicting);
        assert_eq!(m.manual_evict(4, "again", 1.0), Err(Error::AlreadyRecovering("EVICTING".into())));
        assert!(m.begin(trig(1.0)).is_err());
        assert!(trace_is_valid(&m.trace));
    }

    proptest! {
        #[test]
        fn only_chain_moves_succeed(moves in proptest::collection::vec(0usize..6, 0..40)) {
            let all = [Running, Suspending, Diagnosing, Evicting, Rescheduling, Resuming];
            let mut m = RecoveryMachine::default();
            for (i, k) in moves.into_iter().enumerate() {
                let to = all[k];
                let before = m.phase;
                let res = if before == Running && to == Suspending {
                    m.begin(trig(i as f64))
                } else if before == Running && to == Evicting {
                    m.manual_evict(0, "p", i as f64)
                } else {
                    m.advance(to, i as f64, "")
                };
                let allowed = to == before.next() || (before == Running && to == Evicting);
                prop_assert_eq!(res.is_ok(), allowed);
                if !allowed {
                    prop_assert_eq!(m.phase, before);
                }
            }
            prop_assert!(trace_is_valid(&m.trace));
        }
    }
}
