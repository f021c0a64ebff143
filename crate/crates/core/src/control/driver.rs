use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use super::heartbeat::{Action, Anomaly, AnomalyRule, Detector};
use super::pool::NodePool;
use super::recovery::{Evidence, RecoveryMachine, RecoveryPhase, Transition, Trigger};
use super::wire::{ExecState, Message};
use crate::diagnostics::DiagReport;
use crate::error::{Error, Result};

/// Where training restarts after recovery.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResumePoint {
    pub checkpoint_id: Option<u64>,
    pub state_id: Option<String>,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ControlEvent {
    Transition(Transition),
    Alert(Anomaly),
    Replaced { node: usize, slot: usize, replacement: usize, evidence: Vec<Evidence> },
    SpareRejected { node: usize },
    Stuck { reason: String },
}

/// Read-only view of the driver for status queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverStatus {
    pub phase: RecoveryPhase,
    pub at: f64,
    pub roster: Vec<usize>,
    pub spares: Vec<usize>,
    pub evicted: Vec<usize>,
    pub trigger: Option<Trigger>,
    pub evidence: BTreeMap<usize, Vec<Evidence>>,
    pub alert: Option<String>,
    pub cycles: usize,
    pub resume: ResumePoint,
    pub trace: Vec<Transition>,
}

/// The job's control loop without any I/O: feed it executor messages and
/// clock ticks, collect the messages it wants delivered.
#[derive(Debug, Clone)]
pub struct Driver {
    machine: RecoveryMachine,
    detector: Detector,
    pool: NodePool,
    connected: BTreeSet<usize>,
    /// Executors whose acknowledgement or report the current phase awaits.
    waiting: BTreeSet<usize>,
    reports: BTreeMap<usize, DiagReport>,
    evicting: BTreeSet<usize>,
    /// Evicted roster nodes still holding their slot.
    vacancies: Vec<usize>,
    /// Spare under test -> vacancy it would fill.
    candidates: BTreeMap<usize, usize>,
    resume: ResumePoint,
    outbox: Vec<(usize, Message)>,
    events: Vec<ControlEvent>,
    now: f64,
}

impl Driver {
    pub fn new(pool: NodePool, rules: Vec<AnomalyRule>, now: f64) -> Result<Self> {
        let mut detector = Detector::new(rules)?;
        for &n in &pool.roster {
            detector.watch(n, now);
        }
        Ok(Driver {
            machine: RecoveryMachine::default(),
            detector,
            pool,
            connected: BTreeSet::new(),
            waiting: BTreeSet::new(),
            reports: BTreeMap::new(),
            evicting: BTreeSet::new(),
            vacancies: Vec::new(),
            candidates: BTreeMap::new(),
            resume: ResumePoint::default(),
            outbox: Vec::new(),
            events: Vec::new(),
            now,
        })
    }

    pub fn phase(&self) -> RecoveryPhase {
        self.machine.phase
    }

    pub fn machine(&self) -> &RecoveryMachine {
        &self.machine
    }

    pub fn pool(&self) -> &NodePool {
        &self.pool
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    pub fn waiting_on(&self) -> &BTreeSet<usize> {
        &self.waiting
    }

    pub fn status(&self) -> DriverStatus {
        DriverStatus {
            phase: self.machine.phase,
            at: self.now,
            roster: self.pool.roster.clone(),
            spares: self.pool.spares.iter().copied().collect(),
            evicted: self.pool.evicted.clone(),
            trigger: self.machine.trigger.clone(),
            evidence: self.machine.evidence.clone(),
            alert: self.machine.alert.clone(),
            cycles: self.machine.cycles,
            resume: self.resume.clone(),
            trace: self.machine.trace.clone(),
        }
    }

    pub fn drain_outbox(&mut self) -> Vec<(usize, Message)> {
        std::mem::take(&mut self.outbox)
    }

    pub fn drain_events(&mut self) -> Vec<ControlEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn set_resume_point(&mut self, p: ResumePoint) {
        self.resume = p;
    }

    /// Extra evidence gathered outside the self-checks, e.g. from hang
    /// pinpointing over timeout logs. Accepted while suspending or diagnosing.
    pub fn add_evidence(&mut self, node: usize, e: Evidence) -> Result<()> {
        if !matches!(self.machine.phase, RecoveryPhase::Suspending | RecoveryPhase::Diagnosing) {
            return Err(Error::IllegalTransition { from: self.machine.phase.to_string(), to: "evidence".into() });
        }
        if !self.pool.contains(node) {
            return Err(Error::UnknownNode(node));
        }
        self.machine.add_evidence(node, e);
        Ok(())
    }

    fn send(&mut self, to: usize, msg: Message) {
        self.outbox.push((to, msg));
    }

    fn transition(&mut self, to: RecoveryPhase, reason: impl Into<String>) {
        self.machine.advance(to, self.now, reason).expect("driver only follows the chain");
        self.events.push(ControlEvent::Transition(self.machine.trace.last().unwrap().clone()));
    }

    fn live_roster(&self) -> BTreeSet<usize> {
        self.pool.roster.iter().copied().filter(|&n| !self.detector.is_silent(n)).collect()
    }

    pub fn handle(&mut self, from: usize, msg: Message, now: f64) -> Result<()> {
        self.now = self.now.max(now);
        match msg {
            Message::Hello { node_id, .. } => {
                self.connected.insert(node_id);
                if self.machine.phase == RecoveryPhase::Rescheduling && self.machine.alert.is_some() {
                    self.request_spares();
                }
            }
            Message::Heartbeat(hb) => {
                if hb.node_id != from || !self.pool.contains(from) {
                    return Ok(());
                }
                let found = self.detector.observe(&hb, self.now);
                if self.machine.phase == RecoveryPhase::Running {
                    self.on_anomalies(found);
                }
            }
            Message::Status { node_id, state, .. } => {
                if node_id != from || !self.waiting.contains(&from) {
                    return Ok(());
                }
                let expected = match self.machine.phase {
                    RecoveryPhase::Suspending => matches!(state, ExecState::Suspended),
                    RecoveryPhase::Evicting => matches!(state, ExecState::Suspended | ExecState::Evicted),
                    RecoveryPhase::Resuming => matches!(state, ExecState::Running),
                    _ => false,
                };
                if expected {
                    self.waiting.remove(&from);
                    self.maybe_advance();
                }
            }
            Message::DiagReport { report } => {
                if report.node_id != from {
                    return Ok(());
                }
                match self.machine.phase {
                    RecoveryPhase::Diagnosing if self.waiting.remove(&from) => {
                        self.reports.insert(from, report);
                        self.maybe_advance();
                    }
                    RecoveryPhase::Rescheduling if self.candidates.contains_key(&from) => self.on_spare_report(report),
                    _ => {}
                }
            }
            other => {
                return Err(Error::InvalidConfig(format!("driver does not accept {}", other.type_name())));
            }
        }
        Ok(())
    }

    /// Advances the clock and checks for silent executors.
    pub fn tick(&mut self, now: f64) {
        self.now = self.now.max(now);
        let found = self.detector.evaluate(self.now);
        if self.machine.phase == RecoveryPhase::Running {
            self.on_anomalies(found);
        } else if !found.is_empty() {
            for a in found {
                self.waiting.remove(&a.node);
                self.events.push(ControlEvent::Alert(a));
            }
            self.maybe_advance();
        }
    }

    fn on_anomalies(&mut self, found: Vec<Anomaly>) {
        let mut recover: Vec<&Anomaly> = Vec::new();
        for a in &found {
            self.events.push(ControlEvent::Alert(a.clone()));
            if a.action == Action::Recover {
                recover.push(a);
            }
        }
        if let Some(first) = recover.first() {
            let trigger = Trigger {
                reason: format!("{:?} on node {}: {}", first.rule, first.node, first.evidence),
                rule: Some(first.rule),
                nodes: recover.iter().map(|a| a.node).collect(),
                manual: false,
                at: self.now,
            };
            self.machine.begin(trigger).expect("anomalies only start recovery while running");
            self.events.push(ControlEvent::Transition(self.machine.trace.last().unwrap().clone()));
            self.waiting = self.live_roster();
            for n in self.waiting.clone() {
                self.send(n, Message::Suspend { reason: first.evidence.clone() });
            }
            self.maybe_advance();
        }
    }

    /// Operator-requested eviction of a roster node.
    pub fn manual_evict(&mut self, node: usize, reason: &str, now: f64) -> Result<RecoveryPhase> {
        self.now = self.now.max(now);
        if !self.pool.contains(node) {
            return Err(Error::UnknownNode(node));
        }
        self.machine.manual_evict(node, reason, self.now)?;
        self.events.push(ControlEvent::Transition(self.machine.trace.last().unwrap().clone()));
        self.evicting = BTreeSet::from([node]);
        self.waiting = self.live_roster();
        for n in self.waiting.clone() {
            if n == node {
                self.send(n, Message::Evict { node_id: n, reason: reason.to_string() });
            } else {
                self.send(n, Message::Suspend { reason: format!("manual eviction of node {node}") });
            }
        }
        self.maybe_advance();
        Ok(self.machine.phase)
    }

    fn maybe_advance(&mut self) {
        if !self.waiting.is_empty() {
            return;
        }
        match self.machine.phase {
            RecoveryPhase::Suspending => {
                self.transition(RecoveryPhase::Diagnosing, "all executors suspended");
                self.reports.clear();
                self.waiting = self.live_roster();
                let round = self.machine.cycles as u64;
                for n in self.waiting.clone() {
                    self.send(n, Message::RunDiagnostics { round });
                }
                self.maybe_advance();
            }
            RecoveryPhase::Diagnosing => self.decide_evictions(),
            RecoveryPhase::Evicting => self.enter_rescheduling(),
            RecoveryPhase::Resuming => {
                self.transition(RecoveryPhase::Running, "all executors running");
                self.detector.reset(self.now);
            }
            RecoveryPhase::Running | RecoveryPhase::Rescheduling => {}
        }
    }

    fn decide_evictions(&mut self) {
        for n in self.pool.roster.clone() {
            if self.detector.is_silent(n) {
                self.machine.add_evidence(n, Evidence::Silent { source: "missed heartbeats".into() });
            }
            if let Some(r) = self.reports.get(&n).filter(|r| !r.passed()) {
                let tests = r.tests.iter().filter(|t| !t.passed).map(|t| t.test).collect();
                self.machine.add_evidence(n, Evidence::DiagnosticFailure { tests });
            }
        }
        self.evicting = self.machine.evidence.keys().copied().filter(|n| self.pool.contains(*n)).collect();
        let reason = if self.evicting.is_empty() {
            "no node implicated".to_string()
        } else {
            format!("implicated nodes {:?}", self.evicting)
        };
        self.transition(RecoveryPhase::Evicting, reason);
        self.waiting = self.evicting.iter().copied().filter(|&n| !self.detector.is_silent(n)).collect();
        for n in self.evicting.clone() {
            self.send(n, Message::Evict { node_id: n, reason: "failed recovery checks".into() });
        }
        self.maybe_advance();
    }

    fn enter_rescheduling(&mut self) {
        self.transition(RecoveryPhase::Rescheduling, "evictions acknowledged");
        self.vacancies = self.pool.roster.iter().copied().filter(|n| self.evicting.contains(n)).collect();
        self.candidates.clear();
        self.request_spares();
    }

    /// Sends self-checks to spares until every vacancy has a candidate.
    fn request_spares(&mut self) {
        let open: Vec<usize> = self.vacancies.iter().copied().filter(|v| !self.candidates.values().any(|c| c == v)).collect();
        for v in open {
            let busy: BTreeSet<usize> = self.candidates.keys().copied().collect();
            let pick = self.pool.spares.iter().copied().find(|s| !busy.contains(s) && self.connected.contains(s));
            match pick {
                Some(s) => {
                    self.candidates.insert(s, v);
                    self.send(s, Message::RunDiagnostics { round: self.machine.cycles as u64 });
                }
                None => break,
            }
        }
        if self.vacancies.is_empty() {
            self.enter_resuming();
        } else if self.candidates.is_empty() {
            let reason = format!("no healthy spare for {} vacant slot(s)", self.vacancies.len());
            if self.machine.alert.as_deref() != Some(reason.as_str()) {
                self.machine.alert = Some(reason.clone());
                self.events.push(ControlEvent::Stuck { reason });
            }
        }
    }

    fn on_spare_report(&mut self, report: DiagReport) {
        let spare = report.node_id;
        let vacancy = self.candidates.remove(&spare).expect("caller checked");
        if spare == vacancy {
            if report.passed() {
                self.detector.watch(spare, self.now);
                self.vacancies.retain(|&v| v != vacancy);
                let slot = self.pool.slot_of(spare).expect("vacancy is in the roster");
                self.events.push(ControlEvent::Replaced { node: vacancy, slot, replacement: spare, evidence: vec![] });
            }
            self.request_spares();
            return;
        }
        if report.passed() {
            let slot = self.pool.swap(vacancy, spare).expect("vacancy is in the roster and candidate is a spare");
            self.detector.unwatch(vacancy);
            self.detector.watch(spare, self.now);
            self.vacancies.retain(|&v| v != vacancy);
            let evidence = self.machine.evidence.get(&vacancy).cloned().unwrap_or_default();
            self.events.push(ControlEvent::Replaced { node: vacancy, slot, replacement: spare, evidence });
        } else {
            self.pool.quarantine_spare(spare);
            self.events.push(ControlEvent::SpareRejected { node: spare });
        }
        self.request_spares();
    }

    fn enter_resuming(&mut self) {
        self.machine.alert = None;
        let p = self.resume.clone();
        self.transition(RecoveryPhase::Resuming, format!("resume from step {}", p.step));
        self.waiting = self.pool.roster.iter().copied().collect();
        for (slot, n) in self.pool.roster.clone().into_iter().enumerate() {
            self.send(n, Message::Resume { checkpoint_id: p.checkpoint_id, state_id: p.state_id.clone(), step: p.step, slot });
        }
        self.detector.reset(self.now);
    }

    /// Returns a repaired node to the spare pool.
    /// A node still holding a vacant slot is re-checked for that slot.
    pub fn add_spare(&mut self, node: usize) {
        if self.machine.phase == RecoveryPhase::Rescheduling && self.vacancies.contains(&node) {
            if !self.candidates.contains_key(&node) {
                self.candidates.insert(node, node);
                self.send(node, Message::RunDiagnostics { round: self.machine.cycles as u64 });
            }
            return;
        }
        self.pool.return_repaired(node);
        if self.machine.phase == RecoveryPhase::Rescheduling {
            self.request_spares();
        }
    }
}
