use std::collections::{BTreeMap, BTreeSet};

use super::driver::Driver;
use super::executor::{Executor, Telemetry};
use super::heartbeat::AnomalyRule;
use super::pool::NodePool;
use super::wire::{ExecState, Message};
use crate::diagnostics::{run_suite, DiagConfig, DiagReport, Probe};
use crate::error::Result;

/// Driver and executors wired together in one process, exchanging the same
/// messages the socket transport carries.
#[derive(Debug, Clone)]
pub struct LocalCluster {
    pub driver: Driver,
    pub executors: BTreeMap<usize, Executor>,
    pub diag: DiagConfig,
    pub durations: PhaseDurations,
    /// Executors that stopped answering (machine down).
    pub dead: BTreeSet<usize>,
    /// Every command and reply delivered, in order: (time, from, to,
    /// message type). Heartbeats are not logged.
    pub log: Vec<(f64, usize, usize, &'static str)>,
}

/// Node id used as the driver's address in the message log.
pub const DRIVER: usize = usize::MAX;

/// Simulated time an executor takes to act on each command.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseDurations {
    pub suspend: f64,
    pub evict: f64,
    /// Pod allocation on a spare before it can run self-checks.
    pub reschedule: f64,
    /// Process restart plus checkpoint load.
    pub resume: f64,
}

impl Default for PhaseDurations {
    fn default() -> Self {
        PhaseDurations { suspend: 10.0, evict: 5.0, reschedule: 120.0, resume: 60.0 }
    }
}

/// Executor replies to one round of driver commands.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// When the replies reach the driver.
    pub at: f64,
    pub replies: Vec<(usize, Message)>,
    /// Commands handed out.
    pub sent: usize,
    pub diag_nodes: usize,
    pub diag_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PumpReport {
    pub messages: usize,
    /// Wall time of the self-check rounds run during this pump.
    pub diag_time: f64,
    pub diag_rounds: usize,
    /// Clock after the last delivery.
    pub end: f64,
}

impl LocalCluster {
    /// Health-checks every node, fills `need` slots and starts executors on
    /// roster and spare nodes.
    pub fn launch(probe: &dyn Probe, need: usize, rules: Vec<AnomalyRule>, diag: DiagConfig, now: f64) -> Result<Self> {
        let all: Vec<usize> = (0..probe.node_count()).collect();
        let suite = run_suite(probe, &all, &diag);
        let pool = NodePool::allocate(all.len(), need, |n| !suite.implicated.contains(&n))?;
        let gpus = probe.spec().gpus_per_node;
        let mut executors = BTreeMap::new();
        for (slot, &n) in pool.roster.iter().enumerate() {
            let mut e = Executor::new(n, gpus, ExecState::Running);
            e.slot = Some(slot);
            executors.insert(n, e);
        }
        for &n in &pool.spares {
            executors.insert(n, Executor::new(n, gpus, ExecState::Idle));
        }
        let mut driver = Driver::new(pool, rules, now)?;
        let mut log = Vec::new();
        for (&n, e) in &executors {
            driver.handle(n, e.hello(), now)?;
            log.push((now, n, DRIVER, "HELLO"));
        }
        Ok(LocalCluster { driver, executors, diag, durations: PhaseDurations::default(), dead: BTreeSet::new(), log })
    }

    /// Delivers driver output to executors and their replies back until
    /// nothing is in flight, advancing the clock by how long each batch of
    /// commands takes to carry out.
    pub fn pump(&mut self, probe: &dyn Probe, now: f64) -> PumpReport {
        let mut rep = PumpReport { end: now, ..PumpReport::default() };
        let mut t = now;
        loop {
            let batch = match self.dispatch(probe, t) {
                Some(b) => b,
                None => {
                    // an unresponsive executor stalls the phase until its
                    // heartbeats are missed
                    let waiting = self.driver.waiting_on().clone();
                    let deadline = waiting
                        .iter()
                        .filter_map(|&n| self.driver.detector().silence_deadline(n))
                        .fold(f64::INFINITY, f64::min);
                    if waiting.is_empty() || !deadline.is_finite() {
                        break;
                    }
                    t = t.max(deadline + 1e-9);
                    self.driver.tick(t);
                    continue;
                }
            };
            rep.messages += batch.sent + batch.replies.len();
            if batch.diag_nodes > 0 {
                rep.diag_rounds += 1;
                rep.diag_time += batch.diag_time;
            }
            t = batch.at;
            self.deliver(batch);
        }
        rep.end = t;
        rep
    }

    /// Hands everything in the driver's outbox to the executors. Returns the
    /// replies and when they arrive, or `None` when nothing was queued.
    /// Self-check requests that go out together run as one suite so the
    /// neighbour all-reduce tests can pair nodes.
    pub fn dispatch(&mut self, probe: &dyn Probe, t: f64) -> Option<Batch> {
        let out = self.driver.drain_outbox();
        if out.is_empty() {
            return None;
        }
        let diag_nodes: Vec<usize> = out
            .iter()
            .filter(|(to, m)| matches!(m, Message::RunDiagnostics { .. }) && !self.dead.contains(to))
            .map(|(to, _)| *to)
            .collect();
        let mut reports: BTreeMap<usize, DiagReport> = BTreeMap::new();
        let mut diag_time = 0.0;
        if !diag_nodes.is_empty() {
            let suite = run_suite(probe, &diag_nodes, &self.diag);
            diag_time = suite.duration;
            reports = suite.reports.into_iter().map(|r| (r.node_id, r)).collect();
        }
        let sent = out.len();
        let mut replies = Vec::new();
        let mut delay: f64 = 0.0;
        for (to, msg) in out {
            self.log.push((t, DRIVER, to, msg.type_name()));
            if self.dead.contains(&to) {
                continue;
            }
            let Some(e) = self.executors.get_mut(&to) else { continue };
            let spare = e.state == ExecState::Idle;
            let d = match &msg {
                Message::Suspend { .. } => self.durations.suspend,
                Message::Evict { .. } => self.durations.evict,
                Message::Resume { .. } => self.durations.resume,
                Message::RunDiagnostics { .. } if spare => self.durations.reschedule + diag_time,
                Message::RunDiagnostics { .. } => diag_time,
                _ => 0.0,
            };
            let mut diagnose = |n: usize| reports.remove(&n).expect("suite covered every requested node");
            let r = e.handle(&msg, &mut diagnose);
            if !r.is_empty() {
                delay = delay.max(d);
            }
            replies.extend(r.into_iter().map(|r| (to, r)));
        }
        Some(Batch { at: t + delay, replies, sent, diag_nodes: diag_nodes.len(), diag_time })
    }

    /// Delivers a batch's replies to the driver at the batch's time.
    pub fn deliver(&mut self, batch: Batch) {
        for (from, msg) in batch.replies {
            self.log.push((batch.at, from, DRIVER, msg.type_name()));
            // executors only send what the driver accepts
            let _ = self.driver.handle(from, msg, batch.at);
        }
    }

    /// Sends one beat from every live executor that `telemetry` answers for.
    pub fn beat(&mut self, now: f64, mut telemetry: impl FnMut(usize, &Executor) -> Option<Telemetry>) {
        let nodes: Vec<usize> = self.executors.keys().copied().collect();
        for n in nodes {
            if self.dead.contains(&n) {
                continue;
            }
            let e = self.executors.get_mut(&n).unwrap();
            if e.state == ExecState::Evicted {
                continue;
            }
            let Some(t) = telemetry(n, e) else { continue };
            let hb = e.heartbeat(now, t);
            let _ = self.driver.handle(n, hb, now);
        }
    }

    pub fn tick(&mut self, now: f64) {
        self.driver.tick(now);
    }

    /// A repaired node rejoins as an idle spare.
    pub fn rejoin(&mut self, node: usize, gpus: usize, now: f64) {
        self.dead.remove(&node);
        let e = Executor::new(node, gpus, ExecState::Idle);
        let hello = e.hello();
        self.executors.insert(node, e);
        let _ = self.driver.handle(node, hello, now);
        self.driver.add_spare(node);
    }
}
