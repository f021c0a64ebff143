use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};

pub const DEFAULT_KEYWORDS: [&str; 4] = ["CUDA error", "ECC", "NCCL", "segmentation fault"];
pub const HEARTBEAT_INTERVAL: f64 = 10.0;
pub const MAX_LOG_LINES: usize = 16;
pub const MAX_LOG_LINE_LEN: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProcStatus {
    Running,
    Exited(i32),
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub executor_id: String,
    pub node_id: usize,
    pub ip: String,
    pub pod_name: String,
    pub hardware: String,
    pub gpu_status: Vec<ProcStatus>,
    /// Most recent log lines since the previous beat.
    pub logs: Vec<String>,
    /// Bytes/s per NIC averaged over the last interval.
    pub rdma_bps: Vec<f64>,
    pub sent_at: f64,
}

impl Heartbeat {
    /// Keeps the newest lines and cuts long ones so a beat stays small.
    pub fn bound(mut self) -> Self {
        if self.logs.len() > MAX_LOG_LINES {
            self.logs.drain(..self.logs.len() - MAX_LOG_LINES);
        }
        for l in &mut self.logs {
            if l.len() > MAX_LOG_LINE_LEN {
                let mut cut = MAX_LOG_LINE_LEN;
                while !l.is_char_boundary(cut) {
                    cut -= 1;
                }
                l.truncate(cut);
            }
        }
        self
    }

    pub fn traffic(&self) -> f64 {
        self.rdma_bps.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RuleKind {
    MissedHeartbeat,
    Keyword,
    TrafficDrop,
    TrafficZero,
    ProcessExit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnomalyRule {
    MissedHeartbeat { interval: f64, window: u32 },
    Keyword { keywords: Vec<String> },
    /// Alert when traffic falls below `(1 - fraction)` of the trailing
    /// median over `history` beats.
    TrafficDrop { fraction: f64, history: usize },
    /// Recover after `window` consecutive zero-traffic beats.
    TrafficZero { window: usize },
    ProcessExit,
}

impl AnomalyRule {
    pub fn kind(&self) -> RuleKind {
        match self {
            AnomalyRule::MissedHeartbeat { .. } => RuleKind::MissedHeartbeat,
            AnomalyRule::Keyword { .. } => RuleKind::Keyword,
            AnomalyRule::TrafficDrop { .. } => RuleKind::TrafficDrop,
            AnomalyRule::TrafficZero { .. } => RuleKind::TrafficZero,
            AnomalyRule::ProcessExit => RuleKind::ProcessExit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        match self {
            AnomalyRule::MissedHeartbeat { interval, window } if !(*interval > 0.0) || *window == 0 => {
                bad("missed-heartbeat interval and window must be > 0")
            }
            AnomalyRule::TrafficDrop { fraction, history } if !(*fraction > 0.0 && *fraction < 1.0) || *history == 0 => {
                bad("traffic-drop fraction must be in (0,1) and history > 0")
            }
            AnomalyRule::TrafficZero { window: 0 } => bad("traffic-zero window must be > 0"),
            AnomalyRule::Keyword { keywords } if keywords.iter().any(String::is_empty) => bad("empty keyword"),
            _ => Ok(()),
        }
    }

    pub fn defaults() -> Vec<AnomalyRule> {
        vec![
            AnomalyRule::MissedHeartbeat { interval: HEARTBEAT_INTERVAL, window: 3 },
            AnomalyRule::Keyword { keywords: DEFAULT_KEYWORDS.iter().map(|s| s.to_string()).collect() },
            AnomalyRule::TrafficDrop { fraction: 0.5, history: 5 },
            AnomalyRule::TrafficZero { window: 2 },
            AnomalyRule::ProcessExit,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Alert,
    Recover,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anomaly {
    pub node: usize,
    pub rule: RuleKind,
    pub evidence: String,
    pub at: f64,
    pub action: Action,
}

#[derive(Debug, Clone, Default)]
struct NodeWatch {
    last_beat: f64,
    last_sent: Option<f64>,
    traffic: VecDeque<f64>,
    zeros: usize,
    /// Zero traffic only means something after the node has carried some.
    armed: bool,
    silent: bool,
}

/// Per-node anomaly rules over a heartbeat stream.
#[derive(Debug, Clone)]
pub struct Detector {
    rules: Vec<AnomalyRule>,
    nodes: BTreeMap<usize, NodeWatch>,
}

fn median(v: &VecDeque<f64>) -> f64 {
    let mut s: Vec<f64> = v.iter().copied().collect();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

impl Detector {
    pub fn new(rules: Vec<AnomalyRule>) -> Result<Self> {
        for r in &rules {
            r.validate()?;
        }
        Ok(Detector { rules, nodes: BTreeMap::new() })
    }

    pub fn rules(&self) -> &[AnomalyRule] {
        &self.rules
    }

    /// Starts expecting beats from `node` as of `now`.
    pub fn watch(&mut self, node: usize, now: f64) {
        self.nodes.insert(node, NodeWatch { last_beat: now, ..NodeWatch::default() });
    }

    pub fn unwatch(&mut self, node: usize) {
        self.nodes.remove(&node);
    }

    pub fn watched(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.keys().copied()
    }

    pub fn last_beat(&self, node: usize) -> Option<f64> {
        self.nodes.get(&node).map(|w| w.last_beat)
    }

    /// Forgets traffic history, e.g. after training resumes.
    pub fn reset(&mut self, now: f64) {
        for w in self.nodes.values_mut() {
            *w = NodeWatch { last_beat: now, last_sent: w.last_sent, ..NodeWatch::default() };
        }
    }

    /// Applies the per-beat rules. Beats from unwatched nodes or with a
    /// non-increasing `sent_at` are ignored.
    pub fn observe(&mut self, hb: &Heartbeat, now: f64) -> Vec<Anomaly> {
        let Some(w) = self.nodes.get_mut(&hb.node_id) else { return Vec::new() };
        if matches!(w.last_sent, Some(s) if hb.sent_at <= s) {
            return Vec::new();
        }
        w.last_sent = Some(hb.sent_at);
        w.last_beat = now;
        w.silent = false;
        let mut out = Vec::new();
        let node = hb.node_id;
        let traffic = hb.traffic();
        let mut fire = |rule, evidence: String, action| out.push(Anomaly { node, rule, evidence, at: now, action });
        for r in &self.rules {
            match r {
                AnomalyRule::Keyword { keywords } => {
                    if let Some((line, k)) = hb.logs.iter().find_map(|l| keywords.iter().find(|k| l.contains(k.as_str())).map(|k| (l, k))) {
                        fire(RuleKind::Keyword, format!("log matched `{k}`: {line}"), Action::Recover);
                    }
                }
                AnomalyRule::ProcessExit => {
                    if let Some((gpu, code)) = hb.gpu_status.iter().enumerate().find_map(|(i, s)| match s {
                        ProcStatus::Exited(c) if *c != 0 => Some((i, *c)),
                        _ => None,
                    }) {
                        fire(RuleKind::ProcessExit, format!("gpu {gpu} process exited with code {code}"), Action::Recover);
                    }
                }
                AnomalyRule::TrafficDrop { fraction, history } => {
                    if !w.traffic.is_empty() {
                        let m = median(&w.traffic);
                        if traffic < (1.0 - fraction) * m {
                            fire(RuleKind::TrafficDrop, format!("rdma traffic {traffic:.0} B/s below trailing median {m:.0} B/s"), Action::Alert);
                        }
                    }
                    w.traffic.push_back(traffic);
                    while w.traffic.len() > *history {
                        w.traffic.pop_front();
                    }
                }
                AnomalyRule::TrafficZero { window } => {
                    if traffic > 0.0 {
                        w.armed = true;
                        w.zeros = 0;
                    } else if w.armed {
                        w.zeros += 1;
                        if w.zeros == *window {
                            fire(RuleKind::TrafficZero, format!("rdma traffic zero for {window} consecutive beats"), Action::Recover);
                        }
                    }
                }
                AnomalyRule::MissedHeartbeat { .. } => {}
            }
        }
        out
    }

    /// Checks for silent nodes. Each silence fires once until the node
    /// beats again.
    pub fn evaluate(&mut self, now: f64) -> Vec<Anomaly> {
        let mut out = Vec::new();
        for r in &self.rules {
            if let AnomalyRule::MissedHeartbeat { interval, window } = r {
                let limit = interval * *window as f64;
                for (&node, w) in self.nodes.iter_mut() {
                    if !w.silent && now - w.last_beat > limit {
                        w.silent = true;
                        out.push(Anomaly {
                            node,
                            rule: RuleKind::MissedHeartbeat,
                            evidence: format!("no heartbeat since t={}", w.last_beat),
                            at: now,
                            action: Action::Recover,
                        });
                    }
                }
            }
        }
        out
    }

    /// Earliest time `evaluate` would report `node` silent, if it is not
    /// already.
    pub fn silence_deadline(&self, node: usize) -> Option<f64> {
        let w = self.nodes.get(&node).filter(|w| !w.silent)?;
        self.rules.iter().find_map(|r| match r {
            AnomalyRule::MissedHeartbeat { interval, window } => Some(w.last_beat + interval * *window as f64),
            _ => None,
        })
    }

    pub fn is_silent(&self, node: usize) -> bool {
        self.nodes.get(&node).is_some_and(|w| w.silent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn beat(node: usize, t: f64, traffic: f64) -> Heartbeat {
        Heartbeat {
            executor_id: format!("exec-{node}"),
            node_id: node,
            ip: format!("10.0.0.{node}"),
            pod_name: format!("pod-{node}"),
            hardware: "8xGPU".into(),
            gpu_status: vec![ProcStatus::Running; 2],
            logs: vec![],
            rdma_bps: vec![traffic],
            sent_at: t,
        }
    }

    fn det() -> Detector {
        let mut d = Detector::new(AnomalyRule::defaults()).unwrap();
        d.watch(0, 0.0);
        d
    }

    #[test]
    fn missed_heartbeat_fires_after_window() {
        let mut d = det();
        assert!(d.observe(&beat(0, 100.0, 1.0), 100.0).is_empty());
        assert!(d.evaluate(130.0).is_empty());
        let a = d.evaluate(131.0);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].rule, RuleKind::MissedHeartbeat);
        // once per silence
        assert!(d.evaluate(140.0).is_empty());
        assert!(d.is_silent(0));
        d.observe(&beat(0, 141.0, 1.0), 141.0);
        assert!(!d.is_silent(0));
    }

    #[test]
    fn keyword_in_logs() {
        let mut d = det();
        let mut hb = beat(0, 10.0, 1.0);
        hb.logs.push("CUDA error: uncorrectable ECC error encountered".into());
        let a = d.observe(&hb, 10.0);
        assert!(a.iter().any(|a| a.rule == RuleKind::Keyword && a.action == Action::Recover));
    }

    #[test]
    fn zero_traffic_triggers_on_second_zero() {
        let mut d = det();
        let mut fired = Vec::new();
        for (i, mb) in [100.0, 100.0, 0.0, 0.0].into_iter().enumerate() {
            let a = d.observe(&beat(0, i as f64 * 10.0 + 1.0, mb * 1e6), i as f64 * 10.0 + 1.0);
            if a.iter().any(|a| a.rule == RuleKind::TrafficZero) {
                fired.push(i);
            }
        }
        assert_eq!(fired, vec![3]);
    }

    #[test]
    fn drop_only_alerts() {
        let mut d = det();
        for (i, v) in [100.0, 100.0, 100.0, 40.0].into_iter().enumerate() {
            let a = d.observe(&beat(0, i as f64 + 1.0, v), i as f64 + 1.0);
            if i == 3 {
                assert_eq!(a.len(), 1);
                assert_eq!((a[0].rule, a[0].action), (RuleKind::TrafficDrop, Action::Alert));
            } else {
                assert!(a.is_empty());
            }
        }
    }

    #[test]
    fn idle_nodes_are_not_zero_traffic_anomalies() {
        let mut d = det();
        for i in 0..5 {
            assert!(d.observe(&beat(0, i as f64 + 1.0, 0.0), i as f64 + 1.0).is_empty());
        }
    }

    #[test]
    fn process_exit_and_stale_beats() {
        let mut d = det();
        let mut hb = beat(0, 5.0, 1.0);
        hb.gpu_status[1] = ProcStatus::Exited(139);
        assert_eq!(d.observe(&hb, 5.0)[0].rule, RuleKind::ProcessExit);
        // replayed beat is ignored
        assert!(d.observe(&hb, 6.0).is_empty());
        let mut ok = beat(0, 7.0, 1.0);
        ok.gpu_status[1] = ProcStatus::Exited(0);
        assert!(d.observe(&ok, 7.0).is_empty());
    }

    #[test]
    fn bounded_payload() {
        let mut hb = beat(0, 1.0, 1.0);
        hb.logs = (0..40).map(|i| format!("{i}{}", "x".repeat(1000))).collect();
        let hb = hb.bound();
        assert_eq!(hb.logs.len(), MAX_LOG_LINES);
        assert!(hb.logs[0].starts_with("24"));
        assert!(hb.logs.iter().all(|l| l.len() <= MAX_LOG_LINE_LEN));
    }

    #[test]
    fn rule_validation() {
        assert!(AnomalyRule::TrafficDrop { fraction: 1.0, history: 5 }.validate().is_err());
        assert!(AnomalyRule::MissedHeartbeat { interval: 10.0, window: 0 }.validate().is_err());
        assert!(Detector::new(vec![AnomalyRule::TrafficZero { window: 0 }]).is_err());
        let json = serde_json::to_string(&AnomalyRule::TrafficZero { window: 2 }).unwrap();
        assert_eq!(json, r#"{"kind":"TRAFFIC_ZERO","window":2}"#);
    }
}
