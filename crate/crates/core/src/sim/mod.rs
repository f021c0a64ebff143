//! Discrete-event execution of an iteration graph over several steps.
//!
//! Each rank owns one FIFO lane per [`Lane`]. Collectives start when every
//! member has arrived and finish together. Sends are eager: the transfer
//! runs on the sender's lane and the matching receive completes when the
//! data lands.

mod data;
mod fault;
mod span;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use crate::rng::keyed_rng;
use crate::cluster::{ClusterSpec, HardwareProfile, Topology};
use crate::schedule::cost::tp_pipeline;
use crate::schedule::{CostModel, EventGraph, EventId, EventKind, Lane, Link, LANES};

pub use data::{model_data_pipeline, DataPipeline, DataSpec};
pub use fault::{inject_flap, FaultKind, FaultParams, FaultSpec, FlapOutcome, Onset, Target};
pub use span::{read_jsonl, write_jsonl, Span, SpanStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunStatus {
    Completed,
    TimeoutAbort,
    Crashed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub steps: usize,
    pub seed: u64,
    pub start_time: f64,
    /// Global index of the first simulated iteration.
    pub first_step: usize,
    pub nccl_timeout: f64,
    pub retransmit_timeout: f64,
    /// Abort all ranks at this time; blocked ranks log their ongoing op.
    pub suspend_at: Option<f64>,
    /// Host-side pause before the given global iteration starts.
    pub stall_before_step: BTreeMap<usize, f64>,
    pub record_traffic: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            steps: 1,
            seed: 0,
            start_time: 0.0,
            first_step: 0,
            nccl_timeout: 600.0,
            retransmit_timeout: 10.0,
            suspend_at: None,
            stall_before_step: BTreeMap::new(),
            record_traffic: false,
        }
    }
}

pub struct SimInput<'a> {
    pub graph: &'a EventGraph,
    pub cost: &'a CostModel,
    pub cluster: &'a ClusterSpec,
    pub topology: &'a Topology,
    /// Indexed by the topology's node ids.
    pub profiles: &'a [HardwareProfile],
    pub faults: &'a [FaultSpec],
}

/// Cross-node bytes moved by one op, charged to a node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Traffic {
    pub node: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub time: f64,
    pub kind: FailureKind,
    pub rank: usize,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Hang,
    Crash,
    CommError,
    Timeout,
    Suspended,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub spans: Vec<Span>,
    /// Duration of each fully completed iteration.
    pub iteration_times: Vec<f64>,
    /// Absolute end time of each fully completed iteration.
    pub step_end: Vec<f64>,
    /// `rdma_bytes[step][node]`, cross-node bytes.
    pub rdma_bytes: Vec<Vec<f64>>,
    pub status: RunStatus,
    pub seed: u64,
    pub end_time: f64,
    /// First failure, in time order.
    pub failures: Vec<Failure>,
    pub traffic: Vec<Traffic>,
}

impl SimResult {
    pub fn completed_steps(&self) -> usize {
        self.step_end.len()
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Time(f64);
impl Eq for Time {}
impl PartialOrd for Time {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Time {
    fn cmp(&self, o: &Self) -> Ordering {
        self.0.total_cmp(&o.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Action {
    Complete(usize),
    Fail(usize),
    Launch(usize),
    Deadline(usize),
    Crash(usize),
    Suspend,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum RankState {
    Alive,
    Hung,
    Dead,
}

#[derive(Clone, Copy, Default)]
struct LaneState {
    cursor: usize,
    busy: bool,
    free_at: f64,
}

#[derive(Clone, Copy, Default)]
struct CollState {
    arrived: u32,
    max_arrival: f64,
    stuck: bool,
}

pub fn run(input: &SimInput, cfg: &SimConfig) -> SimResult {
    let mut e = Engine::new(input, cfg);
    e.run();
    e.finish()
}

struct Engine<'a> {
    inp: &'a SimInput<'a>,
    cfg: &'a SimConfig,
    n: usize,
    steps: usize,
    lane_of: Vec<Option<Lane>>,
    lane_seq: Vec<[Vec<EventId>; LANES]>,
    dependents: Vec<Vec<(EventId, bool)>>,
    next_dependents: Vec<Vec<EventId>>,
    annotations: Vec<Vec<EventId>>,
    is_virtual: Vec<bool>,
    real_per_rank: Vec<usize>,
    coll_dur: Vec<f64>,
    coll_nodes: Vec<Vec<usize>>,
    coll_cross: Vec<bool>,
    layer_factor: f64,
    pend_local: Vec<u32>,
    pend_remote: Vec<u32>,
    ready_local: Vec<f64>,
    ready_remote: Vec<f64>,
    posted: Vec<f64>,
    start: Vec<f64>,
    /// When a rank entered a collective; its span starts there.
    arrived_at: Vec<f64>,
    end: Vec<f64>,
    /// Unfused compute time of fused kernels, for laying out their pieces.
    gemm: Vec<f64>,
    done: Vec<bool>,
    lanes: Vec<[LaneState; LANES]>,
    colls: Vec<CollState>,
    rank_state: Vec<RankState>,
    done_count: Vec<usize>,
    waiting: Vec<Vec<usize>>,
    running: Vec<Vec<usize>>,
    fired: Vec<bool>,
    skew_base: Vec<Option<usize>>,
    heap: BinaryHeap<std::cmp::Reverse<(Time, u64, Action)>>,
    seq: u64,
    now: f64,
    stopped: bool,
    spans: Vec<Span>,
    rdma: Vec<Vec<f64>>,
    traffic: Vec<Traffic>,
    failures: Vec<Failure>,
    crashed: bool,
    aborted: bool,
}

const NAN: f64 = f64::NAN;

impl<'a> Engine<'a> {
    fn new(inp: &'a SimInput<'a>, cfg: &'a SimConfig) -> Self {
        let g = inp.graph;
        let n = g.events.len();
        let steps = cfg.steps;
        let ranks = g.num_ranks();
        let lane_of: Vec<Option<Lane>> = g.events.iter().map(|e| e.lane()).collect();
        let is_virtual: Vec<bool> = g.events.iter().map(|e| e.anchor.is_some()).collect();
        let mut lane_seq: Vec<[Vec<EventId>; LANES]> = vec![Default::default(); ranks];
        let mut real_per_rank = vec![0usize; ranks];
        for r in 0..ranks {
            for &id in &g.order[r] {
                if let Some(l) = lane_of[id] {
                    lane_seq[r][l as usize].push(id);
                }
                if !is_virtual[id] {
                    real_per_rank[r] += 1;
                }
            }
        }
        let mut dependents: Vec<Vec<(EventId, bool)>> = vec![Vec::new(); n];
        let mut next_dependents: Vec<Vec<EventId>> = vec![Vec::new(); n];
        let mut annotations: Vec<Vec<EventId>> = vec![Vec::new(); n];
        let mut local0 = vec![0u32; n];
        let mut remote0 = vec![0u32; n];
        let mut prev0 = vec![0u32; n];
        for ev in &g.events {
            if let Some(a) = ev.anchor {
                annotations[a].push(ev.id);
                continue;
            }
            for &d in &ev.deps {
                let local = g.events[d].rank == ev.rank;
                dependents[d].push((ev.id, local));
                if local {
                    local0[ev.id] += 1;
                } else {
                    remote0[ev.id] += 1;
                }
            }
            for &d in &ev.prev_deps {
                next_dependents[d].push(ev.id);
                prev0[ev.id] += 1;
            }
        }
        let total = n * steps;
        let mut pend_local = Vec::with_capacity(total);
        let mut pend_remote = Vec::with_capacity(total);
        for s in 0..steps {
            for i in 0..n {
                pend_local.push(local0[i] + if s > 0 { prev0[i] } else { 0 });
                pend_remote.push(remote0[i]);
            }
        }
        // static collective durations
        let ncoll = g.collectives.len();
        let mut coll_dur = vec![0.0; ncoll];
        let mut coll_nodes = vec![Vec::new(); ncoll];
        let mut coll_cross = vec![false; ncoll];
        let form = g.layer_form();
        for (cid, c) in g.collectives.iter().enumerate() {
            let ranks: Vec<usize> = c.members.iter().map(|&m| g.events[m].rank).collect();
            let mut nodes: Vec<usize> = ranks.iter().map(|&r| inp.topology.node_of(r)).collect();
            nodes.sort_unstable();
            nodes.dedup();
            let cross = nodes.len() > 1;
            let bw = if cross {
                ranks
                    .iter()
                    .map(|&r| nic_bw(inp, r))
                    .fold(f64::INFINITY, f64::min)
            } else {
                inp.cluster.intra_node_bw
            };
            let k = ranks.len() as f64;
            let head = &g.events[c.members[0]];
            let bytes = match c.kind {
                EventKind::Allgather | EventKind::Reducescatter => inp.cost.dp_bytes_per_chunk,
                _ => inp.cost.tp_bytes(form) / head.piece.map(|p| p.of).unwrap_or(1) as f64,
            };
            coll_dur[cid] = if k > 1.0 { bytes * (k - 1.0) / k / bw } else { 0.0 };
            coll_nodes[cid] = nodes;
            coll_cross[cid] = cross;
        }
        Engine {
            inp,
            cfg,
            n,
            steps,
            lane_of,
            lane_seq,
            dependents,
            next_dependents,
            annotations,
            is_virtual,
            real_per_rank,
            coll_dur,
            coll_nodes,
            coll_cross,
            layer_factor: inp.cost.layer_factor(form),
            pend_local,
            pend_remote,
            ready_local: vec![f64::NEG_INFINITY; total],
            ready_remote: vec![f64::NEG_INFINITY; total],
            posted: vec![NAN; total],
            start: vec![NAN; total],
            arrived_at: vec![NAN; total],
            end: vec![NAN; total],
            gemm: vec![0.0; total],
            done: vec![false; total],
            lanes: vec![[LaneState::default(); LANES]; ranks],
            colls: vec![CollState::default(); ncoll * steps],
            rank_state: vec![RankState::Alive; ranks],
            done_count: vec![0; ranks],
            waiting: vec![Vec::new(); ranks],
            running: vec![Vec::new(); ranks],
            fired: vec![false; inp.faults.len()],
            skew_base: vec![None; inp.faults.len()],
            heap: BinaryHeap::new(),
            seq: 0,
            now: cfg.start_time,
            stopped: false,
            spans: Vec::with_capacity(total),
            rdma: vec![vec![0.0; inp.topology.num_nodes()]; steps],
            traffic: Vec::new(),
            failures: Vec::new(),
            crashed: false,
            aborted: false,
        }
    }

    fn push(&mut self, t: f64, a: Action) {
        self.seq += 1;
        self.heap.push(std::cmp::Reverse((Time(t), self.seq, a)));
    }

    fn split(&self, inst: usize) -> (usize, EventId) {
        (inst / self.n, inst % self.n)
    }

    fn global_step(&self, s: usize) -> usize {
        self.cfg.first_step + s
    }

    fn rank_of(&self, inst: usize) -> usize {
        self.inp.graph.events[inst % self.n].rank
    }

    fn run(&mut self) {
        let t0 = self.cfg.start_time;
        for (i, f) in self.inp.faults.iter().enumerate() {
            if matches!(f.kind, FaultKind::Crash | FaultKind::EccErrorLog) {
                if let Onset::Time(t) = f.onset {
                    self.push(t.max(t0), Action::Crash(i));
                }
            }
        }
        if let Some(t) = self.cfg.suspend_at {
            self.push(t, Action::Suspend);
        }
        if self.steps == 0 {
            return;
        }
        for r in 0..self.inp.graph.num_ranks() {
            self.lanes[r].iter_mut().for_each(|l| l.free_at = t0);
            for lane in [Lane::Compute, Lane::Dp, Lane::P2p] {
                self.try_lane(r, lane);
            }
        }
        for eid in 0..self.n {
            if self.lane_of[eid].is_none() && !self.is_virtual[eid] {
                self.passive_ready(eid);
            }
        }
        while let Some(std::cmp::Reverse((Time(t), _, a))) = self.heap.pop() {
            if self.stopped {
                break;
            }
            self.now = t;
            match a {
                Action::Complete(i) => self.complete(i, t),
                Action::Fail(i) => self.comm_failed(i, t),
                Action::Launch(i) => self.arrive(i, t),
                Action::Deadline(i) => self.deadline(i, t),
                Action::Crash(f) => self.crash(f, t),
                Action::Suspend => self.suspend(t),
            }
        }
    }

    fn alive(&self, r: usize) -> bool {
        self.rank_state[r] == RankState::Alive
    }

    fn head(&self, r: usize, lane: Lane) -> Option<usize> {
        let seq = &self.lane_seq[r][lane as usize];
        if seq.is_empty() {
            return None;
        }
        let c = self.lanes[r][lane as usize].cursor;
        let (s, pos) = (c / seq.len(), c % seq.len());
        (s < self.steps).then(|| s * self.n + seq[pos])
    }

    fn try_lane(&mut self, r: usize, lane: Lane) {
        if !self.alive(r) || self.stopped {
            return;
        }
        let l = self.lanes[r][lane as usize];
        if l.busy {
            return;
        }
        let Some(inst) = self.head(r, lane) else { return };
        if self.pend_local[inst] > 0 {
            return;
        }
        self.lanes[r][lane as usize].busy = true;
        let mut t = l.free_at.max(self.ready_local[inst]);
        let (s, eid) = self.split(inst);
        let ev = &self.inp.graph.events[eid];
        if lane == Lane::Compute && self.lane_seq[r][0][0] == eid {
            if let Some(st) = self.cfg.stall_before_step.get(&self.global_step(s)) {
                t += st;
            }
        }
        self.posted[inst] = t;
        if matches!(ev.link, Link::Collective(_)) {
            let delay = self.skew_delay(inst, t);
            if delay > 0.0 {
                self.push(t + delay, Action::Launch(inst));
            } else if t > self.now {
                self.push(t, Action::Launch(inst));
            } else {
                self.arrive(inst, t);
            }
            return;
        }
        if ev.kind == EventKind::Dataload && self.crash_on_step(r, self.global_step(s), t) {
            return;
        }
        if self.pend_remote[inst] > 0 {
            self.wait(inst, t);
            return;
        }
        let t = t.max(self.ready_remote[inst]);
        self.begin(inst, t);
    }

    fn wait(&mut self, inst: usize, t: f64) {
        let r = self.rank_of(inst);
        self.waiting[r].push(inst);
        self.push(t + self.cfg.nccl_timeout, Action::Deadline(inst));
    }

    /// Starts a non-collective op whose inputs are all available at `t`.
    fn begin(&mut self, inst: usize, t: f64) {
        let ev = &self.inp.graph.events[inst % self.n];
        let r = ev.rank;
        self.waiting[r].retain(|&x| x != inst);
        match ev.kind {
            EventKind::Send => {
                if self.hang_check(r, inst, t) {
                    return;
                }
                let (peer_node, bytes) = match ev.link {
                    Link::Send { peer, .. } => (self.inp.topology.node_of(peer), self.inp.cost.p2p_bytes),
                    _ => (self.inp.topology.node_of(r), 0.0),
                };
                let my_node = self.inp.topology.node_of(r);
                let bw = if peer_node == my_node {
                    self.inp.cluster.intra_node_bw
                } else {
                    let peer = match ev.link {
                        Link::Send { peer, .. } => peer,
                        _ => r,
                    };
                    nic_bw(self.inp, r).min(nic_bw(self.inp, peer))
                };
                let dur = if bytes > 0.0 { bytes / bw } else { 0.0 };
                self.start[inst] = t;
                self.running[r].push(inst);
                let pair = [my_node, peer_node];
                let nodes: &[usize] = if peer_node == my_node { &[] } else { &pair };
                self.finish_comm(inst, t, dur, nodes);
            }
            _ => {
                let dur = if ev.kind.is_compute() {
                    let (d, g) = self.compute_dur(inst, t);
                    self.gemm[inst] = g;
                    d
                } else {
                    0.0
                };
                self.start[inst] = t;
                self.running[r].push(inst);
                self.push(t + dur, Action::Complete(inst));
            }
        }
    }

    fn finish_comm(&mut self, inst: usize, t: f64, dur: f64, nodes: &[usize]) {
        match self.flap_outcome(nodes, t, dur) {
            FlapOutcome::Delayed(extra) => self.push(t + dur + extra, Action::Complete(inst)),
            FlapOutcome::Failed(at) => self.push(at, Action::Fail(inst)),
        }
    }

    fn flap_outcome(&self, nodes: &[usize], t: f64, dur: f64) -> FlapOutcome {
        if nodes.is_empty() {
            return FlapOutcome::Delayed(0.0);
        }
        let outages: Vec<(f64, f64)> = self
            .inp
            .faults
            .iter()
            .filter(|f| f.kind == FaultKind::LinkFlap)
            .filter_map(|f| match (f.target, f.onset) {
                (Target::Node(n), Onset::Time(on)) if nodes.contains(&n) => Some((on, f.params.down_s.unwrap_or(0.0))),
                _ => None,
            })
            .collect();
        if outages.is_empty() {
            return FlapOutcome::Delayed(0.0);
        }
        inject_flap(t, dur, &outages, self.cfg.retransmit_timeout)
    }

    /// Returns the op's duration and, for fused kernels, the unfused time.
    fn compute_dur(&self, inst: usize, t: f64) -> (f64, f64) {
        let (s, eid) = self.split(inst);
        let ev = &self.inp.graph.events[eid];
        let cost = self.inp.cost;
        let base = match ev.kind {
            EventKind::Fwd => cost.t_fwd_chunk * self.layer_factor,
            EventKind::Bwd => cost.t_bwd_chunk * self.layer_factor,
            EventKind::Opt => cost.t_opt,
            EventKind::Dataload => return (cost.t_dataload, 0.0),
            _ => 0.0,
        };
        let node = self.inp.topology.node_of(ev.rank);
        let mut mult = self.inp.profiles.get(node).map(|p| p.compute_multiplier).unwrap_or(1.0);
        let gstep = self.global_step(s);
        for f in self.inp.faults {
            if f.kind == FaultKind::Straggler && f.target == Target::Node(node) && f.onset.reached(t, gstep) {
                mult *= f.params.factor.unwrap_or(1.0);
            }
        }
        let mut d = base * mult;
        if cost.compute_noise > 0.0 && d > 0.0 {
            let z: f64 = StandardNormal.sample(&mut self.keyed_rng(gstep, eid, 1));
            d *= (1.0 + cost.compute_noise * z).max(0.0);
        }
        if let Some(k) = ev.fused {
            let (a, r) = self.tp_times();
            let p = tp_pipeline(a, d, r, k);
            let kf = k as f64;
            return ((p.total - a / kf - r / kf).max(0.0), d);
        }
        (d, 0.0)
    }

    /// Full all-gather and reduce-scatter times for one chunk pass.
    fn tp_times(&self) -> (f64, f64) {
        let g = self.inp.graph;
        let t = g.tp as f64;
        if g.tp <= 1 {
            return (0.0, 0.0);
        }
        let bytes = self.inp.cost.tp_bytes(g.layer_form());
        let d = bytes * (t - 1.0) / t / self.inp.cluster.intra_node_bw;
        (d, d)
    }

    fn keyed_rng(&self, step: usize, eid: usize, salt: u64) -> ChaCha8Rng {
        keyed_rng(self.cfg.seed, &[step as u64, eid as u64, salt])
    }

    fn skew_delay(&mut self, inst: usize, t: f64) -> f64 {
        let (s, eid) = self.split(inst);
        let ev = &self.inp.graph.events[eid];
        if ev.kind != EventKind::Reducescatter {
            return 0.0;
        }
        let gstep = self.global_step(s);
        let mut delay = 0.0;
        for (i, f) in self.inp.faults.iter().enumerate() {
            if f.kind != FaultKind::LaunchSkewDrift || f.target != Target::Rank(ev.rank) {
                continue;
            }
            let base = match f.onset {
                Onset::Step(k) => Some(k),
                Onset::Time(o) => {
                    if self.skew_base[i].is_none() && t >= o {
                        self.skew_base[i] = Some(gstep);
                    }
                    self.skew_base[i]
                }
            };
            if let Some(k) = base {
                if gstep >= k {
                    delay += f.params.growth.unwrap_or(0.0) * (gstep - k) as f64;
                }
            }
        }
        delay
    }

    /// True when the op on rank `r` hangs; the rank stops progressing and
    /// never logs.
    fn hang_check(&mut self, r: usize, inst: usize, t: f64) -> bool {
        if self.rank_state[r] == RankState::Hung {
            return true;
        }
        let (s, eid) = self.split(inst);
        let gstep = self.global_step(s);
        let mut hang = false;
        for (i, f) in self.inp.faults.iter().enumerate() {
            if f.kind == FaultKind::Hang && f.target == Target::Rank(r) && !self.fired[i] && f.onset.reached(t, gstep) {
                self.fired[i] = true;
                hang = true;
            }
        }
        if !hang {
            let cross = match self.inp.graph.events[eid].link {
                Link::Collective(c) => self.coll_cross[c],
                Link::Send { peer, .. } => self.inp.topology.node_of(peer) != self.inp.topology.node_of(r),
                _ => false,
            };
            let node = self.inp.topology.node_of(r);
            let p = self.inp.profiles.get(node).map(|p| p.hang_prob).unwrap_or(0.0);
            if cross && p > 0.0 {
                hang = p >= 1.0 || self.keyed_rng(gstep, eid, 2).random::<f64>() < p;
            }
        }
        if hang {
            self.rank_state[r] = RankState::Hung;
            self.failures.push(Failure {
                time: t,
                kind: FailureKind::Hang,
                rank: r,
                detail: format!("{} never completes", self.inp.graph.events[eid].label()),
            });
        }
        hang
    }

    fn arrive(&mut self, inst: usize, t: f64) {
        let r = self.rank_of(inst);
        if !self.alive(r) {
            return;
        }
        let (s, eid) = self.split(inst);
        let Link::Collective(cid) = self.inp.graph.events[eid].link else { unreachable!() };
        let key = s * self.inp.graph.collectives.len() + cid;
        if self.hang_check(r, inst, t) {
            self.colls[key].stuck = true;
            return;
        }
        self.arrived_at[inst] = t;
        let c = &mut self.colls[key];
        c.arrived += 1;
        c.max_arrival = if c.arrived == 1 { t } else { c.max_arrival.max(t) };
        self.wait(inst, t);
        let members = &self.inp.graph.collectives[cid].members;
        let c = self.colls[key];
        if c.arrived as usize == members.len() && !c.stuck {
            let start = c.max_arrival;
            let dur = self.coll_dur[cid];
            let nodes: &[usize] = if self.coll_cross[cid] { &self.coll_nodes[cid] } else { &[] };
            let outcome = self.flap_outcome(nodes, start, dur);
            for k in 0..members.len() {
                let m = self.inp.graph.collectives[cid].members[k];
                let mi = s * self.n + m;
                let mr = self.inp.graph.events[m].rank;
                self.waiting[mr].retain(|&x| x != mi);
                self.start[mi] = start;
                self.running[mr].push(mi);
                match outcome {
                    FlapOutcome::Delayed(x) => self.push(start + dur + x, Action::Complete(mi)),
                    FlapOutcome::Failed(at) => self.push(at, Action::Fail(mi)),
                }
            }
        }
    }

    fn complete(&mut self, inst: usize, t: f64) {
        let (s, eid) = self.split(inst);
        let ev = &self.inp.graph.events[eid];
        let r = ev.rank;
        if self.done[inst] || !self.alive(r) {
            return;
        }
        self.done[inst] = true;
        self.end[inst] = t;
        self.done_count[r] += 1;
        self.running[r].retain(|&x| x != inst);
        self.waiting[r].retain(|&x| x != inst);
        let t_start = if !self.arrived_at[inst].is_nan() {
            self.arrived_at[inst]
        } else if self.start[inst].is_nan() {
            self.posted[inst]
        } else {
            self.start[inst]
        };
        let gstep = self.global_step(s);
        self.spans.push(Span {
            step: gstep,
            rank: r,
            kind: ev.kind,
            chunk: ev.chunk,
            mb: ev.microbatch,
            t_start,
            t_end: t,
            status: SpanStatus::Ok,
            eid: Some(eid),
            peers: Vec::new(),
            piece: ev.piece.map(|p| p.index),
        });
        if ev.fused.is_some() {
            self.emit_annotations(inst, t_start);
        }
        self.account_bytes(inst, t_start, t);
        if let Some(lane) = self.lane_of[eid] {
            let l = &mut self.lanes[r][lane as usize];
            l.busy = false;
            l.free_at = t;
            l.cursor += 1;
        }
        for k in 0..self.dependents[eid].len() {
            let (d, local) = self.dependents[eid][k];
            self.satisfy(s * self.n + d, local, t);
        }
        if s + 1 < self.steps {
            for k in 0..self.next_dependents[eid].len() {
                let d = self.next_dependents[eid][k];
                self.satisfy((s + 1) * self.n + d, true, t);
            }
        }
        if let Some(lane) = self.lane_of[eid] {
            self.try_lane(r, lane);
        }
    }

    fn satisfy(&mut self, inst: usize, local: bool, t: f64) {
        if local {
            self.pend_local[inst] -= 1;
            self.ready_local[inst] = self.ready_local[inst].max(t);
        } else {
            self.pend_remote[inst] -= 1;
            self.ready_remote[inst] = self.ready_remote[inst].max(t);
        }
        let eid = inst % self.n;
        let ev = &self.inp.graph.events[eid];
        let r = ev.rank;
        if self.is_virtual[eid] || !self.alive(r) {
            return;
        }
        match self.lane_of[eid] {
            None => self.passive_ready(inst),
            Some(lane) => {
                if self.head(r, lane) != Some(inst) || self.pend_local[inst] > 0 {
                    return;
                }
                if !self.lanes[r][lane as usize].busy {
                    self.try_lane(r, lane);
                } else if !self.posted[inst].is_nan()
                    && self.start[inst].is_nan()
                    && self.pend_remote[inst] == 0
                    && !matches!(ev.link, Link::Collective(_))
                {
                    let at = self.posted[inst].max(self.ready_remote[inst]);
                    self.begin(inst, at);
                }
            }
        }
    }

    /// Passive ops are posted once their local inputs are done and complete
    /// when the remote data lands.
    fn passive_ready(&mut self, inst: usize) {
        if self.pend_local[inst] > 0 || self.done[inst] {
            return;
        }
        let r = self.rank_of(inst);
        if self.posted[inst].is_nan() {
            self.posted[inst] = self.ready_local[inst].max(self.cfg.start_time);
            if self.pend_remote[inst] > 0 {
                self.wait(inst, self.posted[inst]);
                return;
            }
        }
        if self.pend_remote[inst] == 0 {
            self.waiting[r].retain(|&x| x != inst);
            let at = self.posted[inst].max(self.ready_remote[inst]);
            self.push(at, Action::Complete(inst));
        }
    }

    fn emit_annotations(&mut self, inst: usize, core_start: f64) {
        let (s, eid) = self.split(inst);
        let ev = &self.inp.graph.events[eid];
        let k = ev.fused.unwrap_or(1);
        let (a, r) = self.tp_times();
        let kf = k as f64;
        let p = tp_pipeline(a, self.gemm[inst], r, k);
        let origin = core_start - a / kf;
        for &ann in &self.annotations[eid] {
            let av = &self.inp.graph.events[ann];
            let idx = av.piece.map(|p| p.index).unwrap_or(0) as usize;
            let (st, d) = match av.kind {
                EventKind::TpAg => (p.ag_start[idx], a / kf),
                _ => (p.rs_start[idx], r / kf),
            };
            self.spans.push(Span {
                step: self.global_step(s),
                rank: av.rank,
                kind: av.kind,
                chunk: av.chunk,
                mb: av.microbatch,
                t_start: origin + st,
                t_end: origin + st + d,
                status: SpanStatus::Ok,
                eid: Some(ann),
                peers: Vec::new(),
                piece: Some(idx as u32),
            });
        }
    }

    fn account_bytes(&mut self, inst: usize, t0: f64, t1: f64) {
        let (s, eid) = self.split(inst);
        let ev = &self.inp.graph.events[eid];
        let node = self.inp.topology.node_of(ev.rank);
        let bytes = match ev.link {
            Link::Collective(c) if self.coll_cross[c] => {
                let k = self.inp.graph.collectives[c].members.len() as f64;
                self.inp.cost.dp_bytes_per_chunk * (k - 1.0) / k
            }
            Link::Send { peer, .. } if self.inp.topology.node_of(peer) != node => self.inp.cost.p2p_bytes,
            Link::Recv { peer, .. } if self.inp.topology.node_of(peer) != node => self.inp.cost.p2p_bytes,
            _ => 0.0,
        };
        if bytes > 0.0 {
            self.rdma[s][node] += bytes;
            if self.cfg.record_traffic {
                self.traffic.push(Traffic { node, t_start: t0, t_end: t1, bytes });
            }
        }
    }

    fn awaited(&self, inst: usize) -> Vec<usize> {
        let (s, eid) = self.split(inst);
        let g = self.inp.graph;
        let ev = &g.events[eid];
        let mut out: Vec<usize> = match ev.link {
            Link::Collective(cid) => {
                let c = &g.collectives[cid];
                let stuck = self.colls[s * g.collectives.len() + cid].stuck;
                c.members
                    .iter()
                    .filter(|&&m| m != eid)
                    .filter(|&&m| stuck || self.posted[s * self.n + m].is_nan())
                    .map(|&m| g.events[m].rank)
                    .collect()
            }
            Link::Recv { peer, .. } => vec![peer],
            _ => ev
                .deps
                .iter()
                .filter(|&&d| g.events[d].rank != ev.rank && !self.done[s * self.n + d])
                .map(|&d| g.events[d].rank)
                .collect(),
        };
        out.sort_unstable();
        out.dedup();
        out
    }

    fn log_timeout(&mut self, inst: usize, t: f64) {
        let (s, eid) = self.split(inst);
        let ev = &self.inp.graph.events[eid];
        let posted = if self.posted[inst].is_nan() { t } else { self.posted[inst] };
        let peers = self.awaited(inst);
        self.spans.push(Span {
            step: self.global_step(s),
            rank: ev.rank,
            kind: ev.kind,
            chunk: ev.chunk,
            mb: ev.microbatch,
            t_start: posted.min(t),
            t_end: t,
            status: SpanStatus::Timeout,
            eid: Some(eid),
            peers,
            piece: ev.piece.map(|p| p.index),
        });
    }

    fn deadline(&mut self, inst: usize, t: f64) {
        let r = self.rank_of(inst);
        if self.done[inst] || !self.alive(r) || !self.start[inst].is_nan() {
            return;
        }
        self.log_timeout(inst, t);
        self.rank_state[r] = RankState::Dead;
        self.aborted = true;
        self.failures.push(Failure {
            time: t,
            kind: FailureKind::Timeout,
            rank: r,
            detail: format!("{} timed out", self.inp.graph.events[inst % self.n].label()),
        });
    }

    fn comm_failed(&mut self, inst: usize, t: f64) {
        let (s, eid) = self.split(inst);
        let ev = &self.inp.graph.events[eid];
        if self.done[inst] || !self.alive(ev.rank) {
            return;
        }
        self.spans.push(Span {
            step: self.global_step(s),
            rank: ev.rank,
            kind: ev.kind,
            chunk: ev.chunk,
            mb: ev.microbatch,
            t_start: self.start[inst],
            t_end: t,
            status: SpanStatus::Error,
            eid: Some(eid),
            peers: Vec::new(),
            piece: ev.piece.map(|p| p.index),
        });
        self.failures.push(Failure {
            time: t,
            kind: FailureKind::CommError,
            rank: ev.rank,
            detail: format!("NCCL error: {} failed after link down past retransmit timeout", ev.label()),
        });
        self.crashed = true;
        // let the other members of the same op log their error too
        let same_time = self
            .heap
            .iter()
            .any(|std::cmp::Reverse((Time(x), _, a))| *x == t && matches!(a, Action::Fail(_)));
        if !same_time {
            self.stopped = true;
        }
    }

    fn crash_on_step(&mut self, r: usize, gstep: usize, t: f64) -> bool {
        for (i, f) in self.inp.faults.iter().enumerate() {
            if !matches!(f.kind, FaultKind::Crash | FaultKind::EccErrorLog) || self.fired[i] {
                continue;
            }
            if let Onset::Step(k) = f.onset {
                let hits = match f.target {
                    Target::Rank(x) => x == r,
                    Target::Node(n) => self.inp.topology.node_of(r) == n,
                };
                if hits && gstep >= k {
                    self.crash(i, t);
                    return true;
                }
            }
        }
        false
    }

    fn crash(&mut self, fault: usize, t: f64) {
        if self.fired[fault] || self.stopped {
            return;
        }
        self.fired[fault] = true;
        let f = &self.inp.faults[fault];
        let rank = match f.target {
            Target::Rank(r) => r,
            Target::Node(n) => self.inp.topology.ranks_on_node(n).start,
        };
        // a rank that already finished cannot crash mid-run
        if self.done_count.get(rank).copied() == Some(self.real_per_rank[rank] * self.steps) {
            return;
        }
        self.failures.push(Failure {
            time: t,
            kind: FailureKind::Crash,
            rank,
            detail: match f.kind {
                FaultKind::EccErrorLog => "CUDA error: uncorrectable ECC error encountered".into(),
                _ => format!("process exited with code {}", f.params.exit_code.unwrap_or(1)),
            },
        });
        self.crashed = true;
        self.stopped = true;
    }

    fn suspend(&mut self, t: f64) {
        if self.stopped {
            return;
        }
        for r in 0..self.rank_state.len() {
            if !self.alive(r) || self.done_count[r] == self.real_per_rank[r] * self.steps {
                continue;
            }
            let pick = self.waiting[r]
                .iter()
                .copied()
                .min_by(|&a, &b| self.posted[a].total_cmp(&self.posted[b]).then(a.cmp(&b)))
                .or_else(|| self.running[r].first().copied())
                .or_else(|| self.head(r, Lane::Compute));
            if let Some(inst) = pick {
                self.log_timeout(inst, t);
            }
            self.rank_state[r] = RankState::Dead;
        }
        self.failures.push(Failure {
            time: t,
            kind: FailureKind::Suspended,
            rank: 0,
            detail: "suspended by driver".into(),
        });
        self.aborted = true;
        self.stopped = true;
    }

    fn finish(self) -> SimResult {
        let g = self.inp.graph;
        let ranks = g.num_ranks();
        let mut step_end = Vec::new();
        let mut iteration_times = Vec::new();
        let mut prev = self.cfg.start_time;
        'steps: for s in 0..self.steps {
            let mut end = f64::NEG_INFINITY;
            for r in 0..ranks {
                let opt = *g.order[r].last().unwrap();
                let inst = s * self.n + opt;
                if !self.done[inst] {
                    break 'steps;
                }
                end = end.max(self.end[inst]);
            }
            step_end.push(end);
            iteration_times.push(end - prev);
            prev = end;
        }
        let all_done = (0..ranks).all(|r| self.done_count[r] == self.real_per_rank[r] * self.steps);
        let status = if self.crashed {
            RunStatus::Crashed
        } else if self.aborted || !all_done {
            RunStatus::TimeoutAbort
        } else {
            RunStatus::Completed
        };
        let mut failures = self.failures;
        failures.sort_by(|a, b| a.time.total_cmp(&b.time));
        // stale timeout deadlines can sit in the queue past the last real
        // activity
        let end_time = self
            .spans
            .iter()
            .map(|s| s.t_end)
            .chain(failures.iter().map(|f| f.time))
            .fold(self.cfg.start_time, f64::max);
        SimResult {
            spans: self.spans,
            iteration_times,
            step_end,
            rdma_bytes: self.rdma,
            status,
            seed: self.cfg.seed,
            end_time,
            failures,
            traffic: self.traffic,
        }
    }
}

fn nic_bw(inp: &SimInput, rank: usize) -> f64 {
    let c = inp.topology.coords[rank];
    let nic = c.local_gpu % inp.cluster.nics();
    let deg = inp.profiles.get(c.node_id).map(|p| p.link(nic)).unwrap_or(1.0);
    inp.cluster.nic_bw * deg
}
