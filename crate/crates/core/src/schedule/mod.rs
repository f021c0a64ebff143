//! Per-rank event graphs for one training iteration: generation of the
//! interleaved one-forward-one-backward schedule, overlap and parallel-block
//! rewrites, and analytic throughput helpers.

pub mod cost;
mod gen;
pub mod mfu;
mod transform;

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use crate::cluster::Dim;
use crate::error::{Error, Result};
pub use cost::{attention_cost, CostModel, LayerBlock, LayerForm};
pub use gen::{gen_interleaved_1f1b, warmup_forwards};
pub use mfu::{analytic_bubbles, compute_mfu, FlopsFormula, MfuReport};
pub use transform::{apply_overlap_transforms, apply_ptb, exposed_dp_ops, ExposedDp, TransformReport};

pub type EventId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Fwd,
    Bwd,
    Opt,
    Allgather,
    Reducescatter,
    Send,
    Recv,
    TpAg,
    TpRs,
    Dataload,
}

impl EventKind {
    pub fn is_compute(self) -> bool {
        matches!(self, EventKind::Fwd | EventKind::Bwd | EventKind::Opt | EventKind::Dataload)
    }

    pub fn is_comm(self) -> bool {
        !self.is_compute()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Fwd => "FWD",
            EventKind::Bwd => "BWD",
            EventKind::Opt => "OPT",
            EventKind::Allgather => "ALLGATHER",
            EventKind::Reducescatter => "REDUCESCATTER",
            EventKind::Send => "SEND",
            EventKind::Recv => "RECV",
            EventKind::TpAg => "TP_AG",
            EventKind::TpRs => "TP_RS",
            EventKind::Dataload => "DATALOAD",
        }
    }

    pub const ALL: [EventKind; 10] = [
        EventKind::Fwd,
        EventKind::Bwd,
        EventKind::Opt,
        EventKind::Allgather,
        EventKind::Reducescatter,
        EventKind::Send,
        EventKind::Recv,
        EventKind::TpAg,
        EventKind::TpRs,
        EventKind::Dataload,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stream {
    Compute,
    Comm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Steady,
    Cooldown,
    Boundary,
}

/// FIFO queue an event occupies while it runs. The communication stream is
/// split per communicator so data-parallel collectives never queue behind
/// pipeline sends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Lane {
    Compute = 0,
    Dp = 1,
    P2p = 2,
}

pub const LANES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Local,
    Collective(usize),
    Send { peer: usize, recv: EventId },
    Recv { peer: usize, send: EventId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Piece {
    pub index: u32,
    pub of: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEvent {
    pub id: EventId,
    pub rank: usize,
    pub kind: EventKind,
    pub chunk: Option<u32>,
    pub microbatch: Option<u32>,
    pub stream: Stream,
    /// Same-iteration dependencies.
    pub deps: Vec<EventId>,
    /// Dependencies on the previous iteration's copy of these events.
    pub prev_deps: Vec<EventId>,
    pub priority: i64,
    pub phase: Phase,
    pub link: Link,
    /// Partner of a fused send/receive pair.
    pub coupled: Option<EventId>,
    /// Takes no stream slot; completes when its inputs arrive.
    pub passive: bool,
    pub piece: Option<Piece>,
    /// Compute kernel fused with k-way chunked tensor-parallel collectives.
    pub fused: Option<u32>,
    /// For trace-only pieces: the fused kernel whose timing they follow.
    pub anchor: Option<EventId>,
}

impl ScheduleEvent {
    pub fn lane(&self) -> Option<Lane> {
        if self.passive {
            return None;
        }
        match (self.stream, self.kind) {
            (Stream::Compute, _) => Some(Lane::Compute),
            (Stream::Comm, EventKind::Allgather | EventKind::Reducescatter) => Some(Lane::Dp),
            (Stream::Comm, EventKind::Send) => Some(Lane::P2p),
            // TP pieces that remain on the comm stream are annotations
            (Stream::Comm, _) => None,
        }
    }

    pub fn label(&self) -> String {
        let mut s = self.kind.as_str().to_string();
        if let Some(c) = self.chunk {
            s.push_str(&format!(" c{c}"));
        }
        if let Some(mb) = self.microbatch {
            s.push_str(&format!(" mb{mb}"));
        }
        if let Some(p) = self.piece {
            s.push_str(&format!(" [{}/{}]", p.index + 1, p.of));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Collective {
    pub kind: EventKind,
    pub dim: Dim,
    pub members: Vec<EventId>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Applied {
    pub ptb: bool,
    pub dp: bool,
    pub pp: bool,
    pub tp: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventGraph {
    pub tp: usize,
    pub pp: usize,
    pub dp: usize,
    pub vpp: usize,
    pub micro_batches: usize,
    pub events: Vec<ScheduleEvent>,
    /// Program order per rank across all lanes.
    pub order: Vec<Vec<EventId>>,
    pub collectives: Vec<Collective>,
    pub layer: LayerBlock,
    pub applied: Applied,
    /// In-flight forwards before the first backward, per pipeline stage.
    pub warmup: Vec<usize>,
}

impl EventGraph {
    pub fn num_ranks(&self) -> usize {
        self.order.len()
    }

    pub fn layer_form(&self) -> LayerForm {
        self.layer.form().unwrap_or(LayerForm::Serialized)
    }

    pub fn rank_events(&self, rank: usize) -> impl Iterator<Item = &ScheduleEvent> {
        self.order[rank].iter().map(move |&id| &self.events[id])
    }

    pub fn count(&self, rank: usize, kind: EventKind) -> usize {
        self.rank_events(rank).filter(|e| e.kind == kind).count()
    }

    /// Program order restricted to one lane.
    pub fn lane_order(&self, rank: usize, lane: Lane) -> Vec<EventId> {
        self.order[rank]
            .iter()
            .copied()
            .filter(|&id| self.events[id].lane() == Some(lane))
            .collect()
    }

    /// Successor lists for the single-iteration constraint graph: explicit
    /// dependencies plus lane FIFO edges. Collective members are tied
    /// together in both directions through their peers' inputs, which the
    /// cycle check handles by merging them into one node.
    fn constraint_edges(&self) -> (Vec<usize>, Vec<Vec<usize>>) {
        // node = collective-merged event index
        let n = self.events.len();
        let mut node_of: Vec<usize> = (0..n).collect();
        for c in &self.collectives {
            let head = c.members[0];
            for &m in &c.members {
                node_of[m] = head;
            }
        }
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in &self.events {
            for &d in &e.deps {
                succ[node_of[d]].push(node_of[e.id]);
            }
        }
        for r in 0..self.num_ranks() {
            for lane in [Lane::Compute, Lane::Dp, Lane::P2p] {
                let ids = self.lane_order(r, lane);
                for w in ids.windows(2) {
                    succ[node_of[w[0]]].push(node_of[w[1]]);
                }
            }
        }
        (node_of, succ)
    }

    /// Topological order of the constraint graph, or the first event found
    /// on a cycle.
    pub fn topo_order(&self) -> Result<Vec<EventId>> {
        let (node_of, succ) = self.constraint_edges();
        let n = self.events.len();
        let mut indeg = vec![0usize; n];
        for s in &succ {
            for &t in s {
                indeg[t] += 1;
            }
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| node_of[i] == i && indeg[i] == 0).collect();
        let mut nodes = Vec::with_capacity(n);
        while let Some(u) = queue.pop_front() {
            nodes.push(u);
            for &t in &succ[u] {
                indeg[t] -= 1;
                if indeg[t] == 0 {
                    queue.push_back(t);
                }
            }
        }
        let heads = (0..n).filter(|&i| node_of[i] == i).count();
        if nodes.len() != heads {
            let stuck = (0..n).find(|&i| node_of[i] == i && indeg[i] > 0).unwrap_or(0);
            return Err(Error::Cycle(stuck));
        }
        // expand merged nodes back into member events
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
        for i in 0..n {
            members[node_of[i]].push(i);
        }
        Ok(nodes.into_iter().flat_map(|h| members[h].clone()).collect())
    }

    pub fn check_acyclic(&self) -> Result<()> {
        self.topo_order().map(|_| ())
    }

    /// Sets every event's priority to the topological index of the first
    /// compute event that (transitively) consumes it.
    pub fn assign_priorities(&mut self) -> Result<()> {
        let topo = self.topo_order()?;
        let mut index = vec![0i64; self.events.len()];
        for (i, &e) in topo.iter().enumerate() {
            index[e] = i as i64;
        }
        let mut dependents: Vec<Vec<EventId>> = vec![Vec::new(); self.events.len()];
        for e in &self.events {
            for &d in &e.deps {
                dependents[d].push(e.id);
            }
        }
        let mut first = vec![i64::MAX; self.events.len()];
        for &e in topo.iter().rev() {
            let ev = &self.events[e];
            first[e] = if ev.kind.is_compute() {
                index[e]
            } else {
                dependents[e].iter().map(|&d| first[d]).min().unwrap_or(i64::MAX)
            };
        }
        for e in &mut self.events {
            e.priority = first[e.id];
        }
        Ok(())
    }

    /// Event producing the result of compute event `id` (its trailing
    /// reduce-scatter when tensor parallel).
    pub fn output_of(&self, id: EventId) -> EventId {
        let ev = &self.events[id];
        let order = &self.order[ev.rank];
        let pos = order.iter().position(|&x| x == id).expect("event in program order");
        order[pos + 1..]
            .iter()
            .copied()
            .take_while(|&x| {
                let k = self.events[x].kind;
                k == EventKind::TpRs || (k == EventKind::TpAg && self.events[x].anchor.is_some())
            })
            .filter(|&x| self.events[x].anchor.is_none())
            .last()
            .unwrap_or(id)
    }

    /// Tie-break key for ordering communication of equal priority.
    pub fn priority_key(&self, id: EventId) -> (i64, u32, u32) {
        let e = &self.events[id];
        (e.priority, e.microbatch.unwrap_or(u32::MAX), e.chunk.unwrap_or(u32::MAX))
    }
}
