use serde::{Deserialize, Serialize};

use super::*;

/// Rewrites every layer so attention and MLP both read the normalized
/// input. Already-parallel graphs come back unchanged.
pub fn apply_ptb(graph: &EventGraph, cost: &CostModel) -> Result<EventGraph> {
    cost.validate()?;
    let mut g = graph.clone();
    match graph.layer.form() {
        Some(LayerForm::Parallel) => Ok(g),
        Some(LayerForm::Serialized) => {
            g.layer = LayerBlock::new(LayerForm::Parallel);
            g.applied.ptb = true;
            Ok(g)
        }
        None => Err(Error::NotSerializedForm(format!("layer edges {:?}", graph.layer.edges))),
    }
}

/// Structural count of data-parallel collectives that have no compute on
/// their rank to hide behind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExposedDp {
    pub ops: usize,
    pub exposed_allgather: usize,
    pub exposed_reducescatter: usize,
}

impl ExposedDp {
    pub fn exposed(&self) -> usize {
        self.exposed_allgather + self.exposed_reducescatter
    }

    pub fn fraction(&self) -> f64 {
        if self.ops == 0 {
            0.0
        } else {
            self.exposed() as f64 / self.ops as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformReport {
    pub before: ExposedDp,
    pub after: ExposedDp,
    /// Share of data-parallel ops that stopped being exposed.
    pub removed_fraction: f64,
    pub applied: Applied,
}

/// A collective on `rank` is exposed when every compute event of that rank
/// is either upstream or downstream of it in the constraint graph.
pub fn exposed_dp_ops(graph: &EventGraph, rank: usize) -> ExposedDp {
    let (node_of, succ) = graph.constraint_edges();
    let n = graph.events.len();
    let mut pred: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (u, s) in succ.iter().enumerate() {
        for &t in s {
            pred[t].push(u);
        }
    }
    let reach = |start: usize, adj: &Vec<Vec<usize>>| -> Vec<bool> {
        let mut seen = vec![false; n];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(u) = stack.pop() {
            for &t in &adj[u] {
                if !seen[t] {
                    seen[t] = true;
                    stack.push(t);
                }
            }
        }
        seen
    };
    let compute: Vec<EventId> = graph
        .rank_events(rank)
        .filter(|e| e.kind.is_compute())
        .map(|e| e.id)
        .collect();
    let mut out = ExposedDp::default();
    for e in graph.rank_events(rank) {
        if !matches!(e.kind, EventKind::Allgather | EventKind::Reducescatter) {
            continue;
        }
        out.ops += 1;
        let node = node_of[e.id];
        let down = reach(node, &succ);
        let up = reach(node, &pred);
        let hidden = compute.iter().any(|&c| !down[node_of[c]] && !up[node_of[c]]);
        if !hidden {
            match e.kind {
                EventKind::Allgather => out.exposed_allgather += 1,
                _ => out.exposed_reducescatter += 1,
            }
        }
    }
    out
}

/// Applies the data-parallel prefetch, pipeline send/receive decoupling and
/// tensor-parallel chunk fusion selected in `cost`.
pub fn apply_overlap_transforms(graph: &EventGraph, cost: &CostModel) -> Result<(EventGraph, TransformReport)> {
    cost.validate()?;
    if cost.overlap_dp && graph.applied.dp {
        return Err(Error::AlreadyTransformed("dp"));
    }
    if cost.overlap_pp && graph.applied.pp {
        return Err(Error::AlreadyTransformed("pp"));
    }
    if cost.overlap_tp && graph.applied.tp {
        return Err(Error::AlreadyTransformed("tp"));
    }
    let before = exposed_dp_ops(graph, 0);
    let mut g = graph.clone();
    if cost.overlap_dp {
        dp_prefetch(&mut g);
    }
    if cost.overlap_pp {
        pp_decouple(&mut g);
    }
    if cost.overlap_tp {
        tp_fuse(&mut g, cost.gemm_chunks);
    }
    g.assign_priorities()?;
    let after = exposed_dp_ops(&g, 0);
    let removed_fraction = if before.ops == 0 {
        0.0
    } else {
        (before.exposed() as f64 - after.exposed() as f64) / before.ops as f64
    };
    Ok((
        g.clone(),
        TransformReport {
            before,
            after,
            removed_fraction,
            applied: g.applied,
        },
    ))
}

/// First all-gather waits only for the previous iteration's optimizer step,
/// so it runs alongside data loading.
fn dp_prefetch(g: &mut EventGraph) {
    for r in 0..g.num_ranks() {
        let dataload = g.order[r][0];
        let opt = *g.order[r].last().unwrap();
        let first_ag = g.order[r]
            .iter()
            .copied()
            .find(|&id| g.events[id].kind == EventKind::Allgather);
        if let Some(ag) = first_ag {
            let ev = &mut g.events[ag];
            ev.deps.retain(|&d| d != dataload);
            ev.prev_deps.push(opt);
        }
    }
    g.applied.dp = true;
}

/// Splits fused send/receive pairs and moves point-to-point traffic off the
/// compute stream. Receives become passive: they complete when the data
/// lands, posted at the start of the iteration.
fn pp_decouple(g: &mut EventGraph) {
    for r in 0..g.num_ranks() {
        let dataload = g.order[r][0];
        for &id in &g.order[r].clone() {
            match g.events[id].kind {
                EventKind::Recv => {
                    if let Some(s) = g.events[id].coupled.take() {
                        g.events[id].deps.retain(|&d| d != s);
                        g.events[s].coupled = None;
                    }
                    let ev = &mut g.events[id];
                    ev.stream = Stream::Comm;
                    ev.passive = true;
                    if !ev.deps.contains(&dataload) {
                        ev.deps.push(dataload);
                    }
                }
                EventKind::Send => g.events[id].stream = Stream::Comm,
                _ => {}
            }
        }
    }
    g.applied.pp = true;
}

/// Each compute kernel with a leading all-gather and trailing reduce-scatter
/// becomes: blocking first gather piece, fused kernel that pipelines the
/// middle pieces, blocking last reduce-scatter piece.
fn tp_fuse(g: &mut EventGraph, k: u32) {
    g.applied.tp = true;
    if g.tp == 1 || k <= 1 {
        return;
    }
    for r in 0..g.num_ranks() {
        let old = std::mem::take(&mut g.order[r]);
        let mut new = Vec::with_capacity(old.len() + 2 * (k as usize - 1));
        let mut i = 0;
        while i < old.len() {
            let id = old[i];
            new.push(id);
            let kind = g.events[id].kind;
            let is_block = matches!(kind, EventKind::Fwd | EventKind::Bwd)
                && i > 0
                && i + 1 < old.len()
                && g.events[old[i - 1]].kind == EventKind::TpAg
                && g.events[old[i + 1]].kind == EventKind::TpRs;
            if is_block {
                let (ag, rs) = (old[i - 1], old[i + 1]);
                g.events[ag].piece = Some(Piece { index: 0, of: k });
                g.events[rs].piece = Some(Piece { index: k - 1, of: k });
                g.events[id].fused = Some(k);
                new.push(rs);
                i += 1;
                let template = g.events[id].clone();
                for (kind, idx) in (1..k)
                    .map(|j| (EventKind::TpAg, j))
                    .chain((0..k - 1).map(|j| (EventKind::TpRs, j)))
                {
                    let nid = g.events.len();
                    g.events.push(ScheduleEvent {
                        id: nid,
                        kind,
                        stream: Stream::Comm,
                        deps: vec![ag],
                        prev_deps: Vec::new(),
                        link: Link::Local,
                        coupled: None,
                        passive: true,
                        piece: Some(Piece { index: idx, of: k }),
                        fused: None,
                        anchor: Some(id),
                        ..template.clone()
                    });
                    new.push(nid);
                }
            }
            i += 1;
        }
        g.order[r] = new;
    }
}
