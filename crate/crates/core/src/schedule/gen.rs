use super::*;
use crate::cluster::ParallelConfig;

/// Forwards a stage issues before its first backward.
pub fn warmup_forwards(p: usize, v: usize, m: usize, stage: usize) -> usize {
    let w = if v == 1 {
        p - stage - 1
    } else {
        2 * (p - stage - 1) + (v - 1) * p
    };
    w.min(m * v)
}

/// (chunk, micro-batch) in issue order. Micro-batches advance in groups of
/// `p`; each group runs through every chunk before the next group starts.
fn chunk_order(p: usize, v: usize, m: usize, backward: bool) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(m * v);
    let mut start = 0;
    while start < m {
        let end = (start + p).min(m);
        for c in 0..v {
            let c = if backward { v - 1 - c } else { c };
            for mb in start..end {
                out.push((c, mb));
            }
        }
        start = end;
    }
    out
}

#[derive(Clone, Copy)]
struct Action {
    fwd: bool,
    chunk: usize,
    mb: usize,
    phase: Phase,
}

fn actions(p: usize, v: usize, m: usize, w: usize) -> Vec<Action> {
    let f = chunk_order(p, v, m, false);
    let b = chunk_order(p, v, m, true);
    let total = m * v;
    let mut out = Vec::with_capacity(2 * total);
    let act = |fwd: bool, (chunk, mb): (usize, usize), phase| Action { fwd, chunk, mb, phase };
    for &x in &f[..w] {
        out.push(act(true, x, Phase::Warmup));
    }
    for i in 0..total - w {
        out.push(act(true, f[w + i], Phase::Steady));
        out.push(act(false, b[i], Phase::Steady));
    }
    for &x in &b[total - w..] {
        out.push(act(false, x, Phase::Cooldown));
    }
    out
}

/// Event ids of one rank, addressed by `chunk * m + mb`.
#[derive(Default, Clone)]
struct Slots {
    dataload: EventId,
    opt: EventId,
    ag: Vec<EventId>,
    rs: Vec<EventId>,
    fwd_first: Vec<EventId>,
    fwd: Vec<EventId>,
    fwd_out: Vec<EventId>,
    bwd_first: Vec<EventId>,
    bwd: Vec<EventId>,
    bwd_out: Vec<EventId>,
    recv_f: Vec<Option<EventId>>,
    send_f: Vec<Option<EventId>>,
    recv_b: Vec<Option<EventId>>,
    send_b: Vec<Option<EventId>>,
    last_bwd_of_chunk: Vec<EventId>,
}

struct Builder {
    events: Vec<ScheduleEvent>,
    order: Vec<Vec<EventId>>,
}

impl Builder {
    fn push(
        &mut self,
        rank: usize,
        kind: EventKind,
        stream: Stream,
        chunk: Option<usize>,
        mb: Option<usize>,
        phase: Phase,
    ) -> EventId {
        let id = self.events.len();
        self.events.push(ScheduleEvent {
            id,
            rank,
            kind,
            chunk: chunk.map(|c| c as u32),
            microbatch: mb.map(|m| m as u32),
            stream,
            deps: Vec::new(),
            prev_deps: Vec::new(),
            priority: 0,
            phase,
            link: Link::Local,
            coupled: None,
            passive: false,
            piece: None,
            fused: None,
            anchor: None,
        });
        self.order[rank].push(id);
        id
    }
}

/// Builds the single-iteration event graph for every rank.
///
/// When `m` is not a multiple of `p` the standard warm-up depth can deadlock
/// for some interleaved shapes; warm-up then deepens one forward at a time
/// until the graph is acyclic (all forwards first always is).
pub fn gen_interleaved_1f1b(cfg: &ParallelConfig) -> Result<EventGraph> {
    cfg.validate()?;
    let mv = cfg.micro_batches * cfg.vpp;
    let mut extra = 0;
    loop {
        match build(cfg, extra) {
            Err(Error::Cycle(_)) if extra < mv => extra += 1,
            other => return other,
        }
    }
}

fn build(cfg: &ParallelConfig, extra: usize) -> Result<EventGraph> {
    let (t, p, d, v, m) = (cfg.tp, cfg.pp, cfg.dp, cfg.vpp, cfg.micro_batches);
    let n = t * p * d;
    let mv = m * v;
    let rank_of = |dp_idx: usize, pp_idx: usize, tp_idx: usize| tp_idx + t * (dp_idx + d * pp_idx);
    let stage_of = |rank: usize| rank / (t * d);
    let mut b = Builder {
        events: Vec::new(),
        order: vec![Vec::new(); n],
    };
    let mut slots: Vec<Slots> = Vec::with_capacity(n);
    let warmup: Vec<usize> = (0..p).map(|r| (warmup_forwards(p, v, m, r) + extra).min(mv)).collect();
    let stage_actions: Vec<Vec<Action>> = (0..p).map(|r| actions(p, v, m, warmup[r])).collect();

    for rank in 0..n {
        let r = stage_of(rank);
        let mut s = Slots {
            ag: vec![0; v],
            rs: vec![0; v],
            fwd_first: vec![0; mv],
            fwd: vec![0; mv],
            fwd_out: vec![0; mv],
            bwd_first: vec![0; mv],
            bwd: vec![0; mv],
            bwd_out: vec![0; mv],
            recv_f: vec![None; mv],
            send_f: vec![None; mv],
            recv_b: vec![None; mv],
            send_b: vec![None; mv],
            last_bwd_of_chunk: vec![0; v],
            ..Slots::default()
        };
        s.dataload = b.push(rank, EventKind::Dataload, Stream::Compute, None, None, Phase::Boundary);
        if d > 1 {
            for c in 0..v {
                s.ag[c] = b.push(rank, EventKind::Allgather, Stream::Comm, Some(c), None, Phase::Warmup);
            }
        }
        let acts = &stage_actions[r];
        let mut last_bwd_pos = vec![0usize; v];
        for (i, a) in acts.iter().enumerate() {
            if !a.fwd {
                last_bwd_pos[a.chunk] = i;
            }
        }
        // last compute-stream event, for fused send/receive pairs
        let mut prev_send: Option<EventId> = None;
        for (i, a) in acts.iter().enumerate() {
            let (c, mb) = (a.chunk, a.mb);
            let key = c * m + mb;
            let vs = c * p + r;
            let (kind, has_in, has_out) = if a.fwd {
                (EventKind::Fwd, vs > 0 && p > 1, vs < p * v - 1 && p > 1)
            } else {
                (EventKind::Bwd, vs < p * v - 1 && p > 1, vs > 0 && p > 1)
            };
            let (cc, mm) = (Some(c), Some(mb));
            let mut recv = None;
            if has_in {
                let id = b.push(rank, EventKind::Recv, Stream::Compute, cc, mm, a.phase);
                if let Some(sid) = prev_send {
                    b.events[id].coupled = Some(sid);
                    b.events[sid].coupled = Some(id);
                    b.events[id].deps.push(sid);
                }
                recv = Some(id);
            }
            let first_tp = (t > 1).then(|| b.push(rank, EventKind::TpAg, Stream::Compute, cc, mm, a.phase));
            let main = b.push(rank, kind, Stream::Compute, cc, mm, a.phase);
            let last_tp = (t > 1).then(|| b.push(rank, EventKind::TpRs, Stream::Compute, cc, mm, a.phase));
            let out = last_tp.unwrap_or(main);
            let send = has_out.then(|| b.push(rank, EventKind::Send, Stream::Compute, cc, mm, a.phase));
            prev_send = send;
            if a.fwd {
                s.fwd_first[key] = first_tp.unwrap_or(main);
                s.fwd[key] = main;
                s.fwd_out[key] = out;
                s.recv_f[key] = recv;
                s.send_f[key] = send;
            } else {
                s.bwd_first[key] = first_tp.unwrap_or(main);
                s.bwd[key] = main;
                s.bwd_out[key] = out;
                s.recv_b[key] = recv;
                s.send_b[key] = send;
                if i == last_bwd_pos[c] {
                    s.last_bwd_of_chunk[c] = main;
                    if d > 1 {
                        s.rs[c] = b.push(rank, EventKind::Reducescatter, Stream::Comm, cc, None, Phase::Cooldown);
                    }
                }
            }
        }
        s.opt = b.push(rank, EventKind::Opt, Stream::Compute, None, None, Phase::Boundary);
        slots.push(s);
    }

    // wire data dependencies
    for rank in 0..n {
        let r = stage_of(rank);
        let dp_idx = (rank / t) % d;
        let tp_idx = rank % t;
        let s = slots[rank].clone();
        let peer = |vs: usize| -> (usize, usize) {
            let c = vs / p;
            (rank_of(dp_idx, vs % p, tp_idx), c)
        };
        b.events[s.dataload].prev_deps.push(s.opt);
        if d > 1 {
            b.events[s.ag[0]].deps.push(s.dataload);
        }
        for c in 0..v {
            for mb in 0..m {
                let key = c * m + mb;
                let vs = c * p + r;
                // forward inputs
                let mut fin = Vec::new();
                if vs > 0 {
                    if p == 1 {
                        fin.push(s.fwd_out[(c - 1) * m + mb]);
                    } else {
                        let (src, sc) = peer(vs - 1);
                        let send = slots[src].send_f[sc * m + mb].expect("upstream send");
                        let recv = s.recv_f[key].expect("recv");
                        b.events[recv].deps.push(send);
                        b.events[recv].link = Link::Recv { peer: src, send };
                        b.events[send].link = Link::Send { peer: rank, recv };
                        fin.push(recv);
                        fin.push(send);
                    }
                }
                if d > 1 {
                    fin.push(s.ag[c]);
                }
                wire_block(&mut b, s.fwd_first[key], s.fwd[key], s.fwd_out[key], &fin);
                if let Some(send) = s.send_f[key] {
                    b.events[send].deps.push(s.fwd_out[key]);
                }
                // backward inputs
                let mut bin = vec![s.fwd_out[key]];
                if vs < p * v - 1 {
                    if p == 1 {
                        bin.push(s.bwd_out[(c + 1) * m + mb]);
                    } else {
                        let (src, sc) = peer(vs + 1);
                        let send = slots[src].send_b[sc * m + mb].expect("downstream send");
                        let recv = s.recv_b[key].expect("recv");
                        b.events[recv].deps.push(send);
                        b.events[recv].link = Link::Recv { peer: src, send };
                        b.events[send].link = Link::Send { peer: rank, recv };
                        bin.push(recv);
                        bin.push(send);
                    }
                }
                wire_block(&mut b, s.bwd_first[key], s.bwd[key], s.bwd_out[key], &bin);
                if let Some(send) = s.send_b[key] {
                    b.events[send].deps.push(s.bwd_out[key]);
                }
            }
        }
        if d > 1 {
            for c in 0..v {
                let last = slots[rank].last_bwd_of_chunk[c];
                let out = s.bwd_out[(0..m)
                    .map(|mb| c * m + mb)
                    .find(|&k| s.bwd[k] == last)
                    .expect("last backward")];
                b.events[s.rs[c]].deps.push(out);
            }
            b.events[s.opt].deps.extend(s.rs.iter().copied());
        } else {
            let last = *b.order[rank]
                .iter()
                .rev()
                .find(|&&id| b.events[id].kind == EventKind::Bwd)
                .expect("a backward");
            let out = s.bwd_out[(0..mv).find(|&k| s.bwd[k] == last).unwrap()];
            b.events[s.opt].deps.push(out);
        }
    }

    let mut collectives = Vec::new();
    let tp_groups: Vec<Vec<usize>> = (0..d * p)
        .map(|g| (0..t).map(|ti| ti + t * g).collect())
        .collect();
    let dp_groups: Vec<Vec<usize>> = (0..t * p)
        .map(|g| {
            let (ti, pi) = (g % t, g / t);
            (0..d).map(|di| rank_of(di, pi, ti)).collect()
        })
        .collect();
    if t > 1 {
        link_collectives(&mut b, &tp_groups, Dim::Tp, &[EventKind::TpAg, EventKind::TpRs], &mut collectives);
    }
    if d > 1 {
        link_collectives(
            &mut b,
            &dp_groups,
            Dim::Dp,
            &[EventKind::Allgather, EventKind::Reducescatter],
            &mut collectives,
        );
    }
    for e in &mut b.events {
        e.deps.sort_unstable();
        e.deps.dedup();
    }

    let mut g = EventGraph {
        tp: t,
        pp: p,
        dp: d,
        vpp: v,
        micro_batches: m,
        events: b.events,
        order: b.order,
        collectives,
        layer: LayerBlock::new(LayerForm::Serialized),
        applied: Applied::default(),
        warmup,
    };
    g.assign_priorities()?;
    Ok(g)
}

fn wire_block(b: &mut Builder, first: EventId, main: EventId, out: EventId, inputs: &[EventId]) {
    b.events[first].deps.extend_from_slice(inputs);
    if first != main {
        b.events[main].deps.extend_from_slice(inputs);
        b.events[main].deps.push(first);
    }
    if out != main {
        b.events[out].deps.push(main);
    }
}

/// Groups members' collective events of the given kinds by program ordinal.
fn link_collectives(
    b: &mut Builder,
    groups: &[Vec<usize>],
    dim: Dim,
    kinds: &[EventKind],
    out: &mut Vec<Collective>,
) {
    for grp in groups {
        let per_rank: Vec<Vec<EventId>> = grp
            .iter()
            .map(|&r| {
                b.order[r]
                    .iter()
                    .copied()
                    .filter(|&id| kinds.contains(&b.events[id].kind))
                    .collect()
            })
            .collect();
        let len = per_rank[0].len();
        debug_assert!(per_rank.iter().all(|v| v.len() == len));
        for i in 0..len {
            let members: Vec<EventId> = per_rank.iter().map(|v| v[i]).collect();
            let cid = out.len();
            for &mid in &members {
                b.events[mid].link = Link::Collective(cid);
            }
            out.push(Collective {
                kind: b.events[members[0]].kind,
                dim,
                members,
            });
        }
    }
}
