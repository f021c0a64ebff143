use serde_json::{json, Value};
use std::collections::{BTreeSet, HashMap};

use super::SpanTable;
use crate::cluster::{GroupRef, Topology};
use crate::error::Result;
use crate::schedule::{EventGraph, Link};
use crate::sim::{Span, SpanStatus};

fn us(t: f64) -> f64 {
    t * 1e6
}

fn span_name(s: &Span) -> String {
    let mut name = s.kind.as_str().to_string();
    if let Some(c) = s.chunk {
        name.push_str(&format!(" c{c}"));
    }
    if let Some(m) = s.mb {
        name.push_str(&format!(" mb{m}"));
    }
    if let Some(p) = s.piece {
        name.push_str(&format!(" p{p}"));
    }
    name
}

fn status_str(s: SpanStatus) -> &'static str {
    match s {
        SpanStatus::Ok => "OK",
        SpanStatus::Timeout => "TIMEOUT",
        SpanStatus::Error => "ERROR",
    }
}

/// Trace-event document for the spans of `ranks`, with flow events for
/// cross-rank dependencies and collective membership listed under `edges`.
fn build(spans: &[&Span], graph: &EventGraph, ranks: &BTreeSet<usize>, pid: usize, label: &str) -> Value {
    let mut events: Vec<Value> = Vec::new();
    events.push(json!({"ph": "M", "name": "process_name", "pid": pid, "tid": 0, "args": {"name": label}}));
    for &r in ranks {
        events.push(json!({"ph": "M", "name": "thread_name", "pid": pid, "tid": r, "args": {"name": format!("rank {r}")}}));
    }
    let mut by_eid: HashMap<(usize, usize), &Span> = HashMap::new();
    for &s in spans {
        if let Some(e) = s.eid {
            by_eid.insert((s.step, e), s);
        }
        let mut args = json!({"step": s.step, "status": status_str(s.status)});
        if let Some(e) = s.eid {
            args["eid"] = json!(e);
        }
        if !s.peers.is_empty() {
            args["awaiting"] = json!(s.peers);
        }
        events.push(json!({
            "ph": "X",
            "name": span_name(s),
            "cat": s.kind.as_str(),
            "pid": pid,
            "tid": s.rank,
            "ts": us(s.t_start),
            "dur": us(s.t_end - s.t_start),
            "args": args,
        }));
    }
    let mut edges: Vec<Value> = Vec::new();
    let mut flow_id = 0u64;
    for &s in spans {
        let Some(eid) = s.eid else { continue };
        let Some(ev) = graph.events.get(eid) else { continue };
        for &d in &ev.deps {
            let dep = &graph.events[d];
            if dep.rank == ev.rank || !ranks.contains(&dep.rank) {
                continue;
            }
            let Some(src) = by_eid.get(&(s.step, d)) else { continue };
            flow_id += 1;
            events.push(json!({"ph": "s", "id": flow_id, "name": "dep", "cat": "dep", "pid": pid, "tid": src.rank, "ts": us(src.t_end)}));
            events.push(json!({"ph": "f", "bp": "e", "id": flow_id, "name": "dep", "cat": "dep", "pid": pid, "tid": s.rank, "ts": us(s.t_start)}));
            edges.push(json!({
                "kind": "data",
                "step": s.step,
                "from": {"rank": src.rank, "eid": d, "name": span_name(src)},
                "to": {"rank": s.rank, "eid": eid, "name": span_name(s)},
            }));
        }
        if let Link::Collective(cid) = ev.link {
            let members = &graph.collectives[cid].members;
            // one edge from the first member to each other member in view
            if members[0] == eid {
                for &m in &members[1..] {
                    let mr = graph.events[m].rank;
                    if ranks.contains(&mr) && by_eid.contains_key(&(s.step, m)) {
                        edges.push(json!({
                            "kind": "collective",
                            "step": s.step,
                            "from": {"rank": s.rank, "eid": eid, "name": span_name(s)},
                            "to": {"rank": mr, "eid": m, "name": span_name(by_eid[&(s.step, m)])},
                        }));
                    }
                }
            }
        }
    }
    json!({"traceEvents": events, "displayTimeUnit": "ms", "edges": edges})
}

/// One timeline row per rank of `group`, on the shared simulated clock.
pub fn unified_trace(table: &SpanTable, graph: &EventGraph, topo: &Topology, group: GroupRef) -> Result<Value> {
    let ranks: BTreeSet<usize> = topo.group(group)?.iter().copied().collect();
    let spans: Vec<&Span> = table.spans().filter(|s| ranks.contains(&s.rank)).collect();
    Ok(build(&spans, graph, &ranks, group.index, &group.to_string()))
}

/// Every rank's timeline, e.g. of a fault-free single-iteration run.
pub fn planned_trace(spans: &[Span], graph: &EventGraph) -> Value {
    let ranks: BTreeSet<usize> = (0..graph.num_ranks()).collect();
    let refs: Vec<&Span> = spans.iter().collect();
    build(&refs, graph, &ranks, 0, "schedule")
}
