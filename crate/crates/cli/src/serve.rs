use std::convert::Infallible;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::Deserialize;
use serde_json::{json, Value};
use trainsim::cluster::{Dim, Fleet, Topology};
use trainsim::control::{ControlEvent, LiveCluster, LiveConfig, LiveHandle, LiveView, LocalCluster, Transition};
use trainsim::observe::{build_heatmap, unified_trace, HeatDim, SpanTable};
use trainsim::runner::{load_artifacts, run_scenario, RecoveryTrace, RunSummary, RECOVERY_TRACE};
use trainsim::scenario::Scenario;
use trainsim::schedule::EventGraph;
use trainsim::sim::SpanStatus;
use trainsim::Error;

const SSE_POLL: Duration = Duration::from_millis(200);
const LAST_OPS: usize = 10;

enum Control {
    /// Recorded run; read-only.
    Replay(RecoveryTrace),
    Live { view: Arc<Mutex<LiveView>>, handle: LiveHandle },
}

struct App {
    scenario: Scenario,
    topo: Topology,
    graph: EventGraph,
    table: SpanTable,
    summary: RunSummary,
    control: Control,
}

type Shared = Arc<App>;

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::UnknownDimension(_) | Error::UnknownGroup(_) | Error::UnknownNode(_) => StatusCode::NOT_FOUND,
            Error::AlreadyRecovering(_) | Error::IllegalTransition { .. } => StatusCode::CONFLICT,
            Error::InvalidConfig(_) | Error::Parse { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

pub fn cmd_serve(path: &Path, live: bool, port: u16, speed: f64, seed: Option<u64>) -> trainsim::Result<()> {
    let mut cluster = None;
    let app = if live {
        let s = crate::load_scenario(path, seed)?;
        let run = run_scenario(&s)?;
        let need = s.cluster.num_nodes;
        let fleet = Fleet::new(s.cluster.clone(), need + s.control.spares, &s.profiles)?;
        let mut lc = LocalCluster::launch(&fleet, need, s.control.rules.clone(), s.control.diag.clone(), 0.0)?;
        lc.durations = s.control.durations.clone();
        let lcl = LiveCluster::spawn(lc, fleet, LiveConfig { speed, ..LiveConfig::default() });
        let control = Control::Live { view: lcl.view.clone(), handle: lcl.handle() };
        cluster = Some(lcl);
        App::new(s, run.summary, run.spans, control)?
    } else {
        let (s, summary, spans) = load_artifacts(path)?;
        let p = path.join(RECOVERY_TRACE);
        let trace: RecoveryTrace = serde_json::from_str(&std::fs::read_to_string(&p)?)
            .map_err(|e| Error::Parse { path: p.display().to_string(), msg: e.to_string() })?;
        App::new(s, summary, spans, Control::Replay(trace))?
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let served = rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(Arc::new(app)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    });
    if let Some(c) = cluster {
        c.shutdown();
    }
    Ok(served?)
}

impl App {
    fn new(scenario: Scenario, summary: RunSummary, spans: Vec<trainsim::sim::Span>, control: Control) -> trainsim::Result<Self> {
        Ok(App {
            topo: scenario.topology()?,
            graph: scenario.graph()?,
            table: SpanTable::from_spans(spans),
            scenario,
            summary,
            control,
        })
    }

    fn status(&self) -> Value {
        match &self.control {
            Control::Replay(t) => {
                let tail = t.transitions.last();
                json!({
                    "mode": "replay",
                    "phase": tail.map(|x| x.to).unwrap_or(trainsim::control::RecoveryPhase::Running),
                    "at": tail.map(|x| x.at).unwrap_or(0.0),
                    "roster": self.summary.final_roster,
                    "outcome": self.summary.outcome,
                    "trace_tail": tail,
                })
            }
            Control::Live { view, .. } => {
                let st = view.lock().unwrap().status.clone();
                let mut v = serde_json::to_value(&st).expect("status serializes");
                if let Value::Object(m) = &mut v {
                    let tail: Option<&Transition> = st.as_ref().and_then(|s| s.trace.last());
                    m.insert("trace_tail".into(), json!(tail));
                    m.insert("mode".into(), json!("live"));
                }
                v
            }
        }
    }

    fn events_from(&self, cursor: usize) -> Vec<ControlEvent> {
        match &self.control {
            Control::Replay(t) => t.events.get(cursor..).unwrap_or_default().to_vec(),
            Control::Live { view, .. } => view.lock().unwrap().events.get(cursor..).unwrap_or_default().to_vec(),
        }
    }
}

fn router(app: Shared) -> Router {
    Router::new()
        .route("/api/topology", get(topology))
        .route("/api/heatmap", get(heatmap))
        .route("/api/trace", get(trace))
        .route("/api/status", get(status))
        .route("/api/rank/{id}", get(rank))
        .route("/api/events/stream", get(events))
        .route("/api/evict", post(evict))
        .with_state(app)
}

async fn topology(State(app): State<Shared>) -> ApiResult {
    let mut v = serde_json::to_value(&app.topo).expect("topology serializes");
    if let Value::Object(m) = &mut v {
        m.insert("ranks".into(), json!(app.topo.ranks()));
        m.insert("num_nodes".into(), json!(app.topo.num_nodes()));
        m.insert("vpp".into(), json!(app.scenario.parallel.vpp));
    }
    Ok(Json(v))
}

#[derive(Deserialize)]
struct HeatQuery {
    dim: Option<String>,
}

async fn heatmap(State(app): State<Shared>, Query(q): Query<HeatQuery>) -> ApiResult {
    let dim: HeatDim = q.dim.as_deref().unwrap_or("rank").parse()?;
    let hm = build_heatmap(&app.table, &app.topo, dim)?;
    Ok(Json(serde_json::to_value(hm).expect("heat map serializes")))
}

#[derive(Deserialize)]
struct TraceQuery {
    group: Option<String>,
}

async fn trace(State(app): State<Shared>, Query(q): Query<TraceQuery>) -> ApiResult {
    let group = q.group.as_deref().unwrap_or("pp:0").parse()?;
    Ok(Json(unified_trace(&app.table, &app.graph, &app.topo, group)?))
}

async fn status(State(app): State<Shared>) -> ApiResult {
    Ok(Json(app.status()))
}

async fn rank(State(app): State<Shared>, UrlPath(id): UrlPath<usize>) -> ApiResult {
    let topo = &app.topo;
    let c = topo
        .coord_of(id)
        .map_err(|_| ApiError(StatusCode::NOT_FOUND, format!("unknown rank {id}")))?;
    let mut groups = serde_json::Map::new();
    for dim in [Dim::Tp, Dim::Pp, Dim::Dp] {
        let g = topo.group_of(id, dim);
        let members = topo.group(g)?;
        groups.insert(dim.as_str().into(), json!({ "group": g.to_string(), "members": members }));
    }
    // Activations move to the next pipeline stage and gradients to the
    // previous one; with interleaving the last stage feeds stage 0.
    let (pp, wrap) = (topo.pp, app.scenario.parallel.vpp > 1);
    let stage = |i: usize| topo.rank_of(c.dp_idx, i, c.tp_idx).ok();
    let next = if c.pp_idx + 1 < pp { stage(c.pp_idx + 1) } else if wrap && pp > 1 { stage(0) } else { None };
    let prev = if c.pp_idx > 0 { stage(c.pp_idx - 1) } else if wrap && pp > 1 { stage(pp - 1) } else { None };
    let peers = |dim| -> Vec<usize> {
        topo.group(topo.group_of(id, dim)).map(|m| m.iter().copied().filter(|&r| r != id).collect()).unwrap_or_default()
    };

    let mut ops: Vec<_> = app.table.spans().filter(|s| s.rank == id).collect();
    ops.sort_by(|a, b| a.t_end.total_cmp(&b.t_end));
    let last_ops = &ops[ops.len().saturating_sub(LAST_OPS)..];

    let mut errors: Vec<String> = ops
        .iter()
        .filter(|s| s.status != SpanStatus::Ok)
        .map(|s| {
            format!("step {} {:?} {:?} at {:.3}s, waiting on ranks {:?}", s.step, s.kind, s.status, s.t_end, s.peers)
        })
        .collect();
    for r in &app.summary.recoveries {
        if r.failure.rank == id {
            errors.push(format!("{:?} at {:.3}s: {}", r.failure.kind, r.failure.time, r.failure.detail));
        }
        if r.evicted.contains(&c.node_id) {
            errors.push(format!("node {} evicted at {:.3}s: {}", c.node_id, r.detected_at, r.reason));
        }
    }
    let evidence = match &app.control {
        Control::Live { view, .. } => view
            .lock()
            .unwrap()
            .status
            .as_ref()
            .and_then(|s| s.evidence.get(&c.node_id).cloned())
            .unwrap_or_default(),
        Control::Replay(_) => app.summary.recoveries.iter().filter_map(|r| r.evidence.get(&c.node_id)).flatten().cloned().collect(),
    };

    Ok(Json(json!({
        "rank": id,
        "coord": c,
        "groups": groups,
        "data_flow": {
            "activations_to": next,
            "activations_from": prev,
            "gradients_to": prev,
            "gradients_from": next,
            "tp_peers": peers(Dim::Tp),
            "dp_peers": peers(Dim::Dp),
        },
        "last_ops": last_ops,
        "errors": errors,
        "evidence": evidence,
    })))
}

/// One `status` message first, then a `control` message per control-plane
/// event and another `status` whenever the status changes.
async fn events(State(app): State<Shared>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let s = stream::unfold((app, 0usize, None::<Value>, true), |(app, cursor, last, first)| async move {
        if !first {
            tokio::time::sleep(SSE_POLL).await;
        }
        let mut out = Vec::new();
        let fresh = app.events_from(cursor);
        let next = cursor + fresh.len();
        for (i, e) in fresh.iter().enumerate() {
            let data = serde_json::to_string(e).expect("event serializes");
            out.push(Event::default().event("control").id((cursor + i).to_string()).data(data));
        }
        // The live clock advances every tick; only other changes are news.
        let st = app.status();
        let mut key = st.clone();
        if let Value::Object(m) = &mut key {
            m.remove("at");
        }
        let last = if last.as_ref() != Some(&key) {
            out.push(Event::default().event("status").data(st.to_string()));
            Some(key)
        } else {
            last
        };
        Some((out, (app, next, last, false)))
    })
    .flat_map(stream::iter)
    .map(Ok);
    Sse::new(s).keep_alive(KeepAlive::default())
}

#[derive(Deserialize)]
struct EvictRequest {
    node_id: usize,
    #[serde(default)]
    reason: String,
}

async fn evict(State(app): State<Shared>, Json(req): Json<EvictRequest>) -> ApiResult {
    let Control::Live { handle, .. } = &app.control else {
        return Err(ApiError(StatusCode::CONFLICT, "artifact replay is read-only".into()));
    };
    let handle = handle.clone();
    let reason = if req.reason.is_empty() { "manual eviction".to_string() } else { req.reason };
    let phase = tokio::task::spawn_blocking(move || handle.evict(req.node_id, &reason))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(json!({ "node_id": req.node_id, "phase": phase })))
}
