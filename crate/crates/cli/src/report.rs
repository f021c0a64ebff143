use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use trainsim::bubbles::bubble_report;
use trainsim::groupinit::{scaling_csv, scaling_table};
use trainsim::observe::{build_heatmap, unified_trace, HeatDim, SpanTable};
use trainsim::runner::{load_artifacts, RunSummary};
use trainsim::schedule::{compute_mfu, FlopsFormula};
use trainsim::scenario::Scenario;
use trainsim::sim::{Span, SpanStatus};
use trainsim::{Error, Result};

/// Message latency and store rate for the group-init report.
const INIT_MSG_LATENCY: f64 = 5e-4;
const INIT_STORE_RATE: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Kind {
    Mfu,
    Bubbles,
    Heatmap,
    Trace,
    Groupinit,
    EffectiveTime,
}

impl Kind {
    fn file_name(self) -> &'static str {
        match self {
            Kind::Mfu => "mfu.csv",
            Kind::Bubbles => "bubbles.json",
            Kind::Heatmap => "heatmap.csv",
            Kind::Trace => "trace.json",
            Kind::Groupinit => "groupinit.csv",
            Kind::EffectiveTime => "effective_time.json",
        }
    }
}

pub struct Options {
    pub dim: String,
    pub group: String,
    pub ns: Vec<usize>,
}

pub fn cmd_report(dir: &Path, kind: Kind, opts: &Options, out: Option<&Path>) -> Result<()> {
    let (s, summary, spans) = load_artifacts(dir)?;
    let body = render(kind, &s, &summary, spans, opts)?;
    match out {
        Some(p) if p == Path::new("-") => {
            // A closed pipe (e.g. `| head`) is not an error for a report.
            let _ = std::io::stdout().lock().write_all(body.as_bytes());
        }
        _ => {
            let path = out.map(PathBuf::from).unwrap_or_else(|| dir.join("reports").join(kind.file_name()));
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&path, body)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}

pub fn render(kind: Kind, s: &Scenario, summary: &RunSummary, spans: Vec<Span>, opts: &Options) -> Result<String> {
    Ok(match kind {
        Kind::Mfu => mfu_csv(s, summary),
        Kind::Bubbles => pretty(&bubbles(s, summary, &spans)?),
        Kind::Heatmap => {
            let dim: HeatDim = opts.dim.parse()?;
            build_heatmap(&SpanTable::from_spans(spans), &s.topology()?, dim)?.to_csv()
        }
        Kind::Trace => {
            let group = opts.group.parse()?;
            pretty(&unified_trace(&SpanTable::from_spans(spans), &s.graph()?, &s.topology()?, group)?)
        }
        Kind::Groupinit => {
            let (tp, pp) = (s.parallel.tp, s.parallel.pp);
            let ns = if opts.ns.is_empty() {
                (0..5).map(|k| s.parallel.ranks() << k).collect()
            } else {
                opts.ns.clone()
            };
            scaling_csv(&scaling_table(&ns, tp, pp, INIT_MSG_LATENCY, INIT_STORE_RATE)?)
        }
        Kind::EffectiveTime => pretty(&effective_time(summary)),
    })
}

fn mfu_csv(s: &Scenario, summary: &RunSummary) -> String {
    let mut out = String::from("batch,gpus,iteration_time_s,tokens_per_s,mfu_pct,aggregate_flops\n");
    let m = compute_mfu(summary.iteration_time, &s.parallel, &s.cluster, FlopsFormula::default());
    let _ = writeln!(
        out,
        "{},{},{},{},{},{}",
        s.parallel.global_batch,
        s.parallel.ranks(),
        m.iteration_time,
        m.tokens_per_s,
        m.mfu * 100.0,
        m.achieved_flops
    );
    out
}

/// Bubble accounting over the completed iterations of the first segment.
fn bubbles(s: &Scenario, summary: &RunSummary, spans: &[Span]) -> Result<Value> {
    let seg = summary.segments.first().ok_or_else(|| Error::Io("run has no segments".into()))?;
    if seg.steps_completed == 0 {
        return Err(Error::InsufficientSteps { need: 1, have: 0 });
    }
    let last = seg.first_step + seg.steps_completed;
    let window: Vec<Span> = spans
        .iter()
        .filter(|x| x.step >= seg.first_step && x.step < last && x.status == SpanStatus::Ok)
        .cloned()
        .collect();
    let end = window.iter().map(|x| x.t_end).fold(seg.start_time, f64::max);
    let graph = s.graph()?;
    let r = bubble_report(&graph, &window, seg.steps_completed, seg.start_time, end);
    Ok(json!({
        "p": graph.pp,
        "v": graph.vpp,
        "m": graph.micro_batches,
        "steps": seg.steps_completed,
        "formula_bubbles": r.analytic_bubbles,
        "simulated_bubbles": r.simulated_bubbles,
        "total_idle": r.total_idle_slots,
        "warmup_idle": r.warmup_idle,
        "steady_idle": r.steady_idle,
        "cooldown_idle": r.cooldown_idle,
        "exposed_comm_fraction": r.exposed_comm_fraction,
    }))
}

fn effective_time(m: &RunSummary) -> Value {
    let productive = m.steps_completed as f64 * m.iteration_time;
    json!({
        "steps_completed": m.steps_completed,
        "iteration_time": m.iteration_time,
        "elapsed": m.elapsed,
        "productive_time": productive,
        "lost_time": m.elapsed - productive,
        "effective_time_rate": m.effective_time_rate,
        "recoveries": m.recoveries.len(),
    })
}
