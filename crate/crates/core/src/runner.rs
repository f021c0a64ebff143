//! End-to-end scenario execution: the simulator produces spans and
//! telemetry, heartbeats built from that telemetry feed the control plane,
//! and every recovery restarts the simulation from the checkpoint it chose.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::checkpoint::{checkpoint, recover, CheckpointLog, CheckpointMeta, CheckpointStore};
use crate::cluster::{Fleet, Topology};
use crate::control::driver::{ControlEvent, ResumePoint};
use crate::control::executor::Telemetry;
use crate::control::heartbeat::{ProcStatus, RuleKind, HEARTBEAT_INTERVAL};
use crate::control::local::LocalCluster;
use crate::control::recovery::{trace_is_valid, Evidence, RecoveryPhase, Transition};
use crate::error::{Error, Result};
use crate::observe::{pinpoint_hang, HangReport};
use crate::scenario::Scenario;
use crate::schedule::{CostModel, EventGraph};
use crate::sim::{self, model_data_pipeline, DataPipeline, Failure, FailureKind, FaultKind, FaultSpec, RunStatus, SimConfig, SimInput, SimResult, Span, SpanStatus, Target};

/// Process exit codes of `run`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Completed,
    TimeoutAbort,
    Crashed,
    RecoveryStuck,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Completed => 0,
            Outcome::TimeoutAbort => 10,
            Outcome::Crashed => 11,
            Outcome::RecoveryStuck => 12,
        }
    }
}

/// Exit code for scenario files that fail to parse or validate.
pub const EXIT_INVALID: i32 = 2;

/// One uninterrupted stretch of simulated training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_time: f64,
    pub first_step: usize,
    pub steps_completed: usize,
    pub end_time: f64,
    pub status: RunStatus,
    pub failure: Option<Failure>,
    /// Set when the control plane suspended the job before the simulator
    /// gave up on its own.
    pub suspended_at: Option<f64>,
    pub roster: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeInfo {
    pub checkpoint_id: Option<u64>,
    pub state_id: Option<String>,
    pub step: usize,
    pub load_time: f64,
    pub store_bytes_read: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRecord {
    pub failure: Failure,
    pub detected_at: f64,
    pub rule: Option<RuleKind>,
    pub reason: String,
    pub hang: Option<HangReport>,
    pub evicted: Vec<usize>,
    pub evidence: BTreeMap<usize, Vec<Evidence>>,
    pub resume: ResumeInfo,
    pub resumed_at: Option<f64>,
    pub trace: Vec<Transition>,
    pub trace_valid: bool,
    /// Every roster executor came back running from the chosen checkpoint.
    pub resumed_state_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub outcome: Outcome,
    pub exit_code: i32,
    pub steps: usize,
    pub steps_completed: usize,
    pub elapsed: f64,
    /// Median iteration time over uninterrupted iterations.
    pub iteration_time: f64,
    pub effective_time_rate: f64,
    pub segments: Vec<Segment>,
    pub recoveries: Vec<RecoveryRecord>,
    pub checkpoints: Vec<CheckpointMeta>,
    pub final_roster: Vec<usize>,
    pub data_pipeline: Option<DataPipeline>,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub summary: RunSummary,
    pub spans: Vec<Span>,
    /// Every driver transition, in order.
    pub trace: Vec<Transition>,
    pub events: Vec<ControlEvent>,
}

/// A fault plus the physical node it lives on; it stops applying once that
/// node leaves its slot.
struct Armed {
    spec: FaultSpec,
    slot: usize,
    node: usize,
    consumed: bool,
}

fn one_shot(k: FaultKind) -> bool {
    !matches!(k, FaultKind::Straggler | FaultKind::LaunchSkewDrift)
}

fn fault_slot(f: &FaultSpec, topo: &Topology) -> usize {
    match f.target {
        Target::Node(n) => n,
        Target::Rank(r) => topo.node_of(r),
    }
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Bytes moved by `node` within `(from, to]`, spreading each op evenly
/// over its duration.
fn bytes_in_window(traffic: &[sim::Traffic], node: usize, from: f64, to: f64) -> f64 {
    traffic
        .iter()
        .filter(|x| x.node == node && x.t_end > from && x.t_start <= to)
        .map(|x| {
            let d = x.t_end - x.t_start;
            if d <= 0.0 {
                return x.bytes;
            }
            let overlap = x.t_end.min(to) - x.t_start.max(from);
            x.bytes * (overlap.max(0.0) / d)
        })
        .sum()
}

struct Job<'a> {
    s: &'a Scenario,
    topo: Topology,
    graph: EventGraph,
    cost: CostModel,
}

impl Job<'_> {
    fn simulate(&self, fleet: &Fleet, roster: &[usize], faults: &[FaultSpec], cfg: &SimConfig) -> SimResult {
        let profiles = fleet.roster_profiles(roster);
        let input = SimInput {
            graph: &self.graph,
            cost: &self.cost,
            cluster: &self.s.cluster,
            topology: &self.topo,
            profiles: &profiles,
            faults,
        };
        sim::run(&input, cfg)
    }
}

pub fn run_scenario(s: &Scenario) -> Result<RunArtifacts> {
    s.validate()?;
    let topo = s.topology()?;
    let graph = s.graph()?;
    let mut cost = s.cost.clone();
    let data_pipeline = s.data.as_ref().map(|d| {
        let grad_sync = if s.parallel.dp > 1 {
            let per_chunk = cost.dp_bytes_per_chunk * (s.parallel.dp - 1) as f64 / s.parallel.dp as f64 / s.cluster.nic_bw;
            per_chunk * s.parallel.vpp as f64
        } else {
            0.0
        };
        let p = model_data_pipeline(&s.cluster, &s.parallel, d, grad_sync);
        cost.t_dataload = p.dataload_s;
        p
    });
    let job = Job { s, topo, graph, cost };
    let need = s.cluster.num_nodes;
    let gpus = s.cluster.gpus_per_node;
    let nics = s.cluster.nics();
    let mut fleet = Fleet::new(s.cluster.clone(), need + s.control.spares, &s.profiles)?;
    let mut lc = LocalCluster::launch(&fleet, need, s.control.rules.clone(), s.control.diag.clone(), 0.0)?;
    lc.durations = s.control.durations.clone();
    let base_resume = s.control.durations.resume;

    let roster0 = lc.driver.pool().roster.clone();
    let mut armed: Vec<Armed> = s
        .faults
        .iter()
        .map(|f| {
            let slot = fault_slot(f, &job.topo);
            Armed { spec: f.clone(), slot, node: roster0[slot], consumed: false }
        })
        .collect();

    let stall = s.checkpoint.partition_bytes / s.cluster.pcie_bw;
    let interval = s.checkpoint.interval;
    let mut ckpts = CheckpointLog::default();
    let mut all_ckpts: Vec<CheckpointMeta> = Vec::new();
    let mut spans: Vec<Span> = Vec::new();
    let mut segments = Vec::new();
    let mut recoveries: Vec<RecoveryRecord> = Vec::new();
    let mut iter_times: Vec<f64> = Vec::new();
    let mut t = 0.0;
    let mut step = 0usize;

    let outcome = loop {
        let roster = lc.driver.pool().roster.clone();
        let faults: Vec<FaultSpec> = armed
            .iter()
            .filter(|a| !a.consumed && roster[a.slot] == a.node)
            .map(|a| a.spec.clone())
            .collect();
        let mut stalls = BTreeMap::new();
        if interval > 0 && stall > 0.0 {
            for k in (step + 1)..s.steps {
                if k % interval == 0 {
                    stalls.insert(k, stall);
                }
            }
        }
        let mut cfg = SimConfig {
            steps: s.steps - step,
            seed: s.seed,
            start_time: t,
            first_step: step,
            nccl_timeout: s.sim.nccl_timeout,
            retransmit_timeout: s.sim.retransmit_timeout,
            suspend_at: None,
            stall_before_step: stalls,
            record_traffic: true,
        };
        let res = job.simulate(&fleet, &roster, &faults, &cfg);
        let mut seg = Segment {
            start_time: t,
            first_step: step,
            steps_completed: res.completed_steps(),
            end_time: res.end_time,
            status: res.status,
            failure: res.failures.first().cloned(),
            suspended_at: None,
            roster: roster.clone(),
        };

        if res.status == RunStatus::Completed || !s.control.recover {
            record_checkpoints(&job, &res, step, interval, &mut ckpts, &mut all_ckpts);
            iter_times.extend(&res.iteration_times);
            spans.extend(res.spans);
            segments.push(seg);
            break match res.status {
                RunStatus::Completed => Outcome::Completed,
                RunStatus::TimeoutAbort => Outcome::TimeoutAbort,
                RunStatus::Crashed => Outcome::Crashed,
            };
        }
        let failure = res.failures[0].clone();
        let fired = armed
            .iter()
            .position(|a| {
                !a.consumed
                    && roster[a.slot] == a.node
                    && matches!(
                        (a.spec.kind, failure.kind),
                        (FaultKind::Crash | FaultKind::EccErrorLog, FailureKind::Crash)
                            | (FaultKind::Hang, FailureKind::Hang)
                            | (FaultKind::LinkFlap, FailureKind::CommError)
                    )
                    && a.slot == job.topo.node_of(failure.rank)
            });
        let machine_down = fired.is_some_and(|i| armed[i].spec.params.machine_down);
        let fail_slot = job.topo.node_of(failure.rank);
        let fail_node = roster[fail_slot];
        let local_gpu = job.topo.coords[failure.rank].local_gpu;
        if fired.is_some_and(|i| armed[i].spec.kind == FaultKind::EccErrorLog) {
            if let Some(p) = fleet.profile_mut(fail_node) {
                p.failed_gpus = vec![local_gpu];
            }
        }

        // heartbeats from the segment's telemetry until the driver reacts
        let end = res.end_time;
        let mut tb = (t / HEARTBEAT_INTERVAL).floor() * HEARTBEAT_INTERVAL;
        let mut reported_exit = false;
        while lc.driver.phase() == RecoveryPhase::Running {
            tb += HEARTBEAT_INTERVAL;
            if machine_down && tb > failure.time {
                lc.dead.insert(fail_node);
            }
            let exited = tb > end;
            let first_exit = exited && !reported_exit;
            lc.beat(tb, |n, _| {
                let slot = roster.iter().position(|&r| r == n)?;
                let bytes = bytes_in_window(&res.traffic, slot, tb - HEARTBEAT_INTERVAL, tb);
                let live = if tb <= failure.time { s.control.baseline_traffic_bps } else { 0.0 };
                let bps = bytes / HEARTBEAT_INTERVAL + live;
                let mut tel = Telemetry { gpu_status: vec![ProcStatus::Running; gpus], logs: vec![], rdma_bps: vec![bps / nics as f64; nics] };
                if exited {
                    match res.status {
                        RunStatus::Crashed if slot == fail_slot => {
                            let code = fired.and_then(|i| armed[i].spec.params.exit_code).unwrap_or(1);
                            tel.gpu_status[local_gpu] = ProcStatus::Exited(code);
                            if first_exit {
                                tel.logs.push(failure.detail.clone());
                            }
                        }
                        RunStatus::Crashed => {}
                        _ => {
                            tel.gpu_status = vec![ProcStatus::Exited(1); gpus];
                            if first_exit {
                                tel.logs.push("NCCL watchdog: collective operation timeout, aborting".into());
                            }
                        }
                    }
                }
                Some(tel)
            });
            reported_exit |= exited;
            lc.tick(tb);
            if tb > end + 100.0 * HEARTBEAT_INTERVAL {
                return Err(Error::InvalidConfig(format!("failure at t={} was never detected", failure.time)));
            }
        }
        let m = lc.driver.machine();
        let trace_start = m.trace.len() - 1;
        let detected_at = m.trace[trace_start].at;
        let trigger = m.trigger.clone().expect("recovery has a trigger");

        // the job was suspended at detection: replay up to that instant so
        // blocked ranks log what they were waiting on
        let seg_res = if detected_at < end {
            cfg.suspend_at = Some(detected_at);
            seg.suspended_at = Some(detected_at);
            let r = job.simulate(&fleet, &roster, &faults, &cfg);
            seg.end_time = r.end_time;
            seg.steps_completed = r.completed_steps();
            r
        } else {
            res
        };
        let hang = if seg_res.spans.iter().any(|x| x.status == SpanStatus::Timeout) {
            let rep = pinpoint_hang(&seg_res.spans, &job.topo, seg_res.status)?;
            for &slot in &rep.nodes {
                lc.driver.add_evidence(roster[slot], Evidence::Silent { source: "timeout logs".into() })?;
            }
            Some(rep)
        } else {
            None
        };
        record_checkpoints(&job, &seg_res, step, interval, &mut ckpts, &mut all_ckpts);
        iter_times.extend(&seg_res.iteration_times);
        spans.extend(seg_res.spans);
        segments.push(seg);

        if machine_down {
            ckpts.node_lost(failure.time);
        }
        ckpts.advance(detected_at);
        let resume = match ckpts.latest_durable() {
            Some(meta) => {
                let plan = recover(meta, &job.topo, &s.cluster, s.control.designated_reader)?;
                ResumeInfo {
                    checkpoint_id: Some(meta.ckpt_id),
                    state_id: Some(plan.state_id.clone()),
                    step: meta.ckpt_id as usize,
                    load_time: plan.duration,
                    store_bytes_read: plan.store_bytes_read,
                }
            }
            None => ResumeInfo { checkpoint_id: None, state_id: None, step: 0, load_time: 0.0, store_bytes_read: 0.0 },
        };
        lc.driver.set_resume_point(ResumePoint {
            checkpoint_id: resume.checkpoint_id,
            state_id: resume.state_id.clone(),
            step: resume.step,
        });
        lc.durations.resume = base_resume + resume.load_time;
        let rep = lc.pump(&fleet, detected_at);

        // consume one-shot faults whose onset the interrupted run reached
        let reached_step = step + segments.last().unwrap().steps_completed;
        for a in armed.iter_mut().filter(|a| one_shot(a.spec.kind) && !a.consumed) {
            a.consumed = a.spec.onset.reached(failure.time.max(detected_at), reached_step);
        }
        if let Some(i) = fired {
            armed[i].consumed = true;
        }
        let m = lc.driver.machine();
        let cycle = m.trace[trace_start..].to_vec();
        let done = m.phase == RecoveryPhase::Running;
        let resumed_state_ok = done
            && lc.driver.pool().roster.iter().all(|n| {
                let e = &lc.executors[n];
                e.state == crate::control::ExecState::Running
                    && e.checkpoint_id == resume.checkpoint_id
                    && e.step == resume.step
            });
        recoveries.push(RecoveryRecord {
            failure,
            detected_at,
            rule: trigger.rule,
            reason: trigger.reason,
            hang,
            evicted: m.evidence.keys().copied().filter(|n| !lc.driver.pool().contains(*n)).collect(),
            evidence: m.evidence.clone(),
            resume: resume.clone(),
            resumed_at: done.then_some(rep.end),
            trace_valid: trace_is_valid(&cycle),
            trace: cycle,
            resumed_state_ok,
        });
        if !done || recoveries.len() >= s.control.max_recoveries {
            break Outcome::RecoveryStuck;
        }
        ckpts.metas.retain(|c| c.ckpt_id as usize <= resume.step);
        t = rep.end;
        step = resume.step;
    };

    let last = segments.last().expect("at least one segment");
    let elapsed = match outcome {
        Outcome::RecoveryStuck => lc.driver.status().at.max(last.end_time),
        _ => last.end_time,
    };
    let steps_completed = if outcome == Outcome::Completed { s.steps } else { last.first_step + last.steps_completed };
    let iteration_time = median(&iter_times);
    let effective_time_rate = if elapsed > 0.0 { steps_completed as f64 * iteration_time / elapsed } else { 0.0 };
    ckpts.advance(elapsed);
    for c in &mut all_ckpts {
        if let Some(now) = ckpts.metas.iter().find(|m| m.ckpt_id == c.ckpt_id && m.stage1_done_at == c.stage1_done_at) {
            c.durability = now.durability;
        }
    }
    let summary = RunSummary {
        name: s.name.clone(),
        seed: s.seed,
        outcome,
        exit_code: outcome.exit_code(),
        steps: s.steps,
        steps_completed,
        elapsed,
        iteration_time,
        effective_time_rate,
        segments,
        recoveries,
        checkpoints: all_ckpts,
        final_roster: lc.driver.pool().roster.clone(),
        data_pipeline,
    };
    Ok(RunArtifacts {
        summary,
        spans,
        trace: lc.driver.machine().trace.clone(),
        events: lc.driver.drain_events(),
    })
}

/// Logs a checkpoint after every completed `interval`-th iteration.
fn record_checkpoints(
    job: &Job,
    res: &SimResult,
    first: usize,
    interval: usize,
    log: &mut CheckpointLog,
    all: &mut Vec<CheckpointMeta>,
) {
    if interval == 0 {
        return;
    }
    for (i, &end) in res.step_end.iter().enumerate() {
        let k = first + i + 1;
        if k % interval == 0 && k < job.s.steps {
            let (meta, _) = checkpoint(k as u64, end, job.s.checkpoint.partition_bytes, &job.s.cluster, &job.topo);
            log.push(meta.clone());
            all.push(meta);
        }
    }
}

pub const SPAN_LOG: &str = "spans.jsonl";
pub const SUMMARY: &str = "run.json";
pub const RECOVERY_TRACE: &str = "recovery_trace.json";
pub const SCENARIO_COPY: &str = "scenario.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryTrace {
    pub transitions: Vec<Transition>,
    pub events: Vec<ControlEvent>,
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v).map_err(|e| Error::Io(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

/// Writes the span log, run summary, recovery trace, checkpoint store and
/// a normalized copy of the scenario under `dir`.
pub fn write_artifacts(dir: &Path, s: &Scenario, a: &RunArtifacts) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let f = std::io::BufWriter::new(std::fs::File::create(dir.join(SPAN_LOG))?);
    sim::write_jsonl(f, &a.spans)?;
    std::fs::write(dir.join(SUMMARY), to_json(&a.summary)?)?;
    std::fs::write(
        dir.join(RECOVERY_TRACE),
        to_json(&RecoveryTrace { transitions: a.trace.clone(), events: a.events.clone() })?,
    )?;
    std::fs::write(dir.join(SCENARIO_COPY), to_json(s)?)?;
    let store = CheckpointStore::new(dir.join(CHECKPOINT_DIR));
    for m in &a.summary.checkpoints {
        store.write(m)?;
    }
    Ok(())
}

/// Loads what `write_artifacts` produced.
pub fn load_artifacts(dir: &Path) -> Result<(Scenario, RunSummary, Vec<Span>)> {
    let need = |name: &str| {
        let p = dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::Io(format!("missing artifact {}", p.display())))
        }
    };
    let scenario = Scenario::load(&need(SCENARIO_COPY)?)?;
    let path = need(SUMMARY)?;
    let summary: RunSummary = serde_json::from_str(&std::fs::read_to_string(&path)?)
        .map_err(|e| Error::Parse { path: path.display().to_string(), msg: e.to_string() })?;
    let f = std::io::BufReader::new(std::fs::File::open(need(SPAN_LOG)?)?);
    let (spans, bad) = sim::read_jsonl(f)?;
    if bad > 0 {
        return Err(Error::Parse { path: dir.join(SPAN_LOG).display().to_string(), msg: format!("{bad} malformed lines") });
    }
    Ok((scenario, summary, spans))
}
