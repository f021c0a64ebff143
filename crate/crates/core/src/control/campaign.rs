//! Long fault campaigns: training progress is advanced analytically at the
//! fault-free iteration time while every fault goes through the real
//! detector, driver, self-checks and spare pool.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::executor::Telemetry;
use super::heartbeat::{AnomalyRule, ProcStatus, RuleKind, HEARTBEAT_INTERVAL};
use super::local::{LocalCluster, PhaseDurations};
use super::recovery::{trace_is_valid, RecoveryPhase};
use crate::cluster::{ClusterSpec, Fleet};
use crate::diagnostics::DiagConfig;
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

/// Completed iterations times the fault-free iteration time, over elapsed
/// time.
pub fn effective_time_rate(iterations: usize, iteration_time: f64, elapsed: f64) -> Result<f64> {
    if !(elapsed > 0.0) {
        return Err(Error::ZeroElapsed);
    }
    Ok(iterations as f64 * iteration_time / elapsed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CampaignFault {
    /// GPU stops making progress; the job's traffic drops to zero.
    Hang,
    /// Uncorrectable memory error kills one GPU's process.
    EccCrash,
    /// Whole machine goes dark.
    MachineDown,
    /// NIC degrades until collectives fail.
    NcclLinkError,
    /// Process crash with healthy hardware.
    SoftwareCrash,
}

impl CampaignFault {
    pub const ALL: [CampaignFault; 5] = [
        CampaignFault::Hang,
        CampaignFault::EccCrash,
        CampaignFault::MachineDown,
        CampaignFault::NcclLinkError,
        CampaignFault::SoftwareCrash,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub cluster: ClusterSpec,
    pub spares: usize,
    /// Fault-free iteration time, e.g. measured by the simulator.
    pub iteration_time: f64,
    pub duration: f64,
    pub faults: usize,
    pub checkpoint_interval: usize,
    /// Training-blocking part of a checkpoint.
    pub checkpoint_stall: f64,
    /// Background upload after which a checkpoint is durable.
    pub checkpoint_upload: f64,
    /// Process restart plus checkpoint load.
    pub resume_time: f64,
    pub repair_time: f64,
    /// Per-node RDMA rate while training.
    pub traffic_bps: f64,
    pub durations: PhaseDurations,
    pub diag: DiagConfig,
    pub rules: Vec<AnomalyRule>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub kind: CampaignFault,
    pub node: usize,
    pub at: f64,
    pub step: usize,
    pub detected_at: f64,
    pub rule: Option<RuleKind>,
    /// When the eviction decision was made.
    pub diagnosed_at: f64,
    pub resumed_at: f64,
    pub evicted: Vec<usize>,
    pub resume_step: usize,
    /// Restart plus recomputation of the iterations lost since the
    /// checkpoint.
    pub catch_up: f64,
    pub trace_ok: bool,
}

impl FaultRecord {
    pub fn detection_and_diagnosis(&self) -> f64 {
        self.diagnosed_at - self.at
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub records: Vec<FaultRecord>,
    pub iterations: usize,
    pub elapsed: f64,
    pub iteration_time: f64,
    pub effective_time_rate: f64,
    pub resumes: usize,
    pub checkpoint_stall_total: f64,
    pub max_detection_and_diagnosis: f64,
    pub max_catch_up: f64,
    pub final_roster: Vec<usize>,
}

/// Training clock: steps advance at the iteration time, with a checkpoint
/// stall every `interval` steps.
struct Trainer {
    t: f64,
    step: usize,
    iter: f64,
    interval: usize,
    stall: f64,
    upload: f64,
    /// (step, time it became durable)
    durable: Vec<(usize, f64)>,
    stall_total: f64,
}

impl Trainer {
    fn run_until(&mut self, until: f64) {
        while self.t + self.iter <= until {
            self.t += self.iter;
            self.step += 1;
            if self.interval > 0 && self.step % self.interval == 0 {
                self.t += self.stall;
                self.stall_total += self.stall;
                self.durable.push((self.step, self.t + self.upload));
                if self.durable.len() > 4 {
                    self.durable.remove(0);
                }
            }
        }
    }

    fn latest_durable(&self, at: f64) -> usize {
        self.durable.iter().rev().find(|(_, d)| *d <= at).map_or(0, |(s, _)| *s)
    }
}

pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignReport> {
    if !(cfg.iteration_time > 0.0 && cfg.duration > 0.0) {
        return Err(Error::InvalidConfig("iteration_time and duration must be > 0".into()));
    }
    let need = cfg.cluster.num_nodes;
    let mut fleet = Fleet::new(cfg.cluster.clone(), need + cfg.spares, &[])?;
    let mut lc = LocalCluster::launch(&fleet, need, cfg.rules.clone(), cfg.diag.clone(), 0.0)?;
    lc.durations = PhaseDurations { resume: cfg.resume_time, ..cfg.durations.clone() };
    let gpus = cfg.cluster.gpus_per_node;
    let nics = cfg.cluster.nics();

    let mut rng = keyed_rng(cfg.seed, &[0xca4a]);
    let mut times: Vec<f64> = (0..cfg.faults).map(|_| rng.random_range(0.05..0.98) * cfg.duration).collect();
    times.sort_by(f64::total_cmp);

    let mut tr = Trainer {
        t: 0.0,
        step: 0,
        iter: cfg.iteration_time,
        interval: cfg.checkpoint_interval,
        stall: cfg.checkpoint_stall,
        upload: cfg.checkpoint_upload,
        durable: Vec::new(),
        stall_total: 0.0,
    };
    let mut repairs: Vec<(f64, usize)> = Vec::new();
    let mut records = Vec::new();
    let healthy = || Telemetry { gpu_status: vec![ProcStatus::Running; gpus], logs: vec![], rdma_bps: vec![cfg.traffic_bps / nics as f64; nics] };

    for (i, &planned) in times.iter().enumerate() {
        let at = planned.max(tr.t + cfg.iteration_time);
        if at >= cfg.duration {
            break;
        }
        // repaired nodes rejoin as spares
        repairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        while let Some(&(ready, node)) = repairs.first().filter(|r| r.0 <= at) {
            repairs.remove(0);
            fleet.repair(node);
            lc.rejoin(node, gpus, ready);
        }
        tr.run_until(at);
        let step_at_fault = tr.step;
        let kind = *CampaignFault::ALL.choose(&mut rng).unwrap();
        let slot = rng.random_range(0..need);
        let node = lc.driver.pool().roster[slot];
        let gpu = rng.random_range(0..gpus);
        {
            let p = fleet.profile_mut(node).expect("roster node exists");
            match kind {
                CampaignFault::Hang => p.hang_prob = 1.0,
                CampaignFault::EccCrash => p.failed_gpus = vec![gpu],
                CampaignFault::NcclLinkError => p.link_degradations[0] = 0.1,
                CampaignFault::MachineDown | CampaignFault::SoftwareCrash => {}
            }
        }
        if kind == CampaignFault::MachineDown {
            lc.dead.insert(node);
        }

        // beat on the global grid, starting a few beats before the fault
        let mut tb = ((at / HEARTBEAT_INTERVAL).floor() - 3.0).max(0.0) * HEARTBEAT_INTERVAL;
        let mut reported = false;
        while lc.driver.phase() == RecoveryPhase::Running {
            tb += HEARTBEAT_INTERVAL;
            let failed = tb >= at;
            lc.beat(tb, |n, _| {
                if !failed {
                    return Some(healthy());
                }
                let mut t = Telemetry { gpu_status: vec![ProcStatus::Running; gpus], logs: vec![], rdma_bps: vec![0.0; nics] };
                if n == node && !reported {
                    match kind {
                        CampaignFault::EccCrash => {
                            t.gpu_status[gpu] = ProcStatus::Exited(1);
                            t.logs.push("CUDA error: uncorrectable ECC error encountered".into());
                        }
                        CampaignFault::NcclLinkError => {
                            t.gpu_status[gpu] = ProcStatus::Exited(1);
                            t.logs.push("NCCL error: remote process exited or there was a network error".into());
                        }
                        CampaignFault::SoftwareCrash => t.gpu_status[gpu] = ProcStatus::Exited(1),
                        CampaignFault::Hang | CampaignFault::MachineDown => {}
                    }
                }
                Some(t)
            });
            reported |= failed;
            lc.tick(tb);
            if tb > at + 3600.0 {
                return Err(Error::InvalidConfig(format!("fault {i} ({kind:?}) was never detected")));
            }
        }
        let trace_start = lc.driver.machine().trace.len() - 1;
        let detected_at = lc.driver.machine().trace[trace_start].at;
        let rule = lc.driver.machine().trigger.as_ref().and_then(|t| t.rule);
        let resume_step = tr.latest_durable(at);
        lc.driver.set_resume_point(super::driver::ResumePoint {
            checkpoint_id: Some(resume_step as u64),
            state_id: Some(format!("state-{resume_step:08}")),
            step: resume_step,
        });
        let mut pumped = lc.pump(&fleet, detected_at);
        while lc.driver.phase() != RecoveryPhase::Running {
            // stuck waiting for capacity: the next repair unblocks it
            repairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            if repairs.is_empty() {
                return Err(Error::Shortage { need: 1, have: 0, deficit: 1 });
            }
            let (ready, n) = repairs.remove(0);
            let now = ready.max(pumped.end);
            fleet.repair(n);
            lc.rejoin(n, gpus, now);
            pumped = lc.pump(&fleet, now);
        }
        let m = lc.driver.machine();
        let cycle = &m.trace[trace_start..];
        let diagnosed_at = cycle.iter().find(|t| t.to == RecoveryPhase::Evicting).map_or(detected_at, |t| t.at);
        let resuming_at = cycle.iter().find(|t| t.to == RecoveryPhase::Resuming).map_or(pumped.end, |t| t.at);
        let evicted: Vec<usize> = m.evidence.keys().copied().collect();
        for &n in &evicted {
            repairs.push((diagnosed_at + cfg.repair_time, n));
            lc.dead.remove(&n);
        }
        let lost = step_at_fault - resume_step;
        records.push(FaultRecord {
            kind,
            node,
            at,
            step: step_at_fault,
            detected_at,
            rule,
            diagnosed_at,
            resumed_at: pumped.end,
            evicted,
            resume_step,
            catch_up: (pumped.end - resuming_at) + lost as f64 * cfg.iteration_time,
            trace_ok: trace_is_valid(cycle) && cycle.last().map(|t| t.to) == Some(RecoveryPhase::Running),
        });
        tr.t = pumped.end;
        tr.step = resume_step;
        tr.durable.retain(|(s, _)| *s <= resume_step);
    }
    tr.run_until(cfg.duration);
    let elapsed = cfg.duration;
    let rate = effective_time_rate(tr.step, cfg.iteration_time, elapsed)?;
    Ok(CampaignReport {
        resumes: records.iter().filter(|r| r.trace_ok).count(),
        max_detection_and_diagnosis: records.iter().map(FaultRecord::detection_and_diagnosis).fold(0.0, f64::max),
        max_catch_up: records.iter().map(|r| r.catch_up).fold(0.0, f64::max),
        records,
        iterations: tr.step,
        elapsed,
        iteration_time: cfg.iteration_time,
        effective_time_rate: rate,
        checkpoint_stall_total: tr.stall_total,
        final_roster: lc.driver.pool().roster.clone(),
    })
}
