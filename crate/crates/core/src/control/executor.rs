use serde::{Deserialize, Serialize};

use super::heartbeat::{Heartbeat, ProcStatus};
use super::wire::{ExecState, Message};
use crate::diagnostics::DiagReport;

/// What a node reports about its training processes in one beat.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub gpu_status: Vec<ProcStatus>,
    pub logs: Vec<String>,
    pub rdma_bps: Vec<f64>,
}

/// One per node. Reacts to driver commands; self-checks are delegated to
/// the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct Executor {
    pub node_id: usize,
    pub executor_id: String,
    pub gpus: usize,
    pub state: ExecState,
    pub slot: Option<usize>,
    pub step: usize,
    pub checkpoint_id: Option<u64>,
    last_sent: f64,
}

impl Executor {
    pub fn new(node_id: usize, gpus: usize, state: ExecState) -> Self {
        Executor {
            node_id,
            executor_id: format!("executor-{node_id}"),
            gpus,
            state,
            slot: None,
            step: 0,
            checkpoint_id: None,
            last_sent: f64::NEG_INFINITY,
        }
    }

    pub fn hello(&self) -> Message {
        Message::Hello {
            executor_id: self.executor_id.clone(),
            node_id: self.node_id,
            ip: format!("10.{}.{}.{}", self.node_id >> 16 & 255, self.node_id >> 8 & 255, self.node_id & 255),
            pod_name: format!("trainer-{}", self.node_id),
            gpus: self.gpus,
        }
    }

    /// Builds a beat; `sent_at` is forced to increase.
    pub fn heartbeat(&mut self, now: f64, t: Telemetry) -> Message {
        let sent_at = if now > self.last_sent { now } else { self.last_sent + 1e-6 };
        self.last_sent = sent_at;
        let gpu_status = if t.gpu_status.is_empty() {
            let s = if self.state == ExecState::Running { ProcStatus::Running } else { ProcStatus::Unknown };
            vec![s; self.gpus]
        } else {
            t.gpu_status
        };
        let Message::Hello { ip, pod_name, .. } = self.hello() else { unreachable!() };
        Message::Heartbeat(
            Heartbeat {
                executor_id: self.executor_id.clone(),
                node_id: self.node_id,
                ip,
                pod_name,
                hardware: format!("{} GPUs", self.gpus),
                gpu_status,
                logs: t.logs,
                rdma_bps: t.rdma_bps,
                sent_at,
            }
            .bound(),
        )
    }

    pub fn handle(&mut self, msg: &Message, diagnose: &mut dyn FnMut(usize) -> DiagReport) -> Vec<Message> {
        let status = |s: &Executor| Message::Status { node_id: s.node_id, state: s.state, step: Some(s.step) };
        match msg {
            Message::Suspend { .. } if self.state != ExecState::Evicted => {
                self.state = ExecState::Suspended;
                vec![status(self)]
            }
            Message::RunDiagnostics { .. } if self.state != ExecState::Evicted => {
                vec![Message::DiagReport { report: diagnose(self.node_id) }]
            }
            Message::Evict { node_id, .. } if *node_id == self.node_id => {
                self.state = ExecState::Evicted;
                self.slot = None;
                vec![status(self)]
            }
            Message::Resume { checkpoint_id, step, slot, .. } if self.state != ExecState::Evicted => {
                self.state = ExecState::Running;
                self.slot = Some(*slot);
                self.step = *step;
                self.checkpoint_id = *checkpoint_id;
                vec![status(self)]
            }
            _ => Vec::new(),
        }
    }
}
