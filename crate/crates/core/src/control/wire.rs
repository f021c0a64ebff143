//! Driver/executor messages and their framing: a 4-byte big-endian length
//! followed by one JSON object tagged by `type`.

use serde::{Deserialize, Serialize};
use std::io::{ErrorKind, Read, Write};

use super::heartbeat::Heartbeat;
use crate::diagnostics::DiagReport;
use crate::error::{Error, Result};

pub const MAX_FRAME: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecState {
    Idle,
    Running,
    Suspended,
    Evicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    /// Executor introduces itself after connecting.
    Hello { executor_id: String, node_id: usize, ip: String, pod_name: String, gpus: usize },
    Heartbeat(Heartbeat),
    /// Driver: stop training and report SUSPENDED.
    Suspend { reason: String },
    /// Driver: run the self-check suite and answer with DIAG_REPORT.
    RunDiagnostics { round: u64 },
    DiagReport { report: DiagReport },
    /// Driver: leave the job.
    Evict { node_id: usize, reason: String },
    /// Driver: restart training from a checkpoint in the given slot.
    Resume {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        checkpoint_id: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        state_id: Option<String>,
        step: usize,
        slot: usize,
    },
    /// Executor state report; also the acknowledgement of SUSPEND, EVICT and
    /// RESUME.
    Status {
        node_id: usize,
        state: ExecState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        step: Option<usize>,
    },
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "HELLO",
            Message::Heartbeat(_) => "HEARTBEAT",
            Message::Suspend { .. } => "SUSPEND",
            Message::RunDiagnostics { .. } => "RUN_DIAGNOSTICS",
            Message::DiagReport { .. } => "DIAG_REPORT",
            Message::Evict { .. } => "EVICT",
            Message::Resume { .. } => "RESUME",
            Message::Status { .. } => "STATUS",
        }
    }
}

pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    let body = serde_json::to_vec(msg).map_err(|e| Error::Io(e.to_string()))?;
    if body.len() > MAX_FRAME {
        return Err(Error::Io(format!("frame of {} bytes exceeds {MAX_FRAME}", body.len())));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> Result<()> {
    w.write_all(&encode(msg)?)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `None` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Message>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(Error::Io(format!("frame of {n} bytes exceeds {MAX_FRAME}")));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body)?;
    serde_json::from_slice(&body)
        .map(Some)
        .map_err(|e| Error::Parse { path: "frame".into(), msg: e.to_string() })
}
