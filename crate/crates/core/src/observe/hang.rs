use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::cluster::Topology;
use crate::error::{Error, Result};
use crate::sim::{RunStatus, Span, SpanStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HangReport {
    /// Ranks others were waiting on that logged nothing themselves.
    pub silent_ranks: BTreeSet<usize>,
    pub nodes: BTreeSet<usize>,
    pub loggers: BTreeSet<usize>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

/// Finds hung ranks: every rank that timed out logged its pending op and
/// the peers it awaited; hung ranks are awaited but never log.
pub fn pinpoint_hang<'a>(
    spans: impl IntoIterator<Item = &'a Span>,
    topo: &Topology,
    status: RunStatus,
) -> Result<HangReport> {
    let timeouts: Vec<&Span> = spans.into_iter().filter(|s| s.status == SpanStatus::Timeout).collect();
    if timeouts.is_empty() {
        if status == RunStatus::Crashed {
            return Ok(HangReport {
                silent_ranks: BTreeSet::new(),
                nodes: BTreeSet::new(),
                loggers: BTreeSet::new(),
                note: "run crashed; processes exited without timeout logs, so there is no hang to localize".into(),
            });
        }
        return Err(Error::NoTimeoutLogs);
    }
    let loggers: BTreeSet<usize> = timeouts.iter().map(|s| s.rank).collect();
    let silent_ranks: BTreeSet<usize> = timeouts
        .iter()
        .flat_map(|s| s.peers.iter().copied())
        .filter(|p| !loggers.contains(p))
        .collect();
    let nodes = silent_ranks.iter().filter(|&&r| r < topo.coords.len()).map(|&r| topo.node_of(r)).collect();
    let note = if silent_ranks.is_empty() {
        "every awaited rank logged a timeout; no silent rank".into()
    } else {
        String::new()
    };
    Ok(HangReport { silent_ranks, nodes, loggers, note })
}
