use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::schedule::EventKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SpanStatus {
    Ok,
    Timeout,
    /// Communication failed outright, e.g. a link stayed down past the
    /// retransmit timeout.
    Error,
}

/// One executed event. Ops stuck on a hung GPU produce no span at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub step: usize,
    pub rank: usize,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mb: Option<u32>,
    pub t_start: f64,
    pub t_end: f64,
    pub status: SpanStatus,
    /// Template event id within the iteration graph.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eid: Option<usize>,
    /// Ranks this op was still waiting on when it timed out.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub peers: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub piece: Option<u32>,
}

impl Span {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

pub fn write_jsonl<W: Write>(mut w: W, spans: &[Span]) -> Result<()> {
    for s in spans {
        serde_json::to_writer(&mut w, s).map_err(|e| Error::Io(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a span log, returning the spans and the number of lines that did
/// not parse.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<(Vec<Span>, usize)> {
    let mut spans = Vec::new();
    let mut bad = 0;
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Span>(&line) {
            Ok(s) => spans.push(s),
            Err(_) => bad += 1,
        }
    }
    Ok((spans, bad))
}
