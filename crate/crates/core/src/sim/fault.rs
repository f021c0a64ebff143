use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultKind {
    Straggler,
    Hang,
    Crash,
    LinkFlap,
    LaunchSkewDrift,
    EccErrorLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Node(usize),
    Rank(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Onset {
    /// Simulated seconds.
    Time(f64),
    /// Global iteration index.
    Step(usize),
}

impl Onset {
    pub fn reached(&self, t: f64, step: usize) -> bool {
        match *self {
            Onset::Time(o) => t >= o,
            Onset::Step(k) => step >= k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultParams {
    /// Compute slowdown for stragglers.
    pub factor: Option<f64>,
    /// Link down time for flaps, seconds.
    pub down_s: Option<f64>,
    /// Launch delay growth, seconds per iteration.
    pub growth: Option<f64>,
    /// Whole machine stops heartbeating (crash only).
    pub machine_down: bool,
    pub exit_code: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub target: Target,
    pub onset: Onset,
    #[serde(default)]
    pub params: FaultParams,
}

impl FaultSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("{:?} fault: {m}", self.kind)));
        match self.onset {
            Onset::Time(t) if !(t >= 0.0) => return bad("onset must be >= 0"),
            _ => {}
        }
        match self.kind {
            FaultKind::Straggler => {
                if !matches!(self.params.factor, Some(f) if f > 1.0) {
                    return bad("factor must be > 1");
                }
                if !matches!(self.target, Target::Node(_)) {
                    return bad("target must be a node");
                }
            }
            FaultKind::LinkFlap => {
                if !matches!(self.params.down_s, Some(d) if d > 0.0) {
                    return bad("down_s must be > 0");
                }
                if !matches!(self.onset, Onset::Time(_)) {
                    return bad("onset must be a time");
                }
                if !matches!(self.target, Target::Node(_)) {
                    return bad("target must be a node");
                }
            }
            FaultKind::LaunchSkewDrift => {
                if !matches!(self.params.growth, Some(g) if g >= 0.0) {
                    return bad("growth must be >= 0");
                }
                if !matches!(self.target, Target::Rank(_)) {
                    return bad("target must be a rank");
                }
            }
            FaultKind::Hang => {
                if !matches!(self.target, Target::Rank(_)) {
                    return bad("target must be a rank");
                }
            }
            FaultKind::Crash | FaultKind::EccErrorLog => {}
        }
        Ok(())
    }

    pub fn straggler(node: usize, factor: f64) -> Self {
        FaultSpec {
            kind: FaultKind::Straggler,
            target: Target::Node(node),
            onset: Onset::Time(0.0),
            params: FaultParams {
                factor: Some(factor),
                ..FaultParams::default()
            },
        }
    }

    pub fn hang(rank: usize, onset: Onset) -> Self {
        FaultSpec {
            kind: FaultKind::Hang,
            target: Target::Rank(rank),
            onset,
            params: FaultParams::default(),
        }
    }

    pub fn flap(node: usize, at: f64, down_s: f64) -> Self {
        FaultSpec {
            kind: FaultKind::LinkFlap,
            target: Target::Node(node),
            onset: Onset::Time(at),
            params: FaultParams {
                down_s: Some(down_s),
                ..FaultParams::default()
            },
        }
    }

    pub fn skew(rank: usize, onset_step: usize, growth: f64) -> Self {
        FaultSpec {
            kind: FaultKind::LaunchSkewDrift,
            target: Target::Rank(rank),
            onset: Onset::Step(onset_step),
            params: FaultParams {
                growth: Some(growth),
                ..FaultParams::default()
            },
        }
    }

    pub fn crash(target: Target, onset: Onset) -> Self {
        FaultSpec {
            kind: FaultKind::Crash,
            target,
            onset,
            params: FaultParams::default(),
        }
    }
}

/// Outcome of a communication op that overlaps link outages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlapOutcome {
    /// Finishes late by this many seconds.
    Delayed(f64),
    /// Fails at this absolute time.
    Failed(f64),
}

/// An op running over `[start, start + dur)` stalls for the part of each
/// outage that overlaps it. An outage longer than the retransmit timeout
/// fails the op instead.
pub fn inject_flap(start: f64, dur: f64, outages: &[(f64, f64)], retransmit_timeout: f64) -> FlapOutcome {
    let mut end = start + dur;
    let mut extra = 0.0;
    let mut sorted: Vec<(f64, f64)> = outages.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (on, down) in sorted {
        let in_flight = on < end && on + down > start;
        // zero-length ops still notice an outage they start inside of
        let inside = dur == 0.0 && start >= on && start < on + down;
        if !(in_flight || inside) {
            continue;
        }
        let stall = (on + down) - start.max(on);
        if stall > retransmit_timeout {
            return FlapOutcome::Failed(start.max(on) + retransmit_timeout);
        }
        end += stall;
        extra += stall;
    }
    FlapOutcome::Delayed(extra)
}
