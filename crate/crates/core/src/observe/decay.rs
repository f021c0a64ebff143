use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::{ols, SpanTable};
use crate::cluster::{Dim, Topology};
use crate::error::{Error, Result};
use crate::schedule::EventKind;
use crate::sim::SpanStatus;

/// Minimum number of steps for a trend fit.
pub const MIN_STEPS: usize = 20;
/// Trend threshold as a fraction of the base value, per step.
pub const TREND_FRACTION: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribution {
    None,
    ReduceScatterSkew,
    Compute,
    /// Iteration time grows but neither compute nor launch skew explain it.
    Unexplained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrend {
    pub kind: EventKind,
    /// Per step: the largest per-rank total time spent in this phase.
    pub per_step: Vec<f64>,
    pub mean: f64,
    pub base: f64,
    pub slope: f64,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub steps: Vec<usize>,
    pub iteration_times: Vec<f64>,
    pub iteration_base: f64,
    pub iteration_slope: f64,
    pub phases: Vec<PhaseTrend>,
    /// Per step: largest gap between a rank's reduce-scatter launch and the
    /// earliest launch of the same collective in its data-parallel group.
    pub rs_skew: Vec<f64>,
    pub rs_skew_slope: f64,
    /// Median step-over-step change of the skew. A level shift leaves this
    /// near zero while a steady drift matches the regression slope.
    pub rs_skew_median_delta: f64,
    pub skew_trend: bool,
    /// Per rank: regression slope of its launch lag behind its group.
    pub rank_lag_slopes: Vec<f64>,
    pub lagging_rank: Option<usize>,
    pub attribution: Attribution,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

pub fn analyze_mfu_decay(table: &SpanTable, topo: &Topology) -> Result<DecayReport> {
    let steps = table.steps();
    if steps.len() < MIN_STEPS {
        return Err(Error::InsufficientSteps { need: MIN_STEPS, have: steps.len() });
    }
    let col: BTreeMap<usize, usize> = steps.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let n = steps.len();
    let nranks = topo.ranks();

    let mut first = vec![f64::INFINITY; n];
    let mut last = vec![f64::NEG_INFINITY; n];
    let mut phase_tot: BTreeMap<EventKind, Vec<Vec<f64>>> = [EventKind::Fwd, EventKind::Bwd, EventKind::Opt]
        .into_iter()
        .map(|k| (k, vec![vec![0.0; nranks]; n]))
        .collect();
    // (step col, dp group, chunk, piece) -> rank -> earliest launch
    let mut rs_launch: BTreeMap<(usize, usize, Option<u32>, Option<u32>), BTreeMap<usize, f64>> = BTreeMap::new();

    for s in table.spans() {
        if s.rank >= nranks {
            continue;
        }
        let c = col[&s.step];
        first[c] = first[c].min(s.t_start);
        last[c] = last[c].max(s.t_end);
        if s.status != SpanStatus::Ok {
            continue;
        }
        if let Some(rows) = phase_tot.get_mut(&s.kind) {
            rows[c][s.rank] += s.duration();
        }
        if s.kind == EventKind::Reducescatter {
            let g = topo.group_of(s.rank, Dim::Dp).index;
            let t = rs_launch.entry((c, g, s.chunk, s.piece)).or_default().entry(s.rank).or_insert(f64::INFINITY);
            *t = t.min(s.t_start);
        }
    }

    let xs: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
    // consecutive steps: end-to-end period; after a gap, the step's own span
    let iteration_times: Vec<f64> = (0..n)
        .map(|c| {
            if c > 0 && steps[c] == steps[c - 1] + 1 {
                last[c] - last[c - 1]
            } else {
                last[c] - first[c]
            }
        })
        .collect();
    let (iteration_slope, iteration_base) = ols(&xs, &iteration_times);
    // anchor the base at the first analysed step
    let iteration_base = iteration_base + iteration_slope * xs[0];

    let phases: Vec<PhaseTrend> = phase_tot
        .into_iter()
        .map(|(kind, rows)| {
            let per_step: Vec<f64> = rows.iter().map(|r| r.iter().copied().fold(0.0, f64::max)).collect();
            let mean = per_step.iter().sum::<f64>() / n as f64;
            let (slope, icpt) = ols(&xs, &per_step);
            let base = icpt + slope * xs[0];
            let stable = slope.abs() <= TREND_FRACTION * base.abs().max(f64::MIN_POSITIVE);
            PhaseTrend { kind, per_step, mean, base, slope, stable }
        })
        .collect();

    let mut rs_skew = vec![0.0; n];
    let mut lag: Vec<Vec<f64>> = vec![vec![0.0; n]; nranks];
    for ((c, _, _, _), launches) in &rs_launch {
        let lo = launches.values().copied().fold(f64::INFINITY, f64::min);
        for (&r, &t) in launches {
            let d = t - lo;
            rs_skew[*c] = f64::max(rs_skew[*c], d);
            lag[r][*c] = f64::max(lag[r][*c], d);
        }
    }
    let (rs_skew_slope, _) = ols(&xs, &rs_skew);
    let deltas: Vec<f64> = rs_skew.windows(2).zip(xs.windows(2)).map(|(y, x)| (y[1] - y[0]) / (x[1] - x[0])).collect();
    let rs_skew_median_delta = median(&deltas);
    let rank_lag_slopes: Vec<f64> = lag.iter().map(|l| ols(&xs, l).0).collect();

    let threshold = TREND_FRACTION * iteration_base;
    let skew_trend = !rs_launch.is_empty() && rs_skew_slope > threshold && rs_skew_median_delta > threshold;
    let lagging_rank = if skew_trend {
        rank_lag_slopes.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(r, _)| r)
    } else {
        None
    };
    let compute_stable = phases.iter().all(|p| p.stable);
    let attribution = if iteration_slope <= threshold {
        Attribution::None
    } else if !compute_stable {
        Attribution::Compute
    } else if skew_trend {
        Attribution::ReduceScatterSkew
    } else {
        Attribution::Unexplained
    };

    Ok(DecayReport {
        steps,
        iteration_times,
        iteration_base,
        iteration_slope,
        phases,
        rs_skew,
        rs_skew_slope,
        rs_skew_median_delta,
        skew_trend,
        rank_lag_slopes,
        lagging_rank,
        attribution,
    })
}
