use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use super::SpanTable;
use crate::cluster::Topology;
use crate::error::{Error, Result};
use crate::schedule::EventKind;
use crate::sim::SpanStatus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatDim {
    Rank,
    Node,
    DpIdx,
    PpIdx,
    TpIdx,
}

impl FromStr for HeatDim {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rank" => HeatDim::Rank,
            "node" => HeatDim::Node,
            "dp_idx" | "dp" => HeatDim::DpIdx,
            "pp_idx" | "pp" => HeatDim::PpIdx,
            "tp_idx" | "tp" => HeatDim::TpIdx,
            other => return Err(Error::UnknownDimension(other.to_string())),
        })
    }
}

impl HeatDim {
    pub fn entity_of(self, topo: &Topology, rank: usize) -> usize {
        let c = &topo.coords[rank];
        match self {
            HeatDim::Rank => rank,
            HeatDim::Node => c.node_id,
            HeatDim::DpIdx => c.dp_idx,
            HeatDim::PpIdx => c.pp_idx,
            HeatDim::TpIdx => c.tp_idx,
        }
    }

    pub fn entity_count(self, topo: &Topology) -> usize {
        match self {
            HeatDim::Rank => topo.coords.len(),
            HeatDim::Node => topo.num_nodes(),
            HeatDim::DpIdx => topo.dp,
            HeatDim::PpIdx => topo.pp,
            HeatDim::TpIdx => topo.tp,
        }
    }
}

/// Mean forward plus backward time per rank, per entity and step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatMap {
    pub dim: HeatDim,
    pub steps: Vec<usize>,
    /// `cells[entity][step column]`.
    pub cells: Vec<Vec<f64>>,
    /// Per-entity mean over steps.
    pub row_means: Vec<f64>,
}

impl HeatMap {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("entity");
        for s in &self.steps {
            let _ = write!(out, ",step_{s}");
        }
        out.push_str(",mean\n");
        for (e, row) in self.cells.iter().enumerate() {
            let _ = write!(out, "{e}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", self.row_means[e]);
        }
        out
    }
}

pub fn build_heatmap(table: &SpanTable, topo: &Topology, dim: HeatDim) -> Result<HeatMap> {
    // per (rank, step) compute total
    let mut per_rank: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for s in table.spans() {
        if matches!(s.kind, EventKind::Fwd | EventKind::Bwd) && s.status == SpanStatus::Ok && s.rank < topo.coords.len() {
            *per_rank.entry((s.step, s.rank)).or_default() += s.duration();
        }
    }
    if per_rank.is_empty() {
        return Err(Error::InvalidConfig("no forward or backward spans to aggregate".into()));
    }
    let mut steps: Vec<usize> = per_rank.keys().map(|k| k.0).collect();
    steps.dedup();
    let col: BTreeMap<usize, usize> = steps.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let n = dim.entity_count(topo);
    let mut sum = vec![vec![0.0; steps.len()]; n];
    let mut cnt = vec![vec![0usize; steps.len()]; n];
    for (&(step, rank), &v) in &per_rank {
        let e = dim.entity_of(topo, rank);
        sum[e][col[&step]] += v;
        cnt[e][col[&step]] += 1;
    }
    let cells: Vec<Vec<f64>> = sum
        .iter()
        .zip(&cnt)
        .map(|(s, c)| s.iter().zip(c).map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect())
        .collect();
    let row_means = cells
        .iter()
        .zip(&cnt)
        .map(|(row, c)| {
            let have: Vec<f64> = row.iter().zip(c).filter(|(_, &c)| c > 0).map(|(v, _)| *v).collect();
            if have.is_empty() {
                0.0
            } else {
                have.iter().sum::<f64>() / have.len() as f64
            }
        })
        .collect();
    Ok(HeatMap { dim, steps, cells, row_means })
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

/// Entities whose step-averaged latency exceeds `(1 + delta)` times the
/// median entity.
pub fn detect_stragglers(hm: &HeatMap, delta: f64) -> Result<Vec<usize>> {
    if hm.steps.len() < 5 {
        return Err(Error::InsufficientSteps { need: 5, have: hm.steps.len() });
    }
    let med = median(&hm.row_means);
    Ok(hm
        .row_means
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > (1.0 + delta) * med)
        .map(|(e, _)| e)
        .collect())
}
