//! Cost model for creating communication groups through a rendezvous
//! key-value store.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::cluster::{build_topology, ClusterSpec, Dim, ParallelConfig, Topology};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StoreKind {
    /// One request at a time; every round-trip queues behind the others.
    BlockingKv,
    NonblockingKv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BarrierPolicy {
    /// World-wide barrier after every group creation.
    PerGroupGlobal,
    /// Groups created in one agreed order, a single world barrier at the end.
    OrderedMinimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitPlan {
    pub n: usize,
    /// Member ranks of each group, in creation order.
    pub groups: Vec<Vec<usize>>,
    pub store_kind: StoreKind,
    pub barrier_policy: BarrierPolicy,
    /// Seconds per store round-trip on the wire.
    pub msg_latency: f64,
    /// Requests per second the store can serve.
    pub store_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitResult {
    pub time: f64,
    pub messages: u64,
    pub barriers: u64,
    pub barrier_messages: u64,
    pub groups: usize,
}

/// Every tensor, data and pipeline group, in the order all ranks agree on:
/// by dimension, then by group index.
pub fn creation_order(topo: &Topology) -> Vec<Vec<usize>> {
    [Dim::Tp, Dim::Dp, Dim::Pp].iter().flat_map(|&d| topo.groups(d).iter().cloned()).collect()
}

impl InitPlan {
    pub fn from_topology(topo: &Topology, store_kind: StoreKind, barrier_policy: BarrierPolicy, msg_latency: f64, store_rate: f64) -> Self {
        InitPlan { n: topo.ranks(), groups: creation_order(topo), store_kind, barrier_policy, msg_latency, store_rate }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("group init needs at least one rank".into()));
        }
        if !(self.msg_latency > 0.0 && self.store_rate > 0.0) {
            return Err(Error::InvalidConfig("msg_latency and store_rate must be > 0".into()));
        }
        if let Some(r) = self.groups.iter().flatten().find(|&&r| r >= self.n) {
            return Err(Error::OutOfRange { what: "group member", value: *r, limit: self.n });
        }
        Ok(())
    }
}

/// Each group creation costs every member one publish and one lookup. A
/// world barrier costs one round-trip per rank and is skipped for a single
/// rank.
pub fn simulate_init(plan: &InitPlan) -> Result<InitResult> {
    plan.validate()?;
    let n = plan.n as u64;
    let creation_msgs: u64 = plan.groups.iter().map(|g| 2 * g.len() as u64).sum();
    let barriers: u64 = match (plan.n, plan.barrier_policy) {
        (1, _) => 0,
        (_, BarrierPolicy::PerGroupGlobal) => plan.groups.len() as u64,
        (_, BarrierPolicy::OrderedMinimal) => 1,
    };
    let barrier_messages = barriers * n;
    let messages = creation_msgs + barrier_messages;

    // round-trip waves on the critical path
    let waves = match plan.barrier_policy {
        // creations run one after another, each followed by its barrier
        BarrierPolicy::PerGroupGlobal => 2 * plan.groups.len() as u64 + barriers,
        // a rank only waits on the groups it belongs to
        BarrierPolicy::OrderedMinimal => {
            let mut per_rank = vec![0u64; plan.n];
            for g in &plan.groups {
                for &r in g {
                    per_rank[r] += 1;
                }
            }
            2 * per_rank.into_iter().max().unwrap_or(0) + barriers
        }
    };
    let service = match plan.store_kind {
        StoreKind::BlockingKv => messages as f64 / plan.store_rate,
        StoreKind::NonblockingKv => 0.0,
    };
    Ok(InitResult {
        time: waves as f64 * plan.msg_latency + service,
        messages,
        barriers,
        barrier_messages,
        groups: plan.groups.len(),
    })
}

/// Topology of `n` ranks on 8-GPU nodes with fixed `tp` and `pp`, data
/// parallelism taking the rest.
pub fn grid_topology(n: usize, tp: usize, pp: usize) -> Result<Topology> {
    if n == 0 || tp == 0 || pp == 0 || n % (tp * pp) != 0 {
        return Err(Error::InvalidConfig(format!("{n} ranks do not split into tp={tp} pp={pp}")));
    }
    let dp = n / (tp * pp);
    let gpus_per_node = 8.min(n);
    if n % gpus_per_node != 0 {
        return Err(Error::InvalidConfig(format!("{n} ranks do not fill 8-GPU nodes")));
    }
    let cluster = ClusterSpec {
        num_nodes: n / gpus_per_node,
        gpus_per_node,
        nic_bw: 1.0,
        pcie_bw: 1.0,
        sharedstore_bw: 1.0,
        peak_flops_per_gpu: 1.0,
        tor_group_size: 1,
        nics_per_node: None,
        intra_node_bw: 1.0,
    };
    let cfg = ParallelConfig {
        tp,
        pp,
        dp,
        vpp: 1,
        micro_batches: 1,
        global_batch: dp,
        seq_len: 1,
        window: None,
        layers: pp,
        hidden: 1,
        heads: 1,
        vocab: 1,
        params: None,
    };
    build_topology(&cluster, &cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: usize,
    pub naive_blocking: InitResult,
    pub naive_nonblocking: InitResult,
    pub optimized: InitResult,
}

pub fn scaling_table(ns: &[usize], tp: usize, pp: usize, msg_latency: f64, store_rate: f64) -> Result<Vec<ScalingRow>> {
    ns.iter()
        .map(|&n| {
            let topo = grid_topology(n, tp, pp)?;
            let sim = |s, b| simulate_init(&InitPlan::from_topology(&topo, s, b, msg_latency, store_rate));
            Ok(ScalingRow {
                n,
                naive_blocking: sim(StoreKind::BlockingKv, BarrierPolicy::PerGroupGlobal)?,
                naive_nonblocking: sim(StoreKind::NonblockingKv, BarrierPolicy::PerGroupGlobal)?,
                optimized: sim(StoreKind::NonblockingKv, BarrierPolicy::OrderedMinimal)?,
            })
        })
        .collect()
}

pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut out = String::from(
        "n,groups,naive_blocking_time,naive_blocking_messages,naive_nonblocking_time,naive_nonblocking_messages,optimized_time,optimized_messages,naive_barriers,optimized_barriers\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.n,
            r.naive_blocking.groups,
            r.naive_blocking.time,
            r.naive_blocking.messages,
            r.naive_nonblocking.time,
            r.naive_nonblocking.messages,
            r.optimized.time,
            r.optimized.messages,
            r.naive_blocking.barriers,
            r.optimized.barriers
        );
    }
    out
}

/// Slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    crate::observe::ols(&lx, &ly).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const NS: [usize; 6] = [64, 128, 256, 512, 1024, 2048];

    #[test]
    fn single_rank_needs_no_barrier() {
        let topo = grid_topology(1, 1, 1).unwrap();
        for b in [BarrierPolicy::PerGroupGlobal, BarrierPolicy::OrderedMinimal] {
            let r = simulate_init(&InitPlan::from_topology(&topo, StoreKind::BlockingKv, b, 1e-3, 1e4)).unwrap();
            assert_eq!(r.barrier_messages, 0);
            assert_eq!(r.barriers, 0);
        }
    }

    #[test]
    fn message_counts_scale_quadratic_vs_linear() {
        let rows = scaling_table(&NS, 2, 4, 5e-4, 1e4).unwrap();
        let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
        let naive: Vec<f64> = rows.iter().map(|r| r.naive_blocking.messages as f64).collect();
        let opt: Vec<f64> = rows.iter().map(|r| r.optimized.messages as f64).collect();
        let sn = loglog_slope(&xs, &naive);
        let so = loglog_slope(&xs, &opt);
        assert!((sn - 2.0).abs() <= 0.1, "naive slope {sn}");
        assert!((so - 1.0).abs() <= 0.1, "optimized slope {so}");
        let ratio: Vec<f64> = naive.iter().zip(&opt).map(|(a, b)| a / b).collect();
        assert!((loglog_slope(&xs, &ratio) - 1.0).abs() <= 0.1);
        for r in &rows {
            assert!(r.naive_blocking.time > r.naive_nonblocking.time);
            assert!(r.naive_nonblocking.time > r.optimized.time);
            assert_eq!(r.optimized.barriers, 1);
        }
        assert!(scaling_csv(&rows).lines().count() == NS.len() + 1);
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let plan = InitPlan {
            n: 2,
            groups: vec![vec![0, 2]],
            store_kind: StoreKind::BlockingKv,
            barrier_policy: BarrierPolicy::OrderedMinimal,
            msg_latency: 1e-3,
            store_rate: 1.0,
        };
        assert!(matches!(simulate_init(&plan), Err(Error::OutOfRange { .. })));
        let plan = InitPlan { n: 0, groups: vec![], ..plan };
        assert!(simulate_init(&plan).is_err());
        assert!(grid_topology(12, 8, 1).is_err());
    }

    proptest! {
        #[test]
        fn time_is_monotone_in_n(k in 0u32..6, blocking in any::<bool>(), ordered in any::<bool>()) {
            let store = if blocking { StoreKind::BlockingKv } else { StoreKind::NonblockingKv };
            let bar = if ordered { BarrierPolicy::OrderedMinimal } else { BarrierPolicy::PerGroupGlobal };
            let n = 8usize << k;
            let t = |n| simulate_init(&InitPlan::from_topology(&grid_topology(n, 2, 4).unwrap(), store, bar, 5e-4, 1e4)).unwrap().time;
            prop_assert!(t(2 * n) >= t(n));
        }
    }
}
