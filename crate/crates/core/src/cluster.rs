//! Physical cluster description, hidden per-node hardware state, and the
//! rank layout for combined tensor/pipeline/data parallelism.
//!
//! Ranks are ordered tp-fastest, then dp, then pp:
//! `rank = tp_idx + tp * (dp_idx + dp * pp_idx)`.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};

fn default_gpus_per_node() -> usize {
    8
}
fn default_intra_bw() -> f64 {
    300e9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub num_nodes: usize,
    #[serde(default = "default_gpus_per_node")]
    pub gpus_per_node: usize,
    /// Bytes/s per NIC.
    pub nic_bw: f64,
    pub pcie_bw: f64,
    /// Aggregate shared-store bandwidth, bytes/s.
    pub sharedstore_bw: f64,
    pub peak_flops_per_gpu: f64,
    pub tor_group_size: usize,
    /// NICs per node; defaults to one per GPU.
    #[serde(default)]
    pub nics_per_node: Option<usize>,
    /// NVLink-class bandwidth used for node-local collectives.
    #[serde(default = "default_intra_bw")]
    pub intra_node_bw: f64,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_nodes == 0 || self.gpus_per_node == 0 || self.tor_group_size == 0 {
            return bad("cluster counts must be >= 1");
        }
        if self.nics() == 0 {
            return bad("nics_per_node must be >= 1");
        }
        for (name, v) in [
            ("nic_bw", self.nic_bw),
            ("pcie_bw", self.pcie_bw),
            ("sharedstore_bw", self.sharedstore_bw),
            ("peak_flops_per_gpu", self.peak_flops_per_gpu),
            ("intra_node_bw", self.intra_node_bw),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be > 0")));
            }
        }
        if self.num_nodes % self.tor_group_size != 0 {
            return bad("num_nodes must be divisible by tor_group_size");
        }
        Ok(())
    }

    pub fn total_gpus(&self) -> usize {
        self.num_nodes * self.gpus_per_node
    }

    pub fn nics(&self) -> usize {
        self.nics_per_node.unwrap_or(self.gpus_per_node)
    }

    pub fn tor_of(&self, node: usize) -> usize {
        node / self.tor_group_size
    }
}

/// Ground truth about one node. Diagnostics never read this directly; they
/// only see what [`Fleet`] measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    pub node_id: usize,
    #[serde(default = "one")]
    pub compute_multiplier: f64,
    /// Per-NIC bandwidth multiplier in (0, 1].
    #[serde(default)]
    pub link_degradations: Vec<f64>,
    /// Flap events per simulated hour.
    #[serde(default)]
    pub flap_rate: f64,
    /// Probability that a cross-node collective touching this node hangs.
    #[serde(default)]
    pub hang_prob: f64,
    /// Local GPU indices with uncorrectable memory errors.
    #[serde(default)]
    pub failed_gpus: Vec<usize>,
}

fn one() -> f64 {
    1.0
}

impl HardwareProfile {
    pub fn healthy(node_id: usize, nics: usize) -> Self {
        HardwareProfile {
            node_id,
            compute_multiplier: 1.0,
            link_degradations: vec![1.0; nics],
            flap_rate: 0.0,
            hang_prob: 0.0,
            failed_gpus: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.compute_multiplier >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "node {}: compute_multiplier must be >= 1",
                self.node_id
            )));
        }
        if self.link_degradations.iter().any(|d| !(*d > 0.0 && *d <= 1.0)) {
            return Err(Error::InvalidConfig(format!(
                "node {}: link degradations must lie in (0, 1]",
                self.node_id
            )));
        }
        if !(0.0..=1.0).contains(&self.hang_prob) || self.flap_rate < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "node {}: hang_prob must lie in [0, 1] and flap_rate >= 0",
                self.node_id
            )));
        }
        Ok(())
    }

    /// Multiplier for NIC `i`; missing entries count as healthy.
    pub fn link(&self, i: usize) -> f64 {
        self.link_degradations.get(i).copied().unwrap_or(1.0)
    }

    pub fn min_link(&self) -> f64 {
        self.link_degradations.iter().copied().fold(1.0, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelConfig {
    pub tp: usize,
    pub pp: usize,
    pub dp: usize,
    #[serde(default = "one_usize")]
    pub vpp: usize,
    pub micro_batches: usize,
    pub global_batch: usize,
    pub seq_len: u64,
    /// Attention window; defaults to `seq_len` (full attention).
    #[serde(default)]
    pub window: Option<u64>,
    pub layers: usize,
    pub hidden: u64,
    pub heads: usize,
    pub vocab: u64,
    /// Parameter count; derived from the shape when omitted.
    #[serde(default)]
    pub params: Option<f64>,
}

fn one_usize() -> usize {
    1
}

impl ParallelConfig {
    pub fn ranks(&self) -> usize {
        self.tp * self.pp * self.dp
    }

    pub fn window(&self) -> u64 {
        self.window.unwrap_or(self.seq_len)
    }

    pub fn micro_batch_size(&self) -> usize {
        self.global_batch / (self.dp * self.micro_batches).max(1)
    }

    pub fn layers_per_chunk(&self) -> usize {
        self.layers / (self.pp * self.vpp).max(1)
    }

    /// `12 * layers * hidden^2 + vocab * hidden` unless set explicitly.
    pub fn param_count(&self) -> f64 {
        self.params.unwrap_or_else(|| {
            let h = self.hidden as f64;
            12.0 * self.layers as f64 * h * h + self.vocab as f64 * h
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, v) in [
            ("tp", self.tp),
            ("pp", self.pp),
            ("dp", self.dp),
            ("vpp", self.vpp),
            ("micro_batches", self.micro_batches),
            ("global_batch", self.global_batch),
            ("layers", self.layers),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.seq_len == 0 || self.hidden == 0 {
            return bad("seq_len and hidden must be >= 1".into());
        }
        if self.layers % (self.pp * self.vpp) != 0 {
            return bad(format!(
                "layers ({}) not divisible by pp*vpp ({})",
                self.layers,
                self.pp * self.vpp
            ));
        }
        if self.global_batch % (self.dp * self.micro_batches) != 0 {
            return bad(format!(
                "global_batch ({}) not divisible by dp*micro_batches ({})",
                self.global_batch,
                self.dp * self.micro_batches
            ));
        }
        let w = self.window();
        if w == 0 || w > self.seq_len {
            return Err(Error::WindowTooLarge { w, s: self.seq_len });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RankCoord {
    pub rank: usize,
    pub dp_idx: usize,
    pub pp_idx: usize,
    pub tp_idx: usize,
    pub node_id: usize,
    pub local_gpu: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dim {
    Tp,
    Pp,
    Dp,
}

impl Dim {
    pub fn as_str(self) -> &'static str {
        match self {
            Dim::Tp => "tp",
            Dim::Pp => "pp",
            Dim::Dp => "dp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupRef {
    pub dim: Dim,
    pub index: usize,
}

impl fmt::Display for GroupRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.dim.as_str(), self.index)
    }
}

impl std::str::FromStr for GroupRef {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownGroup(s.to_string());
        let (d, i) = s.split_once(':').ok_or_else(unknown)?;
        let dim = match d {
            "tp" => Dim::Tp,
            "pp" => Dim::Pp,
            "dp" => Dim::Dp,
            _ => return Err(unknown()),
        };
        let index = i.parse().map_err(|_| unknown())?;
        Ok(GroupRef { dim, index })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub tp: usize,
    pub pp: usize,
    pub dp: usize,
    pub gpus_per_node: usize,
    pub coords: Vec<RankCoord>,
    /// Indexed by `dp_idx + dp * pp_idx`.
    pub tp_groups: Vec<Vec<usize>>,
    /// Indexed by `tp_idx + tp * dp_idx`.
    pub pp_groups: Vec<Vec<usize>>,
    /// Indexed by `tp_idx + tp * pp_idx`.
    pub dp_groups: Vec<Vec<usize>>,
}

pub fn build_topology(cluster: &ClusterSpec, cfg: &ParallelConfig) -> Result<Topology> {
    cluster.validate()?;
    cfg.validate()?;
    let gpus = cluster.total_gpus();
    if cfg.ranks() != gpus {
        return Err(Error::DimensionMismatch {
            ranks: cfg.ranks(),
            gpus,
        });
    }
    if cfg.tp > cluster.gpus_per_node {
        return Err(Error::InvalidConfig(format!(
            "tp ({}) exceeds gpus_per_node ({})",
            cfg.tp, cluster.gpus_per_node
        )));
    }
    let (tp, pp, dp) = (cfg.tp, cfg.pp, cfg.dp);
    let g = cluster.gpus_per_node;
    let coords: Vec<RankCoord> = (0..gpus)
        .map(|rank| RankCoord {
            rank,
            tp_idx: rank % tp,
            dp_idx: (rank / tp) % dp,
            pp_idx: rank / (tp * dp),
            node_id: rank / g,
            local_gpu: rank % g,
        })
        .collect();
    let mut tp_groups = vec![Vec::with_capacity(tp); dp * pp];
    let mut pp_groups = vec![Vec::with_capacity(pp); tp * dp];
    let mut dp_groups = vec![Vec::with_capacity(dp); tp * pp];
    for c in &coords {
        tp_groups[c.dp_idx + dp * c.pp_idx].push(c.rank);
        pp_groups[c.tp_idx + tp * c.dp_idx].push(c.rank);
        dp_groups[c.tp_idx + tp * c.pp_idx].push(c.rank);
    }
    for (i, grp) in tp_groups.iter().enumerate() {
        let nodes: BTreeSet<usize> = grp.iter().map(|&r| coords[r].node_id).collect();
        if nodes.len() > 1 {
            return Err(Error::TpSpansNodes {
                group: i,
                nodes: nodes.into_iter().collect(),
            });
        }
    }
    Ok(Topology {
        tp,
        pp,
        dp,
        gpus_per_node: g,
        coords,
        tp_groups,
        pp_groups,
        dp_groups,
    })
}

impl Topology {
    pub fn ranks(&self) -> usize {
        self.coords.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.ranks().div_ceil(self.gpus_per_node)
    }

    pub fn rank_of(&self, dp_idx: usize, pp_idx: usize, tp_idx: usize) -> Result<usize> {
        if dp_idx >= self.dp {
            return Err(Error::OutOfRange { what: "dp_idx", value: dp_idx, limit: self.dp });
        }
        if pp_idx >= self.pp {
            return Err(Error::OutOfRange { what: "pp_idx", value: pp_idx, limit: self.pp });
        }
        if tp_idx >= self.tp {
            return Err(Error::OutOfRange { what: "tp_idx", value: tp_idx, limit: self.tp });
        }
        Ok(tp_idx + self.tp * (dp_idx + self.dp * pp_idx))
    }

    pub fn coord_of(&self, rank: usize) -> Result<RankCoord> {
        self.coords.get(rank).copied().ok_or(Error::OutOfRange {
            what: "rank",
            value: rank,
            limit: self.ranks(),
        })
    }

    pub fn node_of(&self, rank: usize) -> usize {
        self.coords[rank].node_id
    }

    pub fn ranks_on_node(&self, node: usize) -> std::ops::Range<usize> {
        let lo = (node * self.gpus_per_node).min(self.ranks());
        let hi = ((node + 1) * self.gpus_per_node).min(self.ranks());
        lo..hi
    }

    pub fn groups(&self, dim: Dim) -> &[Vec<usize>] {
        match dim {
            Dim::Tp => &self.tp_groups,
            Dim::Pp => &self.pp_groups,
            Dim::Dp => &self.dp_groups,
        }
    }

    pub fn group(&self, g: GroupRef) -> Result<&[usize]> {
        self.groups(g.dim)
            .get(g.index)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::UnknownGroup(g.to_string()))
    }

    pub fn group_of(&self, rank: usize, dim: Dim) -> GroupRef {
        let c = self.coords[rank];
        let index = match dim {
            Dim::Tp => c.dp_idx + self.dp * c.pp_idx,
            Dim::Pp => c.tp_idx + self.tp * c.dp_idx,
            Dim::Dp => c.tp_idx + self.tp * c.pp_idx,
        };
        GroupRef { dim, index }
    }
}

/// Owns the hidden hardware state of every node (cluster plus spares) and
/// answers only measurement queries about it.
#[derive(Debug, Clone)]
pub struct Fleet {
    spec: ClusterSpec,
    profiles: Vec<HardwareProfile>,
}

impl Fleet {
    /// `total_nodes` covers the cluster and any spares; nodes without an
    /// explicit profile are healthy.
    pub fn new(spec: ClusterSpec, total_nodes: usize, overrides: &[HardwareProfile]) -> Result<Self> {
        let nics = spec.nics();
        let mut profiles: Vec<HardwareProfile> =
            (0..total_nodes).map(|n| HardwareProfile::healthy(n, nics)).collect();
        for p in overrides {
            p.validate()?;
            let slot = profiles.get_mut(p.node_id).ok_or(Error::UnknownNode(p.node_id))?;
            *slot = p.clone();
            slot.link_degradations.resize(nics, 1.0);
        }
        Ok(Fleet { spec, profiles })
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    /// Simulator access to the ground truth. Control-plane code only holds a
    /// `&dyn Probe`.
    pub(crate) fn profiles(&self) -> &[HardwareProfile] {
        &self.profiles
    }

    pub(crate) fn profile_mut(&mut self, node: usize) -> Option<&mut HardwareProfile> {
        self.profiles.get_mut(node)
    }

    /// Profiles for the nodes in `roster`, renumbered to slot order.
    pub(crate) fn roster_profiles(&self, roster: &[usize]) -> Vec<HardwareProfile> {
        roster
            .iter()
            .enumerate()
            .map(|(slot, &n)| {
                let mut p = self.profiles[n].clone();
                p.node_id = slot;
                p
            })
            .collect()
    }

    /// Marks a node repaired.
    pub fn repair(&mut self, node: usize) {
        let nics = self.spec.nics();
        if let Some(p) = self.profiles.get_mut(node) {
            *p = HardwareProfile::healthy(node, nics);
        }
    }
}
