//! Scenario files: one JSON document describing the cluster, the job, the
//! faults to inject and how the control plane reacts.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::checkpoint::CheckpointConfig;
use crate::cluster::{build_topology, ClusterSpec, HardwareProfile, ParallelConfig, Topology};
use crate::control::heartbeat::AnomalyRule;
use crate::control::local::PhaseDurations;
use crate::diagnostics::DiagConfig;
use crate::error::{Error, Result};
use crate::schedule::{apply_overlap_transforms, apply_ptb, gen_interleaved_1f1b, CostModel, EventGraph};
use crate::sim::{DataSpec, FaultSpec, Target};

pub const SCHEMA_VERSION: u32 = 1;

fn default_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub steps: usize,
    pub cluster: ClusterSpec,
    pub parallel: ParallelConfig,
    #[serde(default)]
    pub cost: CostModel,
    /// Hidden hardware truth for nodes that are not healthy.
    #[serde(default)]
    pub profiles: Vec<HardwareProfile>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub control: ControlParams,
    #[serde(default)]
    pub checkpoint: CheckpointConfig,
    #[serde(default)]
    pub sim: SimParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSpec>,
    /// Artifact directory; the CLI's `--out` overrides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlParams {
    /// Run the recovery workflow on failure; otherwise stop at the first
    /// failure.
    pub recover: bool,
    pub spares: usize,
    pub rules: Vec<AnomalyRule>,
    pub durations: PhaseDurations,
    pub diag: DiagConfig,
    pub max_recoveries: usize,
    /// Read each checkpoint partition once per data-parallel group and
    /// broadcast it.
    pub designated_reader: bool,
    /// Per-node RDMA rate reported while a node is idle between steps, so
    /// traffic-based rules see a live job even in compute-only configs.
    pub baseline_traffic_bps: f64,
}

impl Default for ControlParams {
    fn default() -> Self {
        ControlParams {
            recover: true,
            spares: 0,
            rules: AnomalyRule::defaults(),
            durations: PhaseDurations::default(),
            diag: DiagConfig::default(),
            max_recoveries: 16,
            designated_reader: true,
            baseline_traffic_bps: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub nccl_timeout: f64,
    pub retransmit_timeout: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams { nccl_timeout: 600.0, retransmit_timeout: 10.0 }
    }
}

impl Scenario {
    pub fn from_json(text: &str, path: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let s: Scenario = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            path: format!("{path}#{}", json_pointer(&e.path().to_string())),
            msg: e.inner().to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported scenario version {}", self.version)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        self.cluster.validate()?;
        self.parallel.validate()?;
        self.cost.validate()?;
        let nodes = self.cluster.num_nodes + self.control.spares;
        let ranks = self.parallel.ranks();
        for p in &self.profiles {
            p.validate()?;
            if p.node_id >= nodes {
                return Err(Error::UnknownNode(p.node_id));
            }
        }
        for f in &self.faults {
            f.validate()?;
            match f.target {
                Target::Node(n) if n >= self.cluster.num_nodes => return Err(Error::UnknownNode(n)),
                Target::Rank(r) if r >= ranks => {
                    return Err(Error::OutOfRange { what: "fault rank", value: r, limit: ranks })
                }
                _ => {}
            }
        }
        for r in &self.control.rules {
            r.validate()?;
        }
        Ok(())
    }

    pub fn topology(&self) -> Result<Topology> {
        build_topology(&self.cluster, &self.parallel)
    }

    /// Iteration graph with the transforms the cost model enables.
    pub fn graph(&self) -> Result<EventGraph> {
        let mut g = gen_interleaved_1f1b(&self.parallel)?;
        if self.cost.ptb_enabled {
            g = apply_ptb(&g, &self.cost)?;
        }
        if self.cost.overlap_dp || self.cost.overlap_pp || self.cost.overlap_tp {
            g = apply_overlap_transforms(&g, &self.cost)?.0;
        }
        Ok(g)
    }
}

/// `a.b[2].c` to `/a/b/2/c`.
fn json_pointer(path: &str) -> String {
    if path == "." {
        return String::new();
    }
    let mut out = String::new();
    for part in path.split('.') {
        let mut rest = part;
        while let Some(i) = rest.find('[') {
            if i > 0 {
                out.push('/');
                out.push_str(&rest[..i]);
            }
            let j = rest[i..].find(']').map_or(rest.len(), |j| i + j);
            out.push('/');
            out.push_str(&rest[i + 1..j]);
            rest = rest.get(j + 1..).unwrap_or("");
        }
        if !rest.is_empty() {
            out.push('/');
            out.push_str(rest);
        }
    }
    out
}
