//! Two-stage checkpoints and recovery with one reader per data-parallel
//! group.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

use crate::cluster::{ClusterSpec, Topology};
use crate::error::{Error, Result};

/// Segments a partition is split into for the pipelined broadcast.
pub const BROADCAST_SEGMENTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointConfig {
    /// Iterations between checkpoints.
    pub interval: usize,
    /// Model and optimizer bytes held by one rank.
    pub partition_bytes: f64,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        CheckpointConfig { interval: 50, partition_bytes: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Durability {
    HostOnly,
    Durable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionEntry {
    pub pp_idx: usize,
    pub tp_idx: usize,
    pub partition_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Iteration the checkpoint was taken after.
    pub ckpt_id: u64,
    pub partition_bytes: f64,
    pub dp: usize,
    pub stage1_done_at: f64,
    pub stage2_done_at: f64,
    pub durability: Durability,
    pub partitions: Vec<PartitionEntry>,
}

impl CheckpointMeta {
    pub fn unique_bytes(&self) -> f64 {
        self.partitions.len() as f64 * self.partition_bytes
    }

    /// Identifier of the model and optimizer state this checkpoint holds.
    pub fn state_id(&self) -> String {
        format!("state-{:08}", self.ckpt_id)
    }
}

/// Partition held by ranks at `(pp_idx, tp_idx)`; shared across dp.
pub fn partition_id(topo: &Topology, pp_idx: usize, tp_idx: usize) -> usize {
    pp_idx * topo.tp + tp_idx
}

pub fn partition_map(topo: &Topology) -> Vec<PartitionEntry> {
    let mut out = Vec::with_capacity(topo.pp * topo.tp);
    for pp_idx in 0..topo.pp {
        for tp_idx in 0..topo.tp {
            out.push(PartitionEntry { pp_idx, tp_idx, partition_id: partition_id(topo, pp_idx, tp_idx) });
        }
    }
    out
}

/// Starts a checkpoint at `now`. Returns the metadata and the time training
/// is blocked, which is the device to host copy only.
pub fn checkpoint(
    step: u64,
    now: f64,
    partition_bytes: f64,
    cluster: &ClusterSpec,
    topo: &Topology,
) -> (CheckpointMeta, f64) {
    let stall = partition_bytes / cluster.pcie_bw;
    let partitions = partition_map(topo);
    let upload = partitions.len() as f64 * partition_bytes / cluster.sharedstore_bw;
    let meta = CheckpointMeta {
        ckpt_id: step,
        partition_bytes,
        dp: topo.dp,
        stage1_done_at: now + stall,
        stage2_done_at: now + stall + upload,
        durability: Durability::HostOnly,
        partitions,
    };
    (meta, stall)
}

/// Checkpoint history of one job.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CheckpointLog {
    pub metas: Vec<CheckpointMeta>,
}

impl CheckpointLog {
    pub fn push(&mut self, meta: CheckpointMeta) {
        self.metas.push(meta);
    }

    /// Marks uploads finished by `now` as durable.
    pub fn advance(&mut self, now: f64) {
        for m in &mut self.metas {
            if m.durability == Durability::HostOnly && m.stage2_done_at <= now {
                m.durability = Durability::Durable;
            }
        }
    }

    /// A node lost at `at` takes its host copies with it: uploads still
    /// running are dropped.
    pub fn node_lost(&mut self, at: f64) {
        self.advance(at);
        self.metas.retain(|m| m.durability == Durability::Durable);
    }

    pub fn latest_durable(&self) -> Option<&CheckpointMeta> {
        self.metas
            .iter()
            .filter(|m| m.durability == Durability::Durable)
            .max_by_key(|m| m.ckpt_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkerLoad {
    pub rank: usize,
    pub partition_id: usize,
    /// Reads from the shared store; otherwise receives the broadcast.
    pub reader: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryPlan {
    pub ckpt_id: u64,
    pub state_id: String,
    pub loads: Vec<WorkerLoad>,
    pub store_bytes_read: f64,
    pub read_time: f64,
    pub broadcast_time: f64,
    pub duration: f64,
}

/// Pipelined broadcast of `bytes` along a chain of `dp` ranks.
pub fn broadcast_time(bytes: f64, dp: usize, nic_bw: f64) -> f64 {
    if dp <= 1 || bytes == 0.0 {
        return 0.0;
    }
    let s = BROADCAST_SEGMENTS as f64;
    (s + dp as f64 - 2.0) * (bytes / s) / nic_bw
}

pub fn recover(meta: &CheckpointMeta, topo: &Topology, cluster: &ClusterSpec, designated: bool) -> Result<RecoveryPlan> {
    if meta.durability != Durability::Durable {
        return Err(Error::NotDurable(meta.ckpt_id));
    }
    for pp_idx in 0..topo.pp {
        for tp_idx in 0..topo.tp {
            let id = partition_id(topo, pp_idx, tp_idx);
            if !meta.partitions.iter().any(|p| p.partition_id == id) {
                return Err(Error::MissingPartition { ckpt: meta.ckpt_id, partition: id });
            }
        }
    }
    let loads: Vec<WorkerLoad> = topo
        .coords
        .iter()
        .map(|c| WorkerLoad {
            rank: c.rank,
            partition_id: partition_id(topo, c.pp_idx, c.tp_idx),
            reader: !designated || c.dp_idx == 0,
        })
        .collect();
    let readers = loads.iter().filter(|l| l.reader).count();
    let store_bytes_read = readers as f64 * meta.partition_bytes;
    let read_time = store_bytes_read / cluster.sharedstore_bw;
    let bcast = if designated { broadcast_time(meta.partition_bytes, topo.dp, cluster.nic_bw) } else { 0.0 };
    Ok(RecoveryPlan {
        ckpt_id: meta.ckpt_id,
        state_id: meta.state_id(),
        loads,
        store_bytes_read,
        read_time,
        broadcast_time: bcast,
        duration: read_time + bcast,
    })
}

/// Directory-backed store: `<root>/<ckpt_id>/manifest.json` plus one
/// `<partition_id>.bin` per partition.
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    root: PathBuf,
}

impl CheckpointStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CheckpointStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: u64) -> PathBuf {
        self.root.join(id.to_string())
    }

    /// Writes the manifest and a small stand-in payload per partition.
    pub fn write(&self, meta: &CheckpointMeta) -> Result<()> {
        let dir = self.dir(meta.ckpt_id);
        fs::create_dir_all(&dir)?;
        for p in &meta.partitions {
            let body = format!("{} partition {} bytes {}\n", meta.state_id(), p.partition_id, meta.partition_bytes);
            fs::write(dir.join(format!("{}.bin", p.partition_id)), body)?;
        }
        self.write_manifest(meta)
    }

    pub fn write_manifest(&self, meta: &CheckpointMeta) -> Result<()> {
        let dir = self.dir(meta.ckpt_id);
        fs::create_dir_all(&dir)?;
        let json = serde_json::to_vec_pretty(meta).map_err(|e| Error::Io(e.to_string()))?;
        fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    /// Reads a manifest and checks every partition file is present.
    pub fn load(&self, id: u64) -> Result<CheckpointMeta> {
        let path = self.dir(id).join("manifest.json");
        let text = fs::read_to_string(&path)?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        for p in &meta.partitions {
            if !self.dir(id).join(format!("{}.bin", p.partition_id)).is_file() {
                return Err(Error::MissingPartition { ckpt: id, partition: p.partition_id });
            }
        }
        Ok(meta)
    }

    pub fn ids(&self) -> Result<Vec<u64>> {
        let mut ids = Vec::new();
        if !self.root.exists() {
            return Ok(ids);
        }
        for e in fs::read_dir(&self.root)? {
            if let Some(id) = e?.file_name().to_str().and_then(|s| s.parse().ok()) {
                ids.push(id);
            }
        }
        ids.sort_unstable();
        Ok(ids)
    }

    pub fn latest_durable(&self) -> Result<CheckpointMeta> {
        for id in self.ids()?.into_iter().rev() {
            let m = self.load(id)?;
            if m.durability == Durability::Durable {
                return Ok(m);
            }
        }
        Err(Error::NoCheckpoint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{build_topology, ParallelConfig};

    fn setup(dp: usize) -> (ClusterSpec, Topology) {
        let cl = ClusterSpec {
            num_nodes: 8 * dp,
            gpus_per_node: 1,
            nic_bw: 25e9,
            pcie_bw: 20e9,
            sharedstore_bw: 5e9,
            peak_flops_per_gpu: 1e12,
            tor_group_size: 1,
            nics_per_node: None,
            intra_node_bw: 1e11,
        };
        let cfg = ParallelConfig {
            tp: 1,
            pp: 8,
            dp,
            vpp: 1,
            micro_batches: 8,
            global_batch: 8 * dp,
            seq_len: 16,
            window: None,
            layers: 8,
            hidden: 16,
            heads: 1,
            vocab: 16,
            params: None,
        };
        let topo = build_topology(&cl, &cfg).unwrap();
        (cl, topo)
    }

    #[test]
    fn stall_is_device_to_host_copy() {
        let (cl, topo) = setup(1);
        let (m, stall) = checkpoint(100, 0.0, 10e9, &cl, &topo);
        assert_eq!(stall, 0.5);
        assert_eq!(m.stage1_done_at, 0.5);
        assert!(m.stage2_done_at >= m.stage1_done_at);
        assert_eq!(checkpoint(1, 0.0, 0.0, &cl, &topo).1, 0.0);
    }

    #[test]
    fn read_volumes() {
        let (cl, topo) = setup(8);
        let (mut m, _) = checkpoint(50, 0.0, 64e9, &cl, &topo);
        m.durability = Durability::Durable;
        let d = recover(&m, &topo, &cl, true).unwrap();
        let n = recover(&m, &topo, &cl, false).unwrap();
        assert_eq!(d.store_bytes_read, 8.0 * 64e9);
        assert_eq!(n.store_bytes_read, 64.0 * 64e9);
        assert!((d.read_time - 102.4).abs() < 1e-9);
        assert!((n.read_time - 819.2).abs() < 1e-9);
        assert!(d.broadcast_time > 0.0);
        assert_eq!(n.broadcast_time, 0.0);
        assert_eq!(d.loads.iter().filter(|l| l.reader).count(), 8);
    }

    #[test]
    fn crash_during_upload_keeps_previous() {
        let (cl, topo) = setup(1);
        let mut log = CheckpointLog::default();
        let (a, _) = checkpoint(900, 0.0, 10e9, &cl, &topo);
        let t = a.stage2_done_at;
        log.push(a);
        log.advance(t + 1.0);
        let (b, _) = checkpoint(1000, t + 100.0, 10e9, &cl, &topo);
        let crash_at = b.stage1_done_at + 1.0;
        log.push(b);
        log.node_lost(crash_at);
        assert_eq!(log.latest_durable().unwrap().ckpt_id, 900);
    }

    #[test]
    fn host_only_is_not_resumable() {
        let (cl, topo) = setup(2);
        let (m, _) = checkpoint(5, 0.0, 1e9, &cl, &topo);
        assert!(matches!(recover(&m, &topo, &cl, true), Err(Error::NotDurable(5))));
    }

    #[test]
    fn store_round_trip_and_missing_partition() {
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::new(dir.path());
        let (cl, topo) = setup(2);
        let (mut m, _) = checkpoint(50, 0.0, 1e9, &cl, &topo);
        m.durability = Durability::Durable;
        store.write(&m).unwrap();
        let (m2, _) = checkpoint(100, 10.0, 1e9, &cl, &topo);
        store.write(&m2).unwrap();
        assert_eq!(store.ids().unwrap(), vec![50, 100]);
        assert_eq!(store.latest_durable().unwrap(), m);
        fs::remove_file(dir.path().join("50").join("3.bin")).unwrap();
        assert!(matches!(store.load(50), Err(Error::MissingPartition { ckpt: 50, partition: 3 })));
        let mut partial = m.clone();
        partial.partitions.retain(|p| p.partition_id != 5);
        assert!(matches!(recover(&partial, &topo, &cl, true), Err(Error::MissingPartition { partition: 5, .. })));
    }
}
