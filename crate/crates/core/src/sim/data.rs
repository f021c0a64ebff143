use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterSpec, ParallelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    /// Bytes of training samples one rank consumes per iteration.
    pub sample_bytes: f64,
    pub disk_bw: f64,
    /// Host shared-memory copy bandwidth.
    pub shm_bw: f64,
    /// CPU preprocessing time per iteration.
    pub preprocess_s: f64,
    pub async_preprocess: bool,
    pub dedicated_loader: bool,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            sample_bytes: 0.0,
            disk_bw: 2e9,
            shm_bw: 20e9,
            preprocess_s: 0.0,
            async_preprocess: true,
            dedicated_loader: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataPipeline {
    /// Time on the compute stream at the start of every iteration.
    pub dataload_s: f64,
    pub disk_bytes_per_node: f64,
    pub exposed_preprocess_s: f64,
}

/// Loading cost per iteration. Ranks of a node read identical samples (its
/// tensor-parallel group is node-local), so one loader per node reads once
/// and fans out through shared memory. With asynchronous preprocessing the
/// next batch is prepared while gradients synchronize.
pub fn model_data_pipeline(
    cluster: &ClusterSpec,
    _cfg: &ParallelConfig,
    data: &DataSpec,
    grad_sync_s: f64,
) -> DataPipeline {
    let g = cluster.gpus_per_node as f64;
    let (disk_bytes, copy_s) = if data.dedicated_loader {
        (data.sample_bytes, if g > 1.0 { g * data.sample_bytes / data.shm_bw } else { 0.0 })
    } else {
        (g * data.sample_bytes, 0.0)
    };
    let exposed = if data.async_preprocess {
        (data.preprocess_s - grad_sync_s).max(0.0)
    } else {
        data.preprocess_s
    };
    DataPipeline {
        dataload_s: disk_bytes / data.disk_bw + copy_s + exposed,
        disk_bytes_per_node: disk_bytes,
        exposed_preprocess_s: exposed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cluster(g: usize) -> ClusterSpec {
        ClusterSpec {
            num_nodes: 1,
            gpus_per_node: g,
            nic_bw: 1.0,
            pcie_bw: 1.0,
            sharedstore_bw: 1.0,
            peak_flops_per_gpu: 1.0,
            tor_group_size: 1,
            nics_per_node: None,
            intra_node_bw: 1.0,
        }
    }

    fn cfg() -> ParallelConfig {
        ParallelConfig {
            tp: 1,
            pp: 1,
            dp: 1,
            vpp: 1,
            micro_batches: 1,
            global_batch: 1,
            seq_len: 8,
            window: None,
            layers: 1,
            hidden: 8,
            heads: 1,
            vocab: 8,
            params: None,
        }
    }

    #[test]
    fn read_volume_ratio() {
        let on = DataSpec { sample_bytes: 1e6, ..DataSpec::default() };
        let off = DataSpec { dedicated_loader: false, ..on.clone() };
        let a = model_data_pipeline(&cluster(8), &cfg(), &on, 0.0);
        let b = model_data_pipeline(&cluster(8), &cfg(), &off, 0.0);
        assert_eq!(b.disk_bytes_per_node / a.disk_bytes_per_node, 8.0);
        let a = model_data_pipeline(&cluster(1), &cfg(), &on, 0.0);
        let b = model_data_pipeline(&cluster(1), &cfg(), &off, 0.0);
        assert_eq!(a.disk_bytes_per_node, b.disk_bytes_per_node);
    }

    /// Two iterations laid out by hand: iteration 0's gradient sync runs
    /// over [sync_start, sync_start + sync]; preprocessing of iteration 1
    /// starts with it; iteration 1's load begins once sync and the
    /// optimizer finish. Whatever preprocessing is still running then is
    /// exposed.
    fn timeline_exposed(pre: f64, sync: f64, opt: f64) -> f64 {
        let sync_start = 10.0;
        let load_start = sync_start + sync + opt;
        let prep_end = sync_start + pre;
        (prep_end - load_start).max(0.0)
    }

    #[test]
    fn async_preprocess_matches_timeline() {
        for (pre, sync) in [(0.5, 1.0), (1.0, 1.0), (2.0, 0.5), (0.0, 0.0), (3.0, 1.0)] {
            let d = DataSpec { preprocess_s: pre, ..DataSpec::default() };
            let m = model_data_pipeline(&cluster(8), &cfg(), &d, sync);
            assert!((m.exposed_preprocess_s - timeline_exposed(pre, sync, 0.0)).abs() < 1e-12);
            if pre <= sync {
                assert_eq!(m.exposed_preprocess_s, 0.0);
            }
        }
        let sync_d = DataSpec { preprocess_s: 0.5, async_preprocess: false, ..DataSpec::default() };
        assert_eq!(model_data_pipeline(&cluster(8), &cfg(), &sync_d, 1.0).exposed_preprocess_s, 0.5);
    }
}
