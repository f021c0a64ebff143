use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterSpec, ParallelConfig};
use crate::error::{Error, Result};

/// Durations and payload sizes the simulator charges per event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    /// Forward time for one micro-batch through one model chunk, serialized
    /// layer form with full attention.
    pub t_fwd_chunk: f64,
    pub t_bwd_chunk: f64,
    pub t_opt: f64,
    pub t_dataload: f64,
    /// Share of a layer's compute spent in the attention branch.
    pub attn_fraction: f64,
    /// Share of the attention branch that grows with sequence length
    /// (scores and softmax); sliding windows shrink only this part.
    pub quadratic_share: f64,
    /// Extra cost of the shorter branch when both branches share a device.
    pub ptb_residual: f64,
    pub seq_len: u64,
    pub window: u64,
    /// Parameter bytes gathered (and gradient bytes reduced) per chunk.
    pub dp_bytes_per_chunk: f64,
    /// Activation bytes per pipeline send.
    pub p2p_bytes: f64,
    /// Tensor-parallel all-gather bytes per chunk pass in serialized form;
    /// reduce-scatter moves the same amount.
    pub tp_bytes_per_chunk: f64,
    pub gemm_chunks: u32,
    /// Relative std-dev of per-event compute jitter.
    pub compute_noise: f64,
    pub ptb_enabled: bool,
    pub swa_enabled: bool,
    pub overlap_dp: bool,
    pub overlap_pp: bool,
    pub overlap_tp: bool,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            t_fwd_chunk: 1.0,
            t_bwd_chunk: 2.0,
            t_opt: 0.0,
            t_dataload: 0.0,
            attn_fraction: 0.5,
            quadratic_share: 0.0,
            ptb_residual: 0.0,
            seq_len: 1,
            window: 1,
            dp_bytes_per_chunk: 0.0,
            p2p_bytes: 0.0,
            tp_bytes_per_chunk: 0.0,
            gemm_chunks: 1,
            compute_noise: 0.0,
            ptb_enabled: false,
            swa_enabled: false,
            overlap_dp: false,
            overlap_pp: false,
            overlap_tp: false,
        }
    }
}

impl CostModel {
    /// One time unit per forward or backward chunk, everything else free.
    pub fn unit() -> Self {
        CostModel {
            t_fwd_chunk: 1.0,
            t_bwd_chunk: 1.0,
            ..CostModel::default()
        }
    }

    /// Analytic estimate from the model shape and hardware peak, assuming
    /// `efficiency` of peak is sustained by matmuls.
    pub fn derive(cfg: &ParallelConfig, cluster: &ClusterSpec, efficiency: f64) -> Self {
        let h = cfg.hidden as f64;
        let s = cfg.seq_len as f64;
        let tp = cfg.tp as f64;
        let mbs = cfg.micro_batch_size() as f64;
        let tokens = mbs * s;
        let lpc = cfg.layers_per_chunk() as f64;
        let dense = 24.0 * h * h;
        let scores = 4.0 * s * h;
        let flops_fwd = tokens * lpc * (dense + scores) / tp;
        let rate = cluster.peak_flops_per_gpu * efficiency;
        let t_fwd = flops_fwd / rate;
        let n = cfg.param_count();
        let local_params = n / (cfg.tp * cfg.pp * cfg.dp) as f64;
        let act_bytes = 2.0 * tokens * h;
        CostModel {
            t_fwd_chunk: t_fwd,
            t_bwd_chunk: 2.0 * t_fwd,
            t_opt: 16.0 * local_params / 2.0e12,
            t_dataload: 0.01,
            attn_fraction: (8.0 * h * h + scores) / (dense + scores),
            quadratic_share: scores / (8.0 * h * h + scores),
            seq_len: cfg.seq_len,
            window: cfg.window(),
            dp_bytes_per_chunk: 2.0 * n / (tp * (cfg.pp * cfg.vpp) as f64),
            p2p_bytes: act_bytes / tp,
            tp_bytes_per_chunk: if cfg.tp > 1 { lpc * 2.0 * act_bytes } else { 0.0 },
            ..CostModel::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let times = [self.t_fwd_chunk, self.t_bwd_chunk, self.t_opt, self.t_dataload];
        if times.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return Err(Error::InvalidConfig("cost times must be >= 0".into()));
        }
        if self.gemm_chunks == 0 {
            return Err(Error::InvalidConfig("gemm_chunks must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.attn_fraction) || !(0.0..=1.0).contains(&self.quadratic_share) {
            return Err(Error::InvalidConfig("attn_fraction and quadratic_share must lie in [0, 1]".into()));
        }
        if self.ptb_residual < 0.0 || self.compute_noise < 0.0 {
            return Err(Error::InvalidConfig("ptb_residual and compute_noise must be >= 0".into()));
        }
        for b in [self.dp_bytes_per_chunk, self.p2p_bytes, self.tp_bytes_per_chunk] {
            if !(b >= 0.0) {
                return Err(Error::InvalidConfig("byte counts must be >= 0".into()));
            }
        }
        if self.swa_enabled && self.window > self.seq_len {
            return Err(Error::WindowTooLarge { w: self.window, s: self.seq_len });
        }
        Ok(())
    }

    /// (attention, mlp) branch times for a unit-length layer.
    pub fn branch_times(&self) -> (f64, f64) {
        let scale = if self.swa_enabled && self.seq_len > 0 {
            self.window as f64 / self.seq_len as f64
        } else {
            1.0
        };
        let q = self.quadratic_share;
        let attn = self.attn_fraction * ((1.0 - q) + q * scale);
        (attn, 1.0 - self.attn_fraction)
    }

    /// Multiplier on the base chunk times for a given layer form.
    pub fn layer_factor(&self, form: LayerForm) -> f64 {
        let (a, m) = self.branch_times();
        LayerBlock::new(form).critical_path(a, m, self.ptb_residual)
    }

    pub fn tp_bytes(&self, form: LayerForm) -> f64 {
        match form {
            LayerForm::Serialized => self.tp_bytes_per_chunk,
            // both branches consume one gathered input and sum into one
            // reduce-scatter
            LayerForm::Parallel => self.tp_bytes_per_chunk / 2.0,
        }
    }
}

/// Relative attention FLOPs: `s * w` with a window, `s * s` without.
pub fn attention_cost(s: u64, w: u64, full: bool) -> Result<f64> {
    if w > s {
        return Err(Error::WindowTooLarge { w, s });
    }
    if w == 0 {
        return Err(Error::InvalidConfig("window must be >= 1".into()));
    }
    const C: f64 = 4.0;
    let span = if full { s } else { w };
    Ok(C * s as f64 * span as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerForm {
    Serialized,
    Parallel,
}

/// Four-node layer graph: norm, attention, mlp, residual sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBlock {
    pub edges: Vec<(usize, usize)>,
}

pub const LN: usize = 0;
pub const ATTN: usize = 1;
pub const MLP: usize = 2;
pub const OUT: usize = 3;

impl LayerBlock {
    pub fn new(form: LayerForm) -> Self {
        let edges = match form {
            LayerForm::Serialized => vec![(LN, ATTN), (ATTN, MLP), (MLP, OUT)],
            LayerForm::Parallel => vec![(LN, ATTN), (LN, MLP), (ATTN, OUT), (MLP, OUT)],
        };
        LayerBlock { edges }
    }

    pub fn form(&self) -> Option<LayerForm> {
        let mut e = self.edges.clone();
        e.sort_unstable();
        for form in [LayerForm::Serialized, LayerForm::Parallel] {
            let mut want = LayerBlock::new(form).edges;
            want.sort_unstable();
            if e == want {
                return Some(form);
            }
        }
        None
    }

    /// Longest path with the norm and sum nodes free. Independent branches
    /// share one device, so the shorter one leaks `residual` of its time.
    pub fn critical_path(&self, attn: f64, mlp: f64, residual: f64) -> f64 {
        match self.form() {
            Some(LayerForm::Serialized) | None => attn + mlp,
            Some(LayerForm::Parallel) => attn.max(mlp) + residual * attn.min(mlp),
        }
    }
}

/// Start offsets of a k-piece all-gather -> gemm -> reduce-scatter pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct TpPipeline {
    pub ag_start: Vec<f64>,
    pub gemm_start: Vec<f64>,
    pub rs_start: Vec<f64>,
    pub total: f64,
}

pub fn tp_pipeline(ag: f64, gemm: f64, rs: f64, k: u32) -> TpPipeline {
    let k = k.max(1) as usize;
    let (a, g, r) = (ag / k as f64, gemm / k as f64, rs / k as f64);
    let mut out = TpPipeline {
        ag_start: Vec::with_capacity(k),
        gemm_start: Vec::with_capacity(k),
        rs_start: Vec::with_capacity(k),
        total: 0.0,
    };
    let (mut ag_end, mut gemm_end, mut rs_end) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..k {
        out.ag_start.push(ag_end);
        ag_end += a;
        let gs = ag_end.max(gemm_end);
        out.gemm_start.push(gs);
        gemm_end = gs + g;
        let rs_s = gemm_end.max(rs_end);
        out.rs_start.push(rs_s);
        rs_end = rs_s + r;
    }
    out.total = rs_end;
    out
}

/// Closed form of [`tp_pipeline`]'s makespan: one fill plus the bottleneck
/// stage for every further piece.
pub fn tp_pipeline_time(ag: f64, gemm: f64, rs: f64, k: u32) -> f64 {
    let k = k.max(1) as f64;
    (ag + gemm + rs) / k + (k - 1.0) * ag.max(gemm).max(rs) / k
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn attention_ratios() {
        assert_eq!(attention_cost(2048, 2048, false).unwrap(), attention_cost(2048, 2048, true).unwrap());
        let r = attention_cost(2048, 256, false).unwrap() / attention_cost(2048, 256, true).unwrap();
        assert_eq!(r, 256.0 / 2048.0);
        let r = attention_cost(4096, 512, false).unwrap() / attention_cost(4096, 512, true).unwrap();
        assert_eq!(r, 0.125);
        assert!(attention_cost(100, 200, false).is_err());
    }

    // Enumerate every ln->out path by DFS over the edge list.
    fn longest_path_oracle(edges: &[(usize, usize)], w: [f64; 4]) -> f64 {
        fn go(n: usize, edges: &[(usize, usize)], w: &[f64; 4]) -> f64 {
            let best = edges
                .iter()
                .filter(|(a, _)| *a == n)
                .map(|(_, b)| go(*b, edges, w))
                .fold(0.0, f64::max);
            w[n] + best
        }
        go(LN, edges, &w)
    }

    #[test]
    fn ptb_symmetric_and_asymmetric() {
        let ser = LayerBlock::new(LayerForm::Serialized);
        let par = LayerBlock::new(LayerForm::Parallel);
        assert_eq!(ser.critical_path(1.0, 1.0, 0.0), 2.0);
        assert_eq!(par.critical_path(1.0, 1.0, 0.0), 1.0);
        let w = [0.0, 0.6, 0.4, 0.0];
        assert_eq!(par.critical_path(0.6, 0.4, 0.0), longest_path_oracle(&par.edges, w));
        assert_eq!(ser.critical_path(0.6, 0.4, 0.0), longest_path_oracle(&ser.edges, w));
        let res = 0.25;
        assert!((par.critical_path(0.6, 0.4, res) - (longest_path_oracle(&par.edges, w) + res * 0.4)).abs() < 1e-12);
    }

    #[test]
    fn swa_shrinks_only_quadratic_part() {
        let c = CostModel {
            attn_fraction: 0.4,
            quadratic_share: 0.5,
            seq_len: 2048,
            window: 256,
            swa_enabled: true,
            ..CostModel::default()
        };
        let (a, m) = c.branch_times();
        assert!((a - 0.4 * (0.5 + 0.5 / 8.0)).abs() < 1e-12);
        assert!((m - 0.6).abs() < 1e-12);
    }

    #[test]
    fn single_chunk_pipeline_is_serial() {
        let p = tp_pipeline(1.0, 2.0, 3.0, 1);
        assert_eq!(p.total, 6.0);
    }

    proptest! {
        #[test]
        fn pipeline_matches_closed_form(a in 0.0f64..5.0, g in 0.0f64..5.0, r in 0.0f64..5.0, k in 1u32..9) {
            let p = tp_pipeline(a, g, r, k);
            prop_assert!((p.total - tp_pipeline_time(a, g, r, k)).abs() < 1e-9);
            prop_assert!(p.total <= a + g + r + 1e-9);
        }

        #[test]
        fn parallel_never_longer(a in 0.0f64..3.0, m in 0.0f64..3.0, res in 0.0f64..1.0) {
            let ser = LayerBlock::new(LayerForm::Serialized).critical_path(a, m, res);
            let par = LayerBlock::new(LayerForm::Parallel).critical_path(a, m, res);
            prop_assert!(par <= ser + 1e-12);
        }
    }
}
